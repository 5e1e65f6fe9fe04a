//! Turn-based multi-agent simulator with fault injection and the detector in
//! the loop.
//!
//! Exactly one agent acts per step, following the topology's schedule. Each
//! agent sees only the shared-history messages written by itself and its
//! graph neighbours. When a detector is attached, every new output is scored
//! against the full shared history before it is committed; flagged outputs
//! go to the correction policy and the returned text is what enters the
//! history.

pub mod experiment;
pub mod fixtures;

use std::collections::BTreeSet;
use std::sync::LazyLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::correction::{
    apply_correction, CorrectionPolicy, CorrectionRequest, CorrectionResult, CorrectionStats, RemoteChatPolicy,
};
use crate::detector::{detect, AnomalyVerdict, DetectorModel};
use crate::embedding::Embedder;
use crate::error::{MascError, Result};
use crate::http::HttpOptions;
use crate::synthetic::early_window;
use crate::trace::{Step, Trajectory};

pub use experiment::{batch_experiment, CellReport, CorrectorConfig, ExperimentConfig, ExperimentReport, MascSettings};
pub use fixtures::{arithmetic_suite, Fixture, ScriptedArithmeticAgent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Chain,
    Complete,
    Random,
}

impl TopologyKind {
    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::Chain => "chain",
            TopologyKind::Complete => "complete",
            TopologyKind::Random => "random",
        }
    }
}

impl std::str::FromStr for TopologyKind {
    type Err = MascError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(TopologyKind::Chain),
            "complete" => Ok(TopologyKind::Complete),
            "random" => Ok(TopologyKind::Random),
            other => Err(MascError::config(format!("unknown topology {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub kind: TopologyKind,
    pub n_agents: usize,
    #[serde(default)]
    pub edge_seed: u64,
    pub rounds: usize,
}

impl Topology {
    pub fn new(kind: TopologyKind, n_agents: usize, rounds: usize, edge_seed: u64) -> Self {
        Topology { kind, n_agents, edge_seed, rounds }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.rounds == 0 {
            return Err(MascError::config("topology needs at least one agent and one round"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.n_agents * self.rounds
    }

    /// Symmetric adjacency without self loops. Random graphs are redrawn
    /// from the seeded stream until connected.
    pub fn adjacency(&self) -> Result<Vec<Vec<bool>>> {
        self.validate()?;
        let n = self.n_agents;
        let mut adj = vec![vec![false; n]; n];
        match self.kind {
            TopologyKind::Chain => {
                for i in 1..n {
                    adj[i - 1][i] = true;
                    adj[i][i - 1] = true;
                }
            }
            TopologyKind::Complete => {
                for (i, row) in adj.iter_mut().enumerate() {
                    for (j, cell) in row.iter_mut().enumerate() {
                        *cell = i != j;
                    }
                }
            }
            TopologyKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.edge_seed);
                loop {
                    for row in adj.iter_mut() {
                        row.fill(false);
                    }
                    for i in 0..n {
                        for j in i + 1..n {
                            let e = rng.random_bool(0.5);
                            adj[i][j] = e;
                            adj[j][i] = e;
                        }
                    }
                    if connected(&adj) {
                        break;
                    }
                }
            }
        }
        Ok(adj)
    }

    /// Agent index acting at each step: agents in index order, `rounds`
    /// times. For a chain this is the path order.
    pub fn schedule(&self) -> Result<Vec<usize>> {
        self.validate()?;
        Ok((0..self.rounds).flat_map(|_| 0..self.n_agents).collect())
    }

    /// Agents whose messages agent `i` can read: its neighbours and itself.
    pub fn visibility(&self) -> Result<Vec<Vec<bool>>> {
        let mut adj = self.adjacency()?;
        for (i, row) in adj.iter_mut().enumerate() {
            row[i] = true;
        }
        Ok(adj)
    }
}

fn connected(adj: &[Vec<bool>]) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for (j, &e) in adj[i].iter().enumerate() {
            if e && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetAgent {
    Random,
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSelector {
    Fixed { t: usize },
    Uniform,
    /// Within the first 20% of steps.
    Early,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    MisleadingTemplate,
    Scramble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub target_agent: TargetAgent,
    pub step_selector: StepSelector,
    pub corruption: Corruption,
    #[serde(default)]
    pub seed: u64,
    /// Restrict the target to steps whose value reaches the final answer in
    /// the clean run.
    #[serde(default)]
    pub answer_critical: bool,
}

impl Default for FaultSpec {
    fn default() -> Self {
        FaultSpec {
            target_agent: TargetAgent::Random,
            step_selector: StepSelector::Early,
            corruption: Corruption::MisleadingTemplate,
            seed: 0,
            answer_critical: true,
        }
    }
}

static ANSWER_SPAN_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:the answer is|ANSWER:)\s*(-?\d+)").expect("valid regex"));
static EXTRACT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"ANSWER:\s*([^\s]+)").expect("valid regex"));

/// Corrupts one agent output. The misleading template collapses the output
/// to a bare claim of the reported value plus one; scramble permutes the
/// whitespace tokens. The result always differs from the input.
pub fn inject_fault(output: &str, corruption: Corruption, seed: u64) -> Result<String> {
    if output.is_empty() {
        return Err(MascError::precondition("cannot corrupt an empty output"));
    }
    let out = match corruption {
        Corruption::MisleadingTemplate => {
            let n = ANSWER_SPAN_RE
                .captures_iter(output)
                .last()
                .and_then(|c| c[1].parse::<i64>().ok())
                .unwrap_or(-1);
            format!("the answer is {}", n + 1)
        }
        Corruption::Scramble => {
            let mut tokens: Vec<&str> = output.split_whitespace().collect();
            tokens.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut s = tokens.join(" ");
            if s == output && tokens.len() > 1 {
                tokens.rotate_left(1);
                s = tokens.join(" ");
            }
            if s == output {
                s = output.chars().rev().collect();
            }
            s
        }
    };
    Ok(if out == output { format!("{out} (corrupted)") } else { out })
}

/// Value after the last `ANSWER:` marker, normalized.
pub fn extract_answer(output: &str) -> Option<String> {
    EXTRACT_RE.captures_iter(output).last().map(|c| normalize_answer(&c[1]))
}

/// Trims, lowercases and drops trailing punctuation; numbers are printed in
/// canonical form so "12", "12.0" and "+12" compare equal.
pub fn normalize_answer(s: &str) -> String {
    let s = s.trim().trim_end_matches(['.', ',', ';', ')']).trim_start_matches('+').to_lowercase();
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15 => format!("{}", v as i64),
        Ok(v) if v.is_finite() => format!("{v}"),
        _ => s,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibleStep {
    pub t: usize,
    pub role: String,
    pub output: String,
}

pub struct AgentContext<'a> {
    pub t: usize,
    pub total_steps: usize,
    pub agent: usize,
    pub role: &'a str,
    pub query: &'a str,
    pub visible: &'a [VisibleStep],
}

pub struct AgentOutput {
    pub text: String,
    /// Step whose value this output builds on (0 = the query), when known.
    pub source: Option<usize>,
}

pub trait AgentPolicy: Send + Sync {
    fn act(&self, ctx: &AgentContext) -> Result<AgentOutput>;
}

/// Agent backed by the remote chat contract.
pub struct RemoteChatAgent {
    chat: RemoteChatPolicy,
}

impl RemoteChatAgent {
    pub fn new(endpoint: &str, model: &str, http: HttpOptions) -> Self {
        RemoteChatAgent { chat: RemoteChatPolicy::new(endpoint, model, http) }
    }
}

impl AgentPolicy for RemoteChatAgent {
    fn act(&self, ctx: &AgentContext) -> Result<AgentOutput> {
        let mut prompt = format!(
            "You are the {} agent in a multi-agent team, acting at step {} of {}.\nQuery: {}\nMessages you can see:\n",
            ctx.role, ctx.t, ctx.total_steps, ctx.query
        );
        if ctx.visible.is_empty() {
            prompt.push_str("(none)\n");
        }
        for s in ctx.visible {
            prompt.push_str(&format!("[{}] {}: {}\n", s.t, s.role, s.output));
        }
        if ctx.t == ctx.total_steps {
            prompt.push_str("You act last. End your reply with `ANSWER: <value>`.\n");
        }
        let text = self.chat.chat(&prompt)?;
        if text.trim().is_empty() {
            return Err(MascError::Validation("remote agent returned an empty reply".into()));
        }
        Ok(AgentOutput { text, source: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentPolicyKind {
    ScriptedTemplate,
    RemoteChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub role: String,
    pub policy: AgentPolicyKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub http: HttpOptions,
}

pub const DEFAULT_ROLES: [&str; 3] = ["decomposer", "solver", "checker"];

impl AgentSpec {
    pub fn scripted(role: &str) -> Self {
        AgentSpec {
            role: role.to_string(),
            policy: AgentPolicyKind::ScriptedTemplate,
            endpoint: None,
            model_name: None,
            http: HttpOptions::default(),
        }
    }

    /// Scripted agents cycling through decomposer, solver and checker.
    pub fn default_team(n: usize) -> Vec<AgentSpec> {
        (0..n).map(|i| AgentSpec::scripted(DEFAULT_ROLES[i % DEFAULT_ROLES.len()])).collect()
    }

    pub fn build(&self) -> Result<Agent> {
        if self.role.is_empty() {
            return Err(MascError::config("agent role must be non-empty"));
        }
        let policy: Box<dyn AgentPolicy> = match self.policy {
            AgentPolicyKind::ScriptedTemplate => Box::new(ScriptedArithmeticAgent),
            AgentPolicyKind::RemoteChat => match (&self.endpoint, &self.model_name) {
                (Some(e), Some(m)) if !e.is_empty() && !m.is_empty() => {
                    Box::new(RemoteChatAgent::new(e, m, self.http.clone()))
                }
                _ => return Err(MascError::config("remote_chat agent needs endpoint and model_name")),
            },
        };
        Ok(Agent { role: self.role.clone(), policy })
    }
}

pub struct Agent {
    pub role: String,
    pub policy: Box<dyn AgentPolicy>,
}

/// Detector and corrector attached to a run.
pub struct MascLoop<'a> {
    pub model: &'a DetectorModel,
    pub embedder: &'a dyn Embedder,
    pub with_gt: bool,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub policy: &'a dyn CorrectionPolicy,
    pub http: HttpOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub agent: usize,
    pub role: String,
    /// Output as produced, after fault injection.
    pub original_output: String,
    /// Output committed to the shared history.
    pub final_output: String,
    pub faulted: bool,
    pub source: Option<usize>,
    pub verdict: Option<AnomalyVerdict>,
    pub correction: Option<CorrectionResult>,
    pub correction_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub topology: Topology,
    pub query: String,
    pub expected_answer: String,
    pub final_answer: Option<String>,
    pub task_correct: bool,
    pub fault_step: Option<usize>,
    /// Whether a detector was attached to this run.
    pub masc_enabled: bool,
    pub steps: Vec<StepRecord>,
    pub flagged: usize,
    pub interventions: usize,
    pub correction: CorrectionStats,
    /// Set when an agent failed and the run stopped early.
    pub aborted: Option<String>,
}

impl RunReport {
    /// The committed trajectory. The injected step is labeled as an error
    /// unless a correction replaced it; every other step is labeled normal.
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            id: self.run_id.clone(),
            query: self.query.clone(),
            gt_answer: Some(self.expected_answer.clone()),
            steps: self
                .steps
                .iter()
                .map(|s| Step::labeled(&s.role, &s.final_output, s.faulted && s.final_output == s.original_output))
                .collect(),
        }
    }
}

/// Steps whose value reaches the final answer, following `source` links
/// back from the last step. Unknown provenance marks every step critical.
fn critical_steps(records: &[StepRecord]) -> BTreeSet<usize> {
    if records.iter().any(|r| r.source.is_none()) {
        return (1..=records.len()).collect();
    }
    let mut set = BTreeSet::new();
    let mut t = records.len();
    while t > 0 {
        set.insert(t);
        t = records[t - 1].source.unwrap_or(0).min(t - 1);
    }
    set
}

fn resolve_fault_step(
    fault: &FaultSpec,
    schedule: &[usize],
    clean: Option<&[StepRecord]>,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let total = schedule.len();
    let by_agent = |t: &usize| match fault.target_agent {
        TargetAgent::Random => true,
        TargetAgent::Index(a) => schedule[*t - 1] == a,
    };
    let by_selector = |t: &usize| match fault.step_selector {
        StepSelector::Fixed { t: f } => *t == f,
        StepSelector::Uniform => true,
        StepSelector::Early => *t <= early_window(total),
    };
    let critical = clean.map(critical_steps);
    let by_critical = |t: &usize| critical.as_ref().is_none_or(|c| c.contains(t));
    let mut candidates: Vec<usize> = (1..=total).filter(by_agent).filter(by_selector).filter(by_critical).collect();
    if candidates.is_empty() && critical.is_some() {
        log::info!("no answer-critical step matches the selector; using the earliest critical step");
        candidates = (1..=total).filter(by_agent).filter(by_critical).take(1).collect();
    }
    candidates
        .choose(rng)
        .copied()
        .ok_or_else(|| MascError::config(format!("fault {fault:?} matches no step of a {total}-step schedule")))
}

/// Executes one trajectory. A fault, if given, is injected at exactly one
/// step, chosen from `run_seed` and the fault seed. An agent failure stops
/// the run and is reported in `aborted`.
pub fn run_trajectory(
    agents: &[Agent],
    topology: &Topology,
    query: &str,
    expected_answer: &str,
    fault: Option<&FaultSpec>,
    masc: Option<&MascLoop>,
    run_id: &str,
    run_seed: u64,
) -> Result<RunReport> {
    if agents.len() != topology.n_agents {
        return Err(MascError::config(format!(
            "topology has {} agents, {} agent specs given",
            topology.n_agents,
            agents.len()
        )));
    }
    let schedule = topology.schedule()?;
    let visibility = topology.visibility()?;
    let plan = match fault {
        None => None,
        Some(f) => {
            let mut rng = ChaCha8Rng::seed_from_u64(f.seed ^ run_seed);
            let clean = if f.answer_critical {
                Some(execute(agents, topology, &schedule, &visibility, query, expected_answer, None, None)?.0)
            } else {
                None
            };
            let t = resolve_fault_step(f, &schedule, clean.as_deref(), &mut rng)?;
            Some((t, f.corruption, rng.random::<u64>()))
        }
    };
    let (steps, stats, aborted) = execute(agents, topology, &schedule, &visibility, query, expected_answer, plan, masc)?;
    let final_answer = if aborted.is_none() { steps.last().and_then(|s| extract_answer(&s.final_output)) } else { None };
    let task_correct = final_answer.as_deref() == Some(normalize_answer(expected_answer).as_str());
    Ok(RunReport {
        run_id: run_id.to_string(),
        topology: *topology,
        query: query.to_string(),
        expected_answer: expected_answer.to_string(),
        final_answer,
        task_correct,
        fault_step: plan.map(|p| p.0),
        masc_enabled: masc.is_some(),
        flagged: steps.iter().filter(|s| s.verdict.as_ref().is_some_and(|v| v.flagged)).count(),
        interventions: stats.interventions,
        correction: stats,
        steps,
        aborted,
    })
}

type Execution = (Vec<StepRecord>, CorrectionStats, Option<String>);

fn execute(
    agents: &[Agent],
    topology: &Topology,
    schedule: &[usize],
    visibility: &[Vec<bool>],
    query: &str,
    expected_answer: &str,
    plan: Option<(usize, Corruption, u64)>,
    masc: Option<&MascLoop>,
) -> Result<Execution> {
    let total = schedule.len();
    let mut records: Vec<StepRecord> = Vec::with_capacity(total);
    let mut stats = CorrectionStats::default();
    for (i, &a) in schedule.iter().enumerate() {
        let t = i + 1;
        let visible: Vec<VisibleStep> = records
            .iter()
            .filter(|r| visibility[a][r.agent])
            .map(|r| VisibleStep { t: r.t, role: r.role.clone(), output: r.final_output.clone() })
            .collect();
        let ctx = AgentContext { t, total_steps: total, agent: a, role: &agents[a].role, query, visible: &visible };
        let out = match agents[a].policy.act(&ctx) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("agent {a} failed at step {t}: {e}");
                return Ok((records, stats, Some(format!("agent {a} failed at step {t}: {e}"))));
            }
        };
        let faulted = plan.is_some_and(|p| p.0 == t);
        let original = match plan {
            Some((ft, corruption, seed)) if ft == t => inject_fault(&out.text, corruption, seed)?,
            _ => out.text,
        };
        let mut rec = StepRecord {
            t,
            agent: a,
            role: agents[a].role.clone(),
            final_output: original.clone(),
            original_output: original,
            faulted,
            source: out.source,
            verdict: None,
            correction: None,
            correction_failure: None,
        };
        if let Some(m) = masc {
            let partial = Trajectory {
                id: format!("live-{}", topology.kind.name()),
                query: query.to_string(),
                gt_answer: Some(expected_answer.to_string()),
                steps: records
                    .iter()
                    .map(|r| Step::new(&r.role, &r.final_output))
                    .chain(std::iter::once(Step::new(&rec.role, &rec.original_output)))
                    .collect(),
            };
            let emb = m.model.prepare(m.embedder, &partial, m.with_gt, &m.http)?;
            let verdict = detect(m.model, &emb, t, m.alpha, m.beta, m.delta)?;
            let history = records.iter().map(|r| (r.role.clone(), r.final_output.clone())).collect();
            let req = CorrectionRequest::new(&rec.role, query, history, &rec.original_output);
            let outcome = apply_correction(m.policy, &verdict, &req, &mut stats);
            rec.final_output = outcome.output;
            rec.correction = outcome.result;
            rec.correction_failure = outcome.failure;
            rec.verdict = Some(verdict);
        }
        records.push(rec);
    }
    Ok((records, stats, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn team(n: usize) -> Vec<Agent> {
        AgentSpec::default_team(n).iter().map(|s| s.build().unwrap()).collect()
    }

    #[test]
    fn schedules() {
        assert_eq!(Topology::new(TopologyKind::Chain, 3, 1, 0).schedule().unwrap(), vec![0, 1, 2]);
        assert_eq!(Topology::new(TopologyKind::Complete, 2, 2, 0).schedule().unwrap(), vec![0, 1, 0, 1]);
        let r = Topology::new(TopologyKind::Random, 5, 2, 11);
        assert_eq!(r.visibility().unwrap(), r.visibility().unwrap());
        assert!(connected(&r.adjacency().unwrap()));
        let chain = Topology::new(TopologyKind::Chain, 3, 1, 0).visibility().unwrap();
        assert_eq!(chain[0], vec![true, true, false]);
    }

    #[test]
    fn fault_operators() {
        assert_eq!(inject_fault("the answer is 12", Corruption::MisleadingTemplate, 0).unwrap(), "the answer is 13");
        let s = "one two three four five";
        let a = inject_fault(s, Corruption::Scramble, 4).unwrap();
        assert_eq!(a, inject_fault(s, Corruption::Scramble, 4).unwrap());
        assert_ne!(a, s);
        let mut sorted: Vec<_> = a.split(' ').collect();
        sorted.sort_unstable();
        assert_eq!(sorted, vec!["five", "four", "one", "three", "two"]);
        for input in ["x", "a a", "the answer is -1", "the answer is 0"] {
            for c in [Corruption::MisleadingTemplate, Corruption::Scramble] {
                assert_ne!(inject_fault(input, c, 1).unwrap(), input, "{input} {c:?}");
            }
        }
    }

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_answer("so ANSWER: 12."), Some("12".into()));
        assert_eq!(extract_answer("ANSWER: 3 then ANSWER: +4.0"), Some("4".into()));
        assert_eq!(extract_answer("the answer is 5"), None);
    }

    #[test]
    fn clean_runs_are_correct_in_every_topology() {
        let fixtures = arithmetic_suite(10, 6, 5);
        for kind in [TopologyKind::Chain, TopologyKind::Complete, TopologyKind::Random] {
            for seed in 0..4 {
                let topo = Topology::new(kind, 3, 2, seed);
                for f in &fixtures {
                    let r = run_trajectory(&team(3), &topo, &f.query(), &f.answer.to_string(), None, None, "r", 0).unwrap();
                    assert!(r.task_correct, "{kind:?} seed {seed}: {:?}", r.steps.last());
                    assert_eq!(r.steps.len(), 6);
                }
            }
        }
    }

    #[test]
    fn critical_fault_breaks_the_answer_at_one_step() {
        let f = &arithmetic_suite(1, 6, 8)[0];
        let topo = Topology::new(TopologyKind::Chain, 3, 2, 0);
        let clean = run_trajectory(&team(3), &topo, &f.query(), &f.answer.to_string(), None, None, "c", 3).unwrap();
        let spec = FaultSpec::default();
        let bad = run_trajectory(&team(3), &topo, &f.query(), &f.answer.to_string(), Some(&spec), None, "c", 3).unwrap();
        let k = bad.fault_step.unwrap();
        assert!(k <= early_window(6));
        assert!(!bad.task_correct);
        for t in 1..k {
            assert_eq!(clean.steps[t - 1].final_output, bad.steps[t - 1].final_output);
        }
        assert_ne!(clean.steps[k - 1].final_output, bad.steps[k - 1].final_output);
        let traj = bad.trajectory();
        assert_eq!(traj.error_steps(), vec![k]);
    }
}
