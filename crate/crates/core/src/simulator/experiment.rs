//! Sweeps over topologies × {clean, faulted} × {detector off, on}.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::fixtures::{arithmetic_suite, Fixture};
use super::{run_trajectory, Agent, AgentSpec, FaultSpec, MascLoop, RunReport, Topology, TopologyKind};
use crate::correction::{CorrectionPolicy, CorrectionPolicySpec, CorrectionRequest};
use crate::error::{MascError, Result};
use crate::http::HttpOptions;
use crate::trace::Trajectory;
use crate::training::{calibrate_threshold, load_checkpoint, train, Checkpoint, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrectorConfig {
    /// Replaces an output with the clean run's output for the same step.
    Oracle,
    Policy { policy: CorrectionPolicySpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MascSettings {
    /// Use a saved detector instead of training one on clean runs.
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub train_fixtures: usize,
    pub calibration_fixtures: usize,
    pub quantile: f64,
    /// Fixed threshold, overriding calibration.
    pub delta: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub corrector: CorrectorConfig,
}

impl Default for MascSettings {
    fn default() -> Self {
        MascSettings {
            checkpoint: None,
            train: TrainConfig::hc(),
            train_fixtures: 100,
            calibration_fixtures: 50,
            quantile: 0.99,
            delta: None,
            alpha: 1.0,
            beta: 1.0,
            corrector: CorrectorConfig::Oracle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub fixtures: usize,
    pub fixture_seed: u64,
    pub n_agents: usize,
    pub rounds: usize,
    pub topologies: Vec<TopologyKind>,
    pub edge_seed: u64,
    /// `None` runs clean cells only.
    pub fault: Option<FaultSpec>,
    pub masc: Option<MascSettings>,
    /// Agent team; defaults to scripted agents.
    pub agents: Option<Vec<AgentSpec>>,
    pub base_seed: u64,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            fixtures: 50,
            fixture_seed: 0,
            n_agents: 3,
            rounds: 2,
            topologies: vec![TopologyKind::Chain, TopologyKind::Complete, TopologyKind::Random],
            edge_seed: 0,
            fault: Some(FaultSpec::default()),
            masc: None,
            agents: None,
            base_seed: 0,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fixtures == 0 || self.topologies.is_empty() {
            return Err(MascError::config("experiment needs fixtures and at least one topology"));
        }
        if let Some(a) = &self.agents {
            if a.len() != self.n_agents {
                return Err(MascError::config("agents list length must equal n_agents"));
            }
        }
        if let Some(m) = &self.masc {
            if !(m.quantile > 0.0 && m.quantile < 1.0) {
                return Err(MascError::config("quantile must lie in (0, 1)"));
            }
            if let CorrectorConfig::Policy { policy } = &m.corrector {
                policy.validate()?;
            }
        }
        Topology::new(TopologyKind::Chain, self.n_agents, self.rounds, 0).validate()
    }

    fn topology(&self, kind: TopologyKind) -> Topology {
        Topology::new(kind, self.n_agents, self.rounds, self.edge_seed)
    }

    fn team(&self) -> Result<Vec<Agent>> {
        match &self.agents {
            Some(specs) => specs.iter().map(AgentSpec::build).collect(),
            None => AgentSpec::default_team(self.n_agents).iter().map(AgentSpec::build).collect(),
        }
    }
}

/// Seed for one run, derived from the base seed and the run identifier.
pub fn run_seed(base_seed: u64, run_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(run_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub topology: TopologyKind,
    pub faulted: bool,
    pub masc: bool,
    pub n_runs: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub flagged_steps: usize,
    pub policy_calls: usize,
    pub interventions: usize,
    pub correction_failures: usize,
    pub aborted_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyDelta {
    pub topology: TopologyKind,
    pub clean_accuracy: f64,
    pub faulted_accuracy: Option<f64>,
    /// Clean minus faulted accuracy, detector off.
    pub fault_drop: Option<f64>,
    pub masc_faulted_accuracy: Option<f64>,
    /// Faulted accuracy gain from enabling the detector.
    pub masc_gain: Option<f64>,
    /// `masc_gain / fault_drop`, when the drop is positive.
    pub recovered_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MascSummary {
    pub source: String,
    pub delta: f64,
    pub quantile: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub params_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub masc: Option<MascSummary>,
    pub cells: Vec<CellReport>,
    pub deltas: Vec<TopologyDelta>,
    pub wall_time_secs: f64,
    #[serde(skip)]
    pub runs: Vec<RunReport>,
}

impl ExperimentReport {
    pub fn cell(&self, topology: TopologyKind, faulted: bool, masc: bool) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.topology == topology && c.faulted == faulted && c.masc == masc)
    }

    pub fn cells_csv(&self) -> String {
        let mut s = String::from(
            "topology,faulted,masc,n_runs,n_correct,accuracy,flagged_steps,policy_calls,interventions,correction_failures,aborted_runs\n",
        );
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                c.topology.name(),
                c.faulted,
                c.masc,
                c.n_runs,
                c.n_correct,
                c.accuracy,
                c.flagged_steps,
                c.policy_calls,
                c.interventions,
                c.correction_failures,
                c.aborted_runs
            ));
        }
        s
    }

    /// Committed trajectories of the treatment runs (detector attached when
    /// the experiment enables it, otherwise the plain runs), in run order.
    /// Run ids do not encode the detector setting, so a detector that never
    /// fires yields exactly the same dump as no detector.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        let treated = self.config.masc.is_some();
        self.runs.iter().filter(|r| r.masc_enabled == treated).map(RunReport::trajectory).collect()
    }
}

struct OracleCorrector {
    clean: Vec<String>,
}

impl CorrectionPolicy for OracleCorrector {
    fn respond(&self, req: &CorrectionRequest, _prompt: &str) -> Result<String> {
        let t = req.history.len() + 1;
        let reply = match self.clean.get(t - 1) {
            Some(c) if *c != req.flagged_output => serde_json::json!({"correction_needed": "Yes", "final_response": c}),
            _ => serde_json::json!({"correction_needed": "No", "final_response": req.flagged_output}),
        };
        Ok(reply.to_string())
    }
}

/// Clean, detector-free runs of `fixtures` under every configured topology.
pub fn clean_corpus(cfg: &ExperimentConfig, fixtures: &[Fixture]) -> Result<Vec<Trajectory>> {
    let team = cfg.team()?;
    let mut out = Vec::new();
    for &kind in &cfg.topologies {
        let topo = cfg.topology(kind);
        for f in fixtures {
            let id = format!("{}/clean/{}", kind.name(), f.id);
            let r = run_trajectory(&team, &topo, &f.query(), &f.answer.to_string(), None, None, &id, 0)?;
            if let Some(e) = &r.aborted {
                return Err(MascError::Validation(format!("clean run {id} aborted: {e}")));
            }
            out.push(r.trajectory());
        }
    }
    Ok(out)
}

/// Loads or trains the detector and settles its threshold.
fn prepare_detector(cfg: &ExperimentConfig, m: &MascSettings) -> Result<(Checkpoint, MascSummary)> {
    let calib_fixtures = || arithmetic_suite(m.calibration_fixtures, cfg.n_agents * cfg.rounds, cfg.fixture_seed + 2000);
    let (mut ck, source) = match &m.checkpoint {
        Some(path) => (load_checkpoint(path)?, format!("checkpoint {}", path.display())),
        None => {
            let train_fixtures = arithmetic_suite(m.train_fixtures, cfg.n_agents * cfg.rounds, cfg.fixture_seed + 1000);
            let corpus = clean_corpus(cfg, &train_fixtures)?;
            let (model, _) = train(&m.train, &corpus)?;
            let ck = Checkpoint {
                model,
                embedder: m.train.embedder.clone(),
                with_gt: m.train.with_gt,
                lambda: m.train.lambda,
                alpha: m.alpha,
                beta: m.beta,
                calibration: None,
            };
            (ck, "trained on clean runs".to_string())
        }
    };
    let (delta, quantile) = match (m.delta, &ck.calibration) {
        (Some(d), _) => (d, None),
        (None, Some(c)) => (c.delta, Some(c.quantile)),
        (None, None) => {
            let embedder = ck.embedder.build()?;
            let http = HttpOptions::default();
            let calib = clean_corpus(cfg, &calib_fixtures())?
                .iter()
                .map(|t| ck.model.prepare(embedder.as_ref(), t, ck.with_gt, &http))
                .collect::<Result<Vec<_>>>()?;
            let c = calibrate_threshold(&ck.model, &calib, m.quantile, ck.alpha, ck.beta)?;
            let out = (c.delta, Some(c.quantile));
            ck.calibration = Some(c);
            out
        }
    };
    let summary = MascSummary {
        source,
        delta,
        quantile,
        alpha: ck.alpha,
        beta: ck.beta,
        params_digest: ck.model.params_digest(),
    };
    Ok((ck, summary))
}

struct FixtureRuns {
    clean_off: RunReport,
    faulted_off: Option<RunReport>,
    clean_on: Option<RunReport>,
    faulted_on: Option<RunReport>,
}

pub fn batch_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = Instant::now();
    let fixtures = arithmetic_suite(cfg.fixtures, cfg.n_agents * cfg.rounds, cfg.fixture_seed);
    let detector = cfg.masc.as_ref().map(|m| prepare_detector(cfg, m)).transpose()?;
    let embedder = detector.as_ref().map(|(ck, _)| ck.embedder.build()).transpose()?;
    let policy: Option<Box<dyn CorrectionPolicy>> = match cfg.masc.as_ref().map(|m| &m.corrector) {
        Some(CorrectorConfig::Policy { policy }) => Some(policy.build()?),
        _ => None,
    };
    let team = cfg.team()?;

    let mut cells = Vec::new();
    let mut deltas = Vec::new();
    let mut runs = Vec::new();
    for &kind in &cfg.topologies {
        let topo = cfg.topology(kind);
        let run_one = |f: &Fixture| -> Result<FixtureRuns> {
            let key = format!("{}/{}", kind.name(), f.id);
            let seed = run_seed(cfg.base_seed, &key);
            let (q, a) = (f.query(), f.answer.to_string());
            let tag = |fault: &str| format!("{}/{fault}/{}", kind.name(), f.id);
            let clean_off = run_trajectory(&team, &topo, &q, &a, None, None, &tag("clean"), seed)?;
            let faulted_off = cfg
                .fault
                .as_ref()
                .map(|fs| run_trajectory(&team, &topo, &q, &a, Some(fs), None, &tag("faulted"), seed))
                .transpose()?;
            let (mut clean_on, mut faulted_on) = (None, None);
            if let (Some((ck, summary)), Some(emb)) = (&detector, &embedder) {
                let oracle = OracleCorrector { clean: clean_off.steps.iter().map(|s| s.final_output.clone()).collect() };
                let pol: &dyn CorrectionPolicy = match &policy {
                    Some(p) => p.as_ref(),
                    None => &oracle,
                };
                let lp = MascLoop {
                    model: &ck.model,
                    embedder: emb.as_ref(),
                    with_gt: ck.with_gt,
                    alpha: ck.alpha,
                    beta: ck.beta,
                    delta: summary.delta,
                    policy: pol,
                    http: HttpOptions::default(),
                };
                clean_on = Some(run_trajectory(&team, &topo, &q, &a, None, Some(&lp), &tag("clean"), seed)?);
                faulted_on = cfg
                    .fault
                    .as_ref()
                    .map(|fs| run_trajectory(&team, &topo, &q, &a, Some(fs), Some(&lp), &tag("faulted"), seed))
                    .transpose()?;
            }
            Ok(FixtureRuns { clean_off, faulted_off, clean_on, faulted_on })
        };
        let results = par_map(&fixtures, cfg.jobs, run_one)?;

        let mut groups: [Vec<RunReport>; 4] = Default::default();
        for r in results {
            groups[0].push(r.clean_off);
            groups[1].extend(r.faulted_off);
            groups[2].extend(r.clean_on);
            groups[3].extend(r.faulted_on);
        }
        let flags = [(false, false), (true, false), (false, true), (true, true)];
        let mut acc = [None; 4];
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            let c = summarize(kind, flags[i].0, flags[i].1, g);
            acc[i] = Some(c.accuracy);
            cells.push(c);
        }
        let drop = acc[1].map(|f| acc[0].unwrap_or(0.0) - f);
        let gain = acc[3].zip(acc[1]).map(|(on, off)| on - off);
        deltas.push(TopologyDelta {
            topology: kind,
            clean_accuracy: acc[0].unwrap_or(0.0),
            faulted_accuracy: acc[1],
            fault_drop: drop,
            masc_faulted_accuracy: acc[3],
            masc_gain: gain,
            recovered_fraction: gain.zip(drop).and_then(|(g, d)| (d > 0.0).then(|| g / d)),
        });
        runs.extend(groups.into_iter().flatten());
    }
    Ok(ExperimentReport {
        tool_version: crate::VERSION.to_string(),
        config: cfg.clone(),
        masc: detector.map(|(_, s)| s),
        cells,
        deltas,
        wall_time_secs: started.elapsed().as_secs_f64(),
        runs,
    })
}

fn summarize(topology: TopologyKind, faulted: bool, masc: bool, runs: &[RunReport]) -> CellReport {
    let n_correct = runs.iter().filter(|r| r.task_correct).count();
    CellReport {
        topology,
        faulted,
        masc,
        n_runs: runs.len(),
        n_correct,
        accuracy: n_correct as f64 / runs.len() as f64,
        flagged_steps: runs.iter().map(|r| r.flagged).sum(),
        policy_calls: runs.iter().map(|r| r.correction.calls).sum(),
        interventions: runs.iter().map(|r| r.interventions).sum(),
        correction_failures: runs.iter().map(|r| r.correction.failures).sum(),
        aborted_runs: runs.iter().filter(|r| r.aborted.is_some()).count(),
    }
}

/// Order-preserving map over `items` on up to `jobs` scoped threads.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}
