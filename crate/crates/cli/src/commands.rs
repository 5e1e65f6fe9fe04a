use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use masc::detector::{BackboneKind, BackboneSpec, PrototypeInit};
use masc::embedding::{EmbedderKind, EmbedderSpec, HashingEmbedder};
use masc::evaluation::{augmented_distance_diagnostics, embedding_distance_diagnostics, evaluate, histogram_csv};
use masc::http::HttpOptions;
use masc::pipeline::{join_labels, read_scores_csv, resolve_weights, score_corpus, score_rows, write_scores_csv, ScoreOverrides};
use masc::simulator::{Corruption, ExperimentConfig, FaultSpec, MascSettings, TopologyKind};
use masc::trace::{error_position_histogram, read_trajectories, write_trajectories, ParseMode, Trajectory};
use masc::training::{
    calibrate_threshold, load_checkpoint, normalized_weights, save_checkpoint, train as train_model, Checkpoint, Profile,
    TrainConfig,
};
use serde_json::{json, Value};

use crate::config::layered;
use crate::{
    CalibrateArgs, CliError, CorruptionArg, DiagArgs, EvalArgs, IngestArgs, ModelArgs, ProfileArg, PrototypeInitArg,
    ScoreArgs, SimulateArgs, Switch, TopologyArg, TrainArgs,
};

type CmdResult = Result<(), CliError>;

const CACHE_ENV: &str = "MASC_CACHE_DIR";

fn read_traces(path: &Path, mode: ParseMode) -> Result<Vec<Trajectory>, CliError> {
    let f = File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let ts = read_trajectories(BufReader::new(f), mode).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if ts.is_empty() {
        return Err(CliError::data(format!("{}: no trajectories", path.display())));
    }
    Ok(ts)
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> CmdResult {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| CliError::data(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(bytes).map_err(|e| CliError::data(e.to_string())),
    }
}

fn write_json(path: Option<&Path>, v: &Value) -> CmdResult {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::data(e.to_string()))?;
    s.push('\n');
    write_out(path, s.as_bytes())
}

fn path_str(p: &Option<PathBuf>) -> Value {
    p.as_ref().map_or(Value::Null, |p| json!(p.display().to_string()))
}

fn profile(p: ProfileArg) -> Profile {
    match p {
        ProfileArg::Hc => Profile::Hc,
        ProfileArg::Auto => Profile::Auto,
    }
}

/// Points a remote embedder's cache into `MASC_CACHE_DIR` when it is set.
fn apply_cache_env(spec: &mut EmbedderSpec) {
    if spec.kind != EmbedderKind::Remote {
        return;
    }
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        let model = spec.model_name.clone().unwrap_or_default().replace(['/', '\\', ':'], "_");
        let file = format!("embeddings-{model}-{}.bin", spec.dimension);
        spec.cache_path = Some(Path::new(&dir).join(file).display().to_string());
    }
}

fn apply_model_args(cfg: &mut TrainConfig, m: &ModelArgs) {
    if let Some(d) = m.d_e {
        cfg.embedder.dimension = d;
    }
    if let Some(d) = m.d_h {
        cfg.d_h = d;
    }
    if let Some(h) = m.hidden {
        cfg.backbone.hidden_dim = h;
    }
    if let Some(l) = m.layers {
        cfg.backbone.layers = l;
    }
    if let Some(s) = m.backbone_seed {
        cfg.backbone.seed = s;
    }
    if let (Some(ep), Some(model)) = (&m.embed_endpoint, &m.embed_model) {
        cfg.embedder = EmbedderSpec::remote(ep, model, cfg.embedder.dimension);
    }
    if let (Some(ep), Some(model)) = (&m.backbone_endpoint, &m.backbone_model) {
        cfg.backbone = BackboneSpec::remote_llm(ep, model, cfg.backbone.hidden_dim);
    } else if cfg.backbone.kind == BackboneKind::RemoteLlm && m.backbone_model.is_some() {
        cfg.backbone.model_name = m.backbone_model.clone();
    }
    apply_cache_env(&mut cfg.embedder);
}

fn load_ck(path: &Path) -> Result<Checkpoint, CliError> {
    let mut ck = load_checkpoint(path).map_err(|e| match e {
        masc::MascError::Io(io) => CliError::config(format!("{}: {io}", path.display())),
        other => CliError::from(other),
    })?;
    apply_cache_env(&mut ck.embedder);
    Ok(ck)
}

pub fn ingest(a: IngestArgs) -> CmdResult {
    let mode = if a.strict { ParseMode::Strict } else { ParseMode::Lenient };
    let ts = read_traces(&a.traces, mode)?;
    let steps: usize = ts.iter().map(Trajectory::len).sum();
    let labeled = ts.iter().filter(|t| t.is_labeled()).count();
    let errors: usize = ts.iter().map(|t| t.error_steps().len()).sum();
    if let Some(out) = &a.out {
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &ts)?;
        write_out(Some(out), &buf)?;
    }
    write_json(
        a.report.as_deref(),
        &json!({
            "tool_version": masc::VERSION,
            "config": {"traces": a.traces.display().to_string(), "strict": a.strict, "out": path_str(&a.out)},
            "n_trajectories": ts.len(),
            "n_steps": steps,
            "labeled_trajectories": labeled,
            "error_steps": errors,
            "max_steps": ts.iter().map(Trajectory::len).max(),
        }),
    )
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = layered(&TrainConfig::profile(profile(a.profile)), a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.with_gt |= a.with_gt;
    cfg.exclude_labeled_steps |= a.exclude_labeled_steps;
    if let Some(p) = a.prototype_init {
        cfg.prototype_init = match p {
            PrototypeInitArg::Gaussian => PrototypeInit::Gaussian,
            PrototypeInitArg::EmbeddingMean => PrototypeInit::EmbeddingMean,
        };
    }
    apply_model_args(&mut cfg, &a.model);
    cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
    if !(a.alpha >= 0.0 && a.beta >= 0.0) {
        return Err(CliError::config("alpha and beta must be non-negative"));
    }
    let traces = read_traces(&a.traces, ParseMode::Lenient)?;
    let (model, report) = train_model(&cfg, &traces)?;
    let ck = Checkpoint {
        model,
        embedder: cfg.embedder.clone(),
        with_gt: cfg.with_gt,
        lambda: cfg.lambda,
        alpha: a.alpha,
        beta: a.beta,
        calibration: None,
    };
    let sha = save_checkpoint(&ck, &a.out)?;
    write_json(
        a.report.as_deref(),
        &json!({
            "tool_version": masc::VERSION,
            "config": cfg,
            "alpha": a.alpha,
            "beta": a.beta,
            "traces": a.traces.display().to_string(),
            "checkpoint": a.out.display().to_string(),
            "checkpoint_sha256": sha,
            "report": report,
        }),
    )
}

pub fn calibrate(a: CalibrateArgs) -> CmdResult {
    let mut ck = load_ck(&a.checkpoint)?;
    let traces = read_traces(&a.traces, ParseMode::Lenient)?;
    let embedder = ck.embedder.build()?;
    let http = HttpOptions::default();
    let embs = traces
        .iter()
        .map(|t| ck.model.prepare(embedder.as_ref(), t, ck.with_gt, &http))
        .collect::<masc::Result<Vec<_>>>()?;
    let (alpha, beta) = if a.normalize {
        normalized_weights(&ck.model, &embs)?
    } else {
        (a.alpha.unwrap_or(ck.alpha), a.beta.unwrap_or(ck.beta))
    };
    let cal = calibrate_threshold(&ck.model, &embs, a.quantile, alpha, beta)?;
    ck.alpha = alpha;
    ck.beta = beta;
    ck.calibration = Some(cal.clone());
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.clone());
    let sha = save_checkpoint(&ck, &out)?;
    write_json(
        a.report.as_deref(),
        &json!({
            "tool_version": masc::VERSION,
            "config": {
                "checkpoint": a.checkpoint.display().to_string(),
                "traces": a.traces.display().to_string(),
                "quantile": a.quantile,
                "normalize": a.normalize,
            },
            "calibration": cal,
            "checkpoint": out.display().to_string(),
            "checkpoint_sha256": sha,
        }),
    )
}

pub fn score(a: ScoreArgs) -> CmdResult {
    let ck = load_ck(&a.checkpoint)?;
    if let Some(d) = a.d_e {
        if d != ck.model.d_e() {
            return Err(CliError::config(format!("--d-e {d} does not match checkpoint d_e {}", ck.model.d_e())));
        }
    }
    let traces = read_traces(&a.traces, ParseMode::Lenient)?;
    let overrides = ScoreOverrides { alpha: a.alpha, beta: a.beta, delta: a.delta };
    let verdicts = score_corpus(&ck, &traces, overrides, &HttpOptions::default())?;
    write_out(a.out.as_deref(), &write_scores_csv(&score_rows(&verdicts))?)
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let traces = read_traces(&a.traces, ParseMode::Lenient)?;
    if !traces.iter().any(Trajectory::is_labeled) {
        return Err(CliError::data(format!("{}: no labeled trajectories", a.traces.display())));
    }
    let (rows, delta) = match (&a.scores, &a.checkpoint) {
        (Some(p), _) => {
            let bytes = fs::read(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            (read_scores_csv(&bytes)?, a.delta)
        }
        (None, Some(c)) => {
            let ck = load_ck(c)?;
            let labeled: Vec<Trajectory> = traces.iter().filter(|t| t.is_labeled()).cloned().collect();
            let overrides = ScoreOverrides { delta: a.delta, ..Default::default() };
            let delta = Some(resolve_weights(&ck, overrides).2).filter(|d| d.is_finite());
            (score_rows(&score_corpus(&ck, &labeled, overrides, &HttpOptions::default())?), delta)
        }
        (None, None) => return Err(CliError::config("one of --scores or --checkpoint is required")),
    };
    if rows.is_empty() {
        return Err(CliError::data("no scored steps"));
    }
    let scored = join_labels(&rows, &traces)?;
    let metrics = evaluate(&scored, delta, a.bins)?;
    if let Some(h) = &a.hist {
        write_out(Some(h), histogram_csv(&metrics.histogram).as_bytes())?;
    }
    write_json(
        a.out.as_deref(),
        &json!({
            "tool_version": masc::VERSION,
            "config": {
                "traces": a.traces.display().to_string(),
                "scores": path_str(&a.scores),
                "checkpoint": path_str(&a.checkpoint),
                "delta": delta,
                "bins": a.bins,
            },
            "metrics": metrics,
        }),
    )
}

pub fn diag(a: DiagArgs) -> CmdResult {
    let traces = read_traces(&a.traces, ParseMode::Lenient)?;
    let embedder = HashingEmbedder::new(a.d_e)?;
    let raw = embedding_distance_diagnostics(&traces, &embedder)?;
    let aug = augmented_distance_diagnostics(&traces, &embedder)?;
    let hist = error_position_histogram(&traces, a.bins)?;
    write_json(
        a.out.as_deref(),
        &json!({
            "tool_version": masc::VERSION,
            "config": {"traces": a.traces.display().to_string(), "d_e": a.d_e, "bins": a.bins},
            "distances": raw,
            "augmented_distances": aug,
            "error_position_histogram": hist,
        }),
    )
}

pub fn simulate(a: SimulateArgs) -> CmdResult {
    let mut cfg = layered(&ExperimentConfig::default(), a.config.as_deref())?;
    if !a.topology.is_empty() {
        cfg.topologies = a
            .topology
            .iter()
            .map(|t| match t {
                TopologyArg::Chain => TopologyKind::Chain,
                TopologyArg::Complete => TopologyKind::Complete,
                TopologyArg::Random => TopologyKind::Random,
            })
            .collect();
    }
    match a.fault {
        Some(Switch::Off) => cfg.fault = None,
        Some(Switch::On) => {
            cfg.fault.get_or_insert_with(FaultSpec::default);
        }
        None => {}
    }
    if let (Some(c), Some(f)) = (a.corruption, cfg.fault.as_mut()) {
        f.corruption = match c {
            CorruptionArg::MisleadingTemplate => Corruption::MisleadingTemplate,
            CorruptionArg::Scramble => Corruption::Scramble,
        };
    }
    match a.masc {
        Some(Switch::Off) => cfg.masc = None,
        Some(Switch::On) => {
            cfg.masc.get_or_insert_with(|| MascSettings {
                train: TrainConfig::profile(profile(a.profile)),
                ..Default::default()
            });
        }
        None => {}
    }
    match cfg.masc.as_mut() {
        Some(m) => {
            if a.checkpoint.is_some() {
                m.checkpoint = a.checkpoint.clone();
            }
            if a.delta.is_some() {
                m.delta = a.delta;
            }
            if let Some(q) = a.quantile {
                m.quantile = q;
            }
        }
        None if a.checkpoint.is_some() || a.delta.is_some() || a.quantile.is_some() => {
            return Err(CliError::config("--checkpoint, --delta and --quantile need --masc on"));
        }
        None => {}
    }
    if let Some(v) = a.fixtures {
        cfg.fixtures = v;
    }
    if let Some(v) = a.agents {
        cfg.n_agents = v;
    }
    if let Some(v) = a.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = a.seed {
        cfg.base_seed = v;
    }
    if let Some(v) = a.edge_seed {
        cfg.edge_seed = v;
    }
    if let Some(v) = a.jobs {
        cfg.jobs = v;
    }
    cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
    let report = masc::simulator::batch_experiment(&cfg)?;
    if let Some(p) = &a.csv {
        write_out(Some(p), report.cells_csv().as_bytes())?;
    }
    if let Some(p) = &a.dump {
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &report.trajectories())?;
        write_out(Some(p), &buf)?;
    }
    let v = serde_json::to_value(&report).map_err(|e| CliError::data(e.to_string()))?;
    write_json(a.out.as_deref(), &v)
}
