//! End-to-end resolution pipeline: conservative candidates, learned
//! compatibility scores, backward refinement, and threshold pruning, with a
//! reproducibility manifest describing exactly what ran.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use crate::cfg::{build_dcfg, l1_candidates, CfgError, Dcfg};
use crate::features::{
    encode_pair, extract_callee_features, extract_callsite_features, generate_training_pairs,
    CalleeSignature, TrainingPair,
};
use crate::frontend::{CandidateMap, ParseError, TraceSet};
use crate::graph::{
    build_graph, calibrate_threshold, compute_metrics, prune, CalibrationObjective, GraphError,
    MetricsReport, ScoredGraph, StageProvenance,
};
use crate::model::{Addr, AnalysisConfig, ConfigError, Program, Violation};
use crate::refine::{adjust_scores, refine_program, target_map};
use crate::scorer::{ScorerError, ScorerModel};

/// Preset analysis modes: conservative or aggressive refinement weight,
/// paired with a calibration objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModePreset {
    /// Small refinement delta, recall-preserving threshold.
    ConservativeRecall,
    /// Small refinement delta, F1-maximizing threshold.
    ConservativeF1,
    /// Large refinement delta, recall-preserving threshold.
    AggressiveRecall,
    /// Large refinement delta, F1-maximizing threshold.
    AggressiveF1,
}

impl ModePreset {
    pub fn parse(s: &str) -> Option<ModePreset> {
        match s {
            "c-r" => Some(ModePreset::ConservativeRecall),
            "c-f" => Some(ModePreset::ConservativeF1),
            "a-r" => Some(ModePreset::AggressiveRecall),
            "a-f" => Some(ModePreset::AggressiveF1),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModePreset::ConservativeRecall => "c-r",
            ModePreset::ConservativeF1 => "c-f",
            ModePreset::AggressiveRecall => "a-r",
            ModePreset::AggressiveF1 => "a-f",
        }
    }

    /// Refinement score adjustment used by this mode.
    pub fn delta(self) -> f64 {
        match self {
            ModePreset::ConservativeRecall | ModePreset::ConservativeF1 => 0.1,
            ModePreset::AggressiveRecall | ModePreset::AggressiveF1 => 0.5,
        }
    }

    pub fn objective_kind(self) -> ObjectiveKind {
        match self {
            ModePreset::ConservativeRecall | ModePreset::AggressiveRecall => ObjectiveKind::Recall,
            ModePreset::ConservativeF1 | ModePreset::AggressiveF1 => ObjectiveKind::F1,
        }
    }
}

/// Calibration objective family, without its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Recall,
    F1,
}

impl ObjectiveKind {
    pub fn parse(s: &str) -> Option<ObjectiveKind> {
        match s {
            "recall" => Some(ObjectiveKind::Recall),
            "f1" => Some(ObjectiveKind::F1),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Recall => "recall",
            ObjectiveKind::F1 => "f1",
        }
    }

    pub fn to_objective(self, target_recall: f64) -> CalibrationObjective {
        match self {
            ObjectiveKind::Recall => CalibrationObjective::PreserveRecall {
                target: target_recall,
            },
            ObjectiveKind::F1 => CalibrationObjective::MaximizeF1,
        }
    }
}

/// Where the pruning threshold came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdSource {
    Explicit,
    Calibrated,
    Config,
}

impl ThresholdSource {
    pub fn name(self) -> &'static str {
        match self {
            ThresholdSource::Explicit => "explicit",
            ThresholdSource::Calibrated => "calibrated",
            ThresholdSource::Config => "config",
        }
    }
}

/// Everything a pipeline run needs beyond the program, model, and traces.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub config: AnalysisConfig,
    /// When set and traces are available, calibrate the threshold with this
    /// objective; otherwise the config threshold applies.
    pub objective: Option<ObjectiveKind>,
    /// Recall floor for the recall-preserving objective.
    pub target_recall: f64,
    /// Overrides both calibration and the config threshold.
    pub explicit_threshold: Option<f64>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            config: AnalysisConfig::default(),
            objective: None,
            target_recall: 1.0,
            explicit_threshold: None,
        }
    }
}

/// The artifacts of one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Conservative candidate sets (first layer).
    pub candidates: CandidateMap,
    /// Scored graph before pruning.
    pub full_graph: ScoredGraph,
    /// Final pruned graph.
    pub graph: ScoredGraph,
    /// Evaluation against the full trace set, when traces were given.
    pub metrics: Option<MetricsReport>,
    pub threshold_used: f64,
    pub threshold_source: ThresholdSource,
    /// Callsites whose refinement budget ran out, ascending.
    pub timed_out: Vec<Addr>,
    pub wall_ms: u128,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("program failed validation with {} violation(s)", .0.len())]
    InvalidProgram(Vec<Violation>),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cfg(#[from] CfgError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ScorerError),
}

/// Run the full pipeline. Without a model, every candidate edge starts at
/// score zero and refinement alone separates the edges; without traces, no
/// calibration or metrics happen.
pub fn run_pipeline(
    p: &Program,
    model: Option<&ScorerModel>,
    traces: Option<&TraceSet>,
    opts: &PipelineOptions,
) -> Result<PipelineOutput, PipelineError> {
    let started = Instant::now();
    let cfg = &opts.config;
    cfg.validate()?;
    if let Some(t) = opts.explicit_threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(ConfigError::ThresholdOutOfRange(t).into());
        }
    }
    let violations = p.validate();
    if !violations.is_empty() {
        return Err(PipelineError::InvalidProgram(violations));
    }
    let d = build_dcfg(p)?;
    let candidates = l1_candidates(p, &d);

    // Layer two (a): learned compatibility scores, zero without a model.
    let mut scores: BTreeMap<(Addr, Addr), f64> = candidates
        .iter()
        .flat_map(|(&cs, ts)| ts.iter().map(move |&t| ((cs, t), 0.0)))
        .collect();
    if let Some(model) = model {
        let mut callee_cache: BTreeMap<Addr, Option<CalleeSignature>> = BTreeMap::new();
        let mut keys = Vec::new();
        let mut rows = Vec::new();
        for (&cs, targets) in &candidates {
            let Some(cs_sig) = extract_callsite_features(p, &d, cs) else {
                continue;
            };
            for &t in targets {
                let sig = callee_cache
                    .entry(t)
                    .or_insert_with(|| extract_callee_features(p, &d, t, cfg.tau_arg, cfg.tau_ret));
                if let Some(callee_sig) = sig {
                    keys.push((cs, t));
                    rows.push(encode_pair(&cs_sig, callee_sig));
                }
            }
        }
        for (key, score) in keys.into_iter().zip(model.score_many(&rows)?) {
            scores.insert(key, score);
        }
    }

    // Layer two (b): backward refinement nudges the scores.
    let refined = refine_program(p, &d, cfg);
    let timed_out: Vec<Addr> = refined
        .iter()
        .filter(|(_, r)| r.timed_out)
        .map(|(&cs, _)| cs)
        .collect();
    adjust_scores(&mut scores, &target_map(&refined), cfg.delta);

    let mut full_graph = build_graph(&candidates, &scores)?;
    full_graph.stages = StageProvenance {
        l1: true,
        l2a: model.is_some(),
        l2b: true,
    };

    let (threshold_used, threshold_source) = match (opts.explicit_threshold, opts.objective, traces)
    {
        (Some(t), _, _) => (t, ThresholdSource::Explicit),
        (None, Some(kind), Some(tr)) => (
            calibrate_threshold(
                &full_graph,
                tr,
                kind.to_objective(opts.target_recall),
                cfg.trace_sample_fraction,
                cfg.rng_seed,
            ),
            ThresholdSource::Calibrated,
        ),
        _ => (cfg.prune_threshold, ThresholdSource::Config),
    };
    let graph = prune(&full_graph, threshold_used);
    let metrics = traces.map(|tr| compute_metrics(&graph, tr));
    Ok(PipelineOutput {
        candidates,
        full_graph,
        graph,
        metrics,
        threshold_used,
        threshold_source,
        timed_out,
        wall_ms: started.elapsed().as_millis(),
    })
}

/// Concatenate labeled direct-call pairs from several programs; each
/// program draws its negatives from its own seeded stream.
pub fn build_training_set(
    programs: &[(Program, Dcfg)],
    tau_arg: f64,
    tau_ret: f64,
    negatives_per_positive: f64,
    rng_seed: u64,
) -> Vec<TrainingPair> {
    programs
        .iter()
        .enumerate()
        .flat_map(|(i, (p, d))| {
            generate_training_pairs(
                p,
                d,
                tau_arg,
                tau_ret,
                negatives_per_positive,
                rng_seed.wrapping_add(i as u64),
            )
        })
        .collect()
}

/// Inputs echoed into a manifest alongside the run's results.
#[derive(Debug, Clone)]
pub struct ManifestInfo<'a> {
    pub program_path: &'a str,
    pub traces_path: Option<&'a str>,
    pub model_path: Option<&'a str>,
    pub mode: Option<ModePreset>,
    pub opts: &'a PipelineOptions,
    pub output: &'a PipelineOutput,
}

/// Render the `key=value` manifest. Every field except `result.wall_ms` is
/// deterministic for a deterministic configuration, so two identical runs
/// differ at most in that one line.
pub fn render_manifest(info: &ManifestInfo) -> String {
    let cfg = &info.opts.config;
    let out = info.output;
    let mut s = String::new();
    let opt = |v: Option<&str>| v.unwrap_or("-").to_string();
    let _ = writeln!(s, "tool_version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "program={}", info.program_path);
    let _ = writeln!(s, "traces={}", opt(info.traces_path));
    let _ = writeln!(s, "model={}", opt(info.model_path));
    let _ = writeln!(s, "mode={}", opt(info.mode.map(ModePreset::name)));
    let _ = writeln!(
        s,
        "objective={}",
        opt(info.opts.objective.map(ObjectiveKind::name))
    );
    let _ = writeln!(s, "target_recall={}", info.opts.target_recall);
    let _ = writeln!(s, "height={}", cfg.height);
    let _ = writeln!(s, "sweep_depth={}", cfg.sweep_depth);
    let _ = writeln!(s, "xref_depth={}", cfg.xref_depth);
    let _ = writeln!(s, "timeout_secs={}", cfg.timeout_secs);
    let _ = writeln!(s, "delta={}", cfg.delta);
    let _ = writeln!(s, "tau_arg={}", cfg.tau_arg);
    let _ = writeln!(s, "tau_ret={}", cfg.tau_ret);
    let _ = writeln!(s, "prune_threshold={}", cfg.prune_threshold);
    let _ = writeln!(s, "trace_sample_fraction={}", cfg.trace_sample_fraction);
    let _ = writeln!(s, "rng_seed={}", cfg.rng_seed);
    let _ = writeln!(s, "deterministic_timeout={}", cfg.deterministic_timeout);
    let _ = writeln!(s, "threshold_source={}", out.threshold_source.name());
    let _ = writeln!(s, "result.threshold_used={}", out.threshold_used);
    let timed: String = if out.timed_out.is_empty() {
        "-".to_string()
    } else {
        out.timed_out
            .iter()
            .map(|a| format!("0x{a:x}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    let _ = writeln!(s, "result.timed_out={timed}");
    let mut stages = Vec::new();
    if out.graph.stages.l1 {
        stages.push("l1");
    }
    if out.graph.stages.l2a {
        stages.push("l2a");
    }
    if out.graph.stages.l2b {
        stages.push("l2b");
    }
    let _ = writeln!(s, "result.stages={}", stages.join(","));
    let _ = writeln!(s, "result.wall_ms={}", out.wall_ms);
    s
}

/// Settings recovered from a manifest (or a hand-written file in the same
/// format). Absent keys keep their defaults; `result.*` and the
/// informational echo keys are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestSettings {
    pub config: AnalysisConfig,
    pub mode: Option<ModePreset>,
    pub objective: Option<ObjectiveKind>,
    pub target_recall: Option<f64>,
}

/// Parse the `key=value` manifest format. Unknown keys are errors so that
/// a typo in a config file cannot silently fall back to a default.
pub fn parse_manifest(text: &str) -> Result<ManifestSettings, ParseError> {
    let mut settings = ManifestSettings {
        config: AnalysisConfig::default(),
        mode: None,
        objective: None,
        target_recall: None,
    };
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ParseError {
            line: lineno,
            message: "expected `key=value`".into(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let err = |message: String| ParseError {
            line: lineno,
            message,
        };
        macro_rules! parse_as {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| err(format!("malformed value for {key}: {value}")))?
            };
        }
        let cfg = &mut settings.config;
        match key {
            "height" => cfg.height = parse_as!(u32),
            "sweep_depth" => cfg.sweep_depth = parse_as!(u32),
            "xref_depth" => cfg.xref_depth = parse_as!(u32),
            "timeout_secs" => cfg.timeout_secs = parse_as!(f64),
            "delta" => cfg.delta = parse_as!(f64),
            "tau_arg" => cfg.tau_arg = parse_as!(f64),
            "tau_ret" => cfg.tau_ret = parse_as!(f64),
            "prune_threshold" => cfg.prune_threshold = parse_as!(f64),
            "trace_sample_fraction" => cfg.trace_sample_fraction = parse_as!(f64),
            "rng_seed" => cfg.rng_seed = parse_as!(u64),
            "deterministic_timeout" => cfg.deterministic_timeout = parse_as!(bool),
            "mode" => {
                settings.mode = match value {
                    "-" => None,
                    v => Some(
                        ModePreset::parse(v).ok_or_else(|| err(format!("unknown mode {v}")))?,
                    ),
                }
            }
            "objective" => {
                settings.objective = match value {
                    "-" => None,
                    v => Some(
                        ObjectiveKind::parse(v)
                            .ok_or_else(|| err(format!("unknown objective {v}")))?,
                    ),
                }
            }
            "target_recall" => settings.target_recall = Some(parse_as!(f64)),
            // Informational echo; accepted so an emitted manifest is a
            // valid config file, but never interpreted.
            "tool_version" | "program" | "traces" | "model" | "threshold_source" => {}
            k if k.starts_with("result.") => {}
            other => {
                return Err(err(format!("unknown key {other}")));
            }
        }
    }
    Ok(settings)
}
