//! Confidence-annotated call graphs: construction from candidate sets and
//! scores, threshold pruning, a canonical text format, evaluation metrics
//! against dynamic traces, and trace-guided threshold calibration.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::frontend::{CandidateMap, ParseError, TraceSet};
use crate::model::Addr;

/// Which resolution layers contributed to a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageProvenance {
    pub l1: bool,
    pub l2a: bool,
    pub l2b: bool,
}

/// A call graph whose indirect edges carry confidence scores in `[0, 1]`.
/// Every analyzed callsite is a key, even when all of its edges have been
/// pruned away — empty sites are part of the metrics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredGraph {
    pub edges: BTreeMap<Addr, BTreeMap<Addr, f64>>,
    pub stages: StageProvenance,
}

/// Failure to assemble a graph from candidates and scores.
#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("score given for 0x{callsite:x} -> 0x{target:x}, which is not a candidate edge")]
    ScoreForNonCandidate { callsite: Addr, target: Addr },
    #[error("score {score} for 0x{callsite:x} -> 0x{target:x} is outside [0, 1]")]
    ScoreOutOfRange {
        callsite: Addr,
        target: Addr,
        score: f64,
    },
}

/// Assemble a graph: one key per callsite in `candidates`, one edge per
/// candidate target, scored from `scores` (unscored candidates get 0).
/// Scores for pairs outside the candidate sets are an error — layers may
/// only reweight the conservative edge set, never extend it.
pub fn build_graph(
    candidates: &CandidateMap,
    scores: &BTreeMap<(Addr, Addr), f64>,
) -> Result<ScoredGraph, GraphError> {
    for (&(cs, t), &s) in scores {
        if !candidates.get(&cs).is_some_and(|set| set.contains(&t)) {
            return Err(GraphError::ScoreForNonCandidate {
                callsite: cs,
                target: t,
            });
        }
        if !(0.0..=1.0).contains(&s) || !s.is_finite() {
            return Err(GraphError::ScoreOutOfRange {
                callsite: cs,
                target: t,
                score: s,
            });
        }
    }
    let mut g = ScoredGraph::default();
    for (&cs, targets) in candidates {
        let mut m = BTreeMap::new();
        for &t in targets {
            m.insert(t, scores.get(&(cs, t)).copied().unwrap_or(0.0));
        }
        g.edges.insert(cs, m);
    }
    Ok(g)
}

/// Keep only edges scoring at least `threshold`. Callsite keys are always
/// retained: a fully pruned callsite still counts as an (empty) prediction.
pub fn prune(g: &ScoredGraph, threshold: f64) -> ScoredGraph {
    ScoredGraph {
        edges: g
            .edges
            .iter()
            .map(|(&cs, targets)| {
                (
                    cs,
                    targets
                        .iter()
                        .filter(|&(_, &s)| s >= threshold)
                        .map(|(&t, &s)| (t, s))
                        .collect(),
                )
            })
            .collect(),
        stages: g.stages,
    }
}

/// Canonical text form: one line per callsite,
/// `0x<callsite>: 0x<target>@<score> ...`, targets ascending, scores with
/// six decimals, every line newline-terminated.
pub fn serialize_graph(g: &ScoredGraph) -> String {
    let mut out = String::new();
    for (cs, targets) in &g.edges {
        let _ = write!(out, "0x{cs:x}:");
        for (t, s) in targets {
            let _ = write!(out, " 0x{t:x}@{s:.6}");
        }
        out.push('\n');
    }
    out
}

/// Parse the canonical text form. Scores must be finite and in `[0, 1]`;
/// duplicate callsites or duplicate targets within a callsite are errors.
pub fn parse_graph(text: &str) -> Result<ScoredGraph, ParseError> {
    let err = |line: usize, message: String| ParseError { line, message };
    let parse_hex = |tok: &str, line: usize, what: &str| -> Result<u64, ParseError> {
        let digits = tok.strip_prefix("0x").unwrap_or(tok);
        u64::from_str_radix(digits, 16)
            .map_err(|_| err(line, format!("malformed {what} {tok}")))
    };
    let mut g = ScoredGraph::default();
    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (cs_part, rest) = line
            .split_once(':')
            .ok_or_else(|| err(lineno, "expected `<hexaddr>: <edges>`".into()))?;
        let cs = parse_hex(cs_part.trim(), lineno, "callsite address")?;
        let mut targets = BTreeMap::new();
        for tok in rest.split_whitespace() {
            let (t_part, s_part) = tok
                .split_once('@')
                .ok_or_else(|| err(lineno, format!("malformed edge {tok}")))?;
            let t = parse_hex(t_part, lineno, "target address")?;
            let s: f64 = s_part
                .parse()
                .map_err(|_| err(lineno, format!("malformed score {s_part}")))?;
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(err(lineno, format!("score {s_part} is outside [0, 1]")));
            }
            if targets.insert(t, s).is_some() {
                return Err(err(lineno, format!("duplicate target 0x{t:x}")));
            }
        }
        if g.edges.insert(cs, targets).is_some() {
            return Err(err(lineno, format!("duplicate callsite 0x{cs:x}")));
        }
    }
    Ok(g)
}

/// Evaluation of a predicted graph against observed (callsite, callee)
/// pairs.
///
/// Per-callsite terms use the degenerate convention: when a term's
/// denominator is zero (no predictions for precision, no observations for
/// recall), the term is 1 if the other side is empty too, else 0. The
/// affected callsite counts appear in the report. Global rates are plain
/// ratios over summed set sizes and are `None` when their denominator is
/// zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Average predicted targets per callsite, empty sites included.
    pub aict: f64,
    /// Per-callsite precision, averaged.
    pub precision: f64,
    /// Per-callsite recall, averaged.
    pub recall: f64,
    /// Harmonic mean of the averaged precision and recall (0 when both
    /// are 0).
    pub f1: f64,
    pub global_precision: Option<f64>,
    pub global_recall: Option<f64>,
    pub global_f1: Option<f64>,
    /// Callsites where predictions and observations are both empty.
    pub degenerate_both_empty: usize,
    /// Callsites where exactly one side is empty.
    pub degenerate_one_empty: usize,
    /// Evaluated callsites (graph keys plus traced callsites).
    pub callsites: usize,
}

impl MetricsReport {
    /// Key-value text rendering, one metric per line.
    pub fn render(&self) -> String {
        let opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "undefined".to_string(),
        };
        let mut out = String::new();
        let _ = writeln!(out, "callsites: {}", self.callsites);
        let _ = writeln!(out, "aict: {:.6}", self.aict);
        let _ = writeln!(out, "precision: {:.6}", self.precision);
        let _ = writeln!(out, "recall: {:.6}", self.recall);
        let _ = writeln!(out, "f1: {:.6}", self.f1);
        let _ = writeln!(out, "global_precision: {}", opt(self.global_precision));
        let _ = writeln!(out, "global_recall: {}", opt(self.global_recall));
        let _ = writeln!(out, "global_f1: {}", opt(self.global_f1));
        let _ = writeln!(
            out,
            "degenerate_both_empty: {}",
            self.degenerate_both_empty
        );
        let _ = writeln!(out, "degenerate_one_empty: {}", self.degenerate_one_empty);
        out
    }
}

/// Compute the metrics of `g` against `truth`. The evaluated callsite set
/// is the union of the graph's keys and the traced callsites; a callsite
/// missing from the graph predicts the empty set.
pub fn compute_metrics(g: &ScoredGraph, truth: &TraceSet) -> MetricsReport {
    let mut true_by_cs: BTreeMap<Addr, BTreeSet<Addr>> = BTreeMap::new();
    for &(cs, t) in truth {
        true_by_cs.entry(cs).or_default().insert(t);
    }
    let mut all_cs: BTreeSet<Addr> = g.edges.keys().copied().collect();
    all_cs.extend(true_by_cs.keys().copied());

    let empty_pred: BTreeMap<Addr, f64> = BTreeMap::new();
    let empty_true: BTreeSet<Addr> = BTreeSet::new();
    let n = all_cs.len();
    let mut sum_pred = 0usize;
    let mut sum_true = 0usize;
    let mut sum_hit = 0usize;
    let mut sum_precision = 0.0;
    let mut sum_recall = 0.0;
    let mut both_empty = 0usize;
    let mut one_empty = 0usize;
    for &cs in &all_cs {
        let pred = g.edges.get(&cs).unwrap_or(&empty_pred);
        let tru = true_by_cs.get(&cs).unwrap_or(&empty_true);
        let hit = pred.keys().filter(|t| tru.contains(t)).count();
        sum_pred += pred.len();
        sum_true += tru.len();
        sum_hit += hit;
        match (pred.is_empty(), tru.is_empty()) {
            (true, true) => {
                sum_precision += 1.0;
                sum_recall += 1.0;
                both_empty += 1;
            }
            (true, false) => {
                // Degenerate precision term, ordinary (zero) recall.
                sum_recall += 0.0;
                one_empty += 1;
            }
            (false, true) => {
                // Ordinary (zero) precision, degenerate recall term.
                sum_precision += 0.0;
                one_empty += 1;
            }
            (false, false) => {
                sum_precision += hit as f64 / pred.len() as f64;
                sum_recall += hit as f64 / tru.len() as f64;
            }
        }
    }
    let (precision, recall, aict) = if n == 0 {
        (1.0, 1.0, 0.0)
    } else {
        (
            sum_precision / n as f64,
            sum_recall / n as f64,
            sum_pred as f64 / n as f64,
        )
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let global_precision = ratio(sum_hit, sum_pred);
    let global_recall = ratio(sum_hit, sum_true);
    let global_f1 = match (global_precision, global_recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    MetricsReport {
        aict,
        precision,
        recall,
        f1,
        global_precision,
        global_recall,
        global_f1,
        degenerate_both_empty: both_empty,
        degenerate_one_empty: one_empty,
        callsites: n,
    }
}

/// What threshold calibration optimizes on the trace sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationObjective {
    /// The largest threshold whose per-callsite recall still reaches
    /// `target`; 0 when no threshold does.
    PreserveRecall { target: f64 },
    /// The threshold with the best per-callsite F1; ties go to the smaller
    /// (more conservative) threshold.
    MaximizeF1,
}

/// Pick a pruning threshold against a seeded sample of the traces.
///
/// A fraction `sample_fraction` of the trace pairs (`ceil`, clamped to all
/// of them) is drawn without replacement; candidate thresholds are 0 plus
/// every distinct edge score, ascending. Metrics are evaluated only over
/// callsites the sample mentions: a callsite whose observations all fell
/// outside the sample says nothing about any threshold, and counting it as
/// a degenerate miss would make every recall target unreachable.
pub fn calibrate_threshold(
    g: &ScoredGraph,
    traces: &TraceSet,
    objective: CalibrationObjective,
    sample_fraction: f64,
    rng_seed: u64,
) -> f64 {
    let all: Vec<(Addr, Addr)> = traces.iter().copied().collect();
    let k = ((sample_fraction * all.len() as f64).ceil() as usize).min(all.len());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let sample: TraceSet = rand::seq::index::sample(&mut rng, all.len(), k)
        .into_iter()
        .map(|i| all[i])
        .collect();

    let sampled_sites: BTreeSet<Addr> = sample.iter().map(|&(cs, _)| cs).collect();
    let eval = ScoredGraph {
        edges: g
            .edges
            .iter()
            .filter(|(cs, _)| sampled_sites.contains(cs))
            .map(|(&cs, targets)| (cs, targets.clone()))
            .collect(),
        stages: g.stages,
    };

    let mut thresholds: Vec<f64> = std::iter::once(0.0)
        .chain(g.edges.values().flat_map(|m| m.values().copied()))
        .collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    match objective {
        CalibrationObjective::PreserveRecall { target } => {
            let mut best = None;
            for &t in &thresholds {
                let m = compute_metrics(&prune(&eval, t), &sample);
                if m.recall >= target {
                    best = Some(t);
                }
            }
            best.unwrap_or(0.0)
        }
        CalibrationObjective::MaximizeF1 => {
            let mut best = (0.0, f64::NEG_INFINITY);
            for &t in &thresholds {
                let m = compute_metrics(&prune(&eval, t), &sample);
                if m.f1 > best.1 {
                    best = (t, m.f1);
                }
            }
            best.0
        }
    }
}
