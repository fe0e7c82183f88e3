//! End-to-end acceptance checks, one per core guarantee, each printing a
//! PASS line (visible with `--nocapture`). Every oracle here is coded
//! directly from the metric and traversal definitions and shares nothing
//! with the library's implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use icfg_core::cfg::{build_dcfg, l1_candidates};
use icfg_core::features::{
    extract_callee_features, extract_callsite_features, TypeHint,
};
use icfg_core::frontend::{parse_program, parse_trace_set, CandidateMap, TraceSet};
use icfg_core::graph::{compute_metrics, prune, ScoredGraph, StageProvenance};
use icfg_core::model::{Addr, AnalysisConfig, Program};
use icfg_core::pipeline::{build_training_set, run_pipeline, PipelineOptions};
use icfg_core::refine::{
    adjust_scores, extract_backward_paths, recursive_memory_sweep, refine_program,
    resolve_callsite_targets,
};
use icfg_core::scorer::{ScorerModel, TrainConfig};

fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!(
        "{}/tests/fixtures/{name}",
        env!("CARGO_MANIFEST_DIR")
    ))
    .unwrap()
}

fn program(name: &str) -> Program {
    parse_program(&fixture(name)).unwrap()
}

#[test]
fn a01_heuristic_scores_match_the_worked_example_exactly() {
    let started = Instant::now();
    let p = program("const_dispatch.masm");
    let d = build_dcfg(&p).unwrap();
    let sig = extract_callee_features(&p, &d, 0x8049196, 6.0, 2.0).unwrap();
    assert_eq!(sig.args.len(), 2, "two accepted parameters");
    assert_eq!(sig.args[0].score, 7.5);
    assert_eq!(sig.args[1].score, 7.5);
    assert_eq!(sig.ret_score, 2.5);
    assert!(sig.ret_present);
    assert!(started.elapsed().as_secs_f64() < 1.0);
    println!("PASS a01: argument heuristics score 7.5/7.5 and the return heuristic 2.5, exactly");
}

#[test]
fn a02_callsite_descriptors_match_the_worked_example() {
    let started = Instant::now();
    let p = program("const_dispatch.masm");
    let d = build_dcfg(&p).unwrap();
    let sig = extract_callsite_features(&p, &d, 0x8049213).unwrap();
    assert_eq!(sig.args.len(), 2, "two arguments recovered");
    // First argument (pushed last): a range-checked integer.
    assert_eq!(sig.args[0].type_hint, TypeHint::Int);
    assert!(!sig.args[0].pointer_likeness);
    assert!(sig.args[0].validated);
    // Second argument: a character buffer passed by address, unchecked.
    assert_eq!(sig.args[1].type_hint, TypeHint::CharPtr);
    assert!(sig.args[1].pointer_likeness);
    assert!(!sig.args[1].validated);
    assert!(sig.ret_used);
    assert!(started.elapsed().as_secs_f64() < 1.0);
    println!("PASS a02: callsite descriptors are int/validated + char-ptr/unvalidated with the return consumed");
}

/// Independently computed evaluation summary; accumulation runs in
/// ascending callsite order with one final division, so equality with the
/// library is exact, not approximate.
struct OracleMetrics {
    aict: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    global_precision: Option<f64>,
    global_recall: Option<f64>,
    global_f1: Option<f64>,
    both_empty: usize,
    one_empty: usize,
    n: usize,
}

fn oracle_metrics(edges: &BTreeMap<Addr, BTreeMap<Addr, f64>>, truth: &TraceSet) -> OracleMetrics {
    let mut truth_by_cs: BTreeMap<Addr, BTreeSet<Addr>> = BTreeMap::new();
    for &(cs, t) in truth {
        truth_by_cs.entry(cs).or_default().insert(t);
    }
    let mut sites: BTreeSet<Addr> = edges.keys().copied().collect();
    sites.extend(truth_by_cs.keys().copied());

    let n = sites.len();
    let (mut p_sum, mut r_sum) = (0.0f64, 0.0f64);
    let (mut pred_total, mut true_total, mut hit_total) = (0usize, 0usize, 0usize);
    let (mut both_empty, mut one_empty) = (0usize, 0usize);
    for &cs in &sites {
        let pred: BTreeSet<Addr> = edges
            .get(&cs)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default();
        let tru = truth_by_cs.get(&cs).cloned().unwrap_or_default();
        let hit = pred.intersection(&tru).count();
        pred_total += pred.len();
        true_total += tru.len();
        hit_total += hit;
        match (pred.is_empty(), tru.is_empty()) {
            (true, true) => {
                p_sum += 1.0;
                r_sum += 1.0;
                both_empty += 1;
            }
            (true, false) | (false, true) => one_empty += 1,
            (false, false) => {
                p_sum += hit as f64 / pred.len() as f64;
                r_sum += hit as f64 / tru.len() as f64;
            }
        }
    }
    let (precision, recall, aict) = if n == 0 {
        (1.0, 1.0, 0.0)
    } else {
        (p_sum / n as f64, r_sum / n as f64, pred_total as f64 / n as f64)
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let global_precision = rate(hit_total, pred_total);
    let global_recall = rate(hit_total, true_total);
    let global_f1 = match (global_precision, global_recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    OracleMetrics {
        aict,
        precision,
        recall,
        f1,
        global_precision,
        global_recall,
        global_f1,
        both_empty,
        one_empty,
        n,
    }
}

#[test]
fn a03_metric_formulas_match_an_independent_oracle_on_random_instances() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    for _ in 0..100 {
        let n_cs = rng.gen_range(0..=20usize);
        let mut edges: BTreeMap<Addr, BTreeMap<Addr, f64>> = BTreeMap::new();
        for i in 0..n_cs {
            let cs = 0x1000 + 0x10 * i as u64;
            let mut targets = BTreeMap::new();
            for _ in 0..rng.gen_range(0..=10usize) {
                targets.insert(0x100000 + 0x8 * rng.gen_range(0..40u64), rng.gen::<f64>());
            }
            edges.insert(cs, targets);
        }
        let mut truth = TraceSet::new();
        for (&cs, targets) in &edges {
            if rng.gen_bool(0.3) {
                continue;
            }
            for _ in 0..rng.gen_range(0..=5usize) {
                let known: Vec<Addr> = targets.keys().copied().collect();
                let t = if !known.is_empty() && rng.gen_bool(0.6) {
                    known[rng.gen_range(0..known.len())]
                } else {
                    0x100000 + 0x8 * rng.gen_range(0..40u64)
                };
                truth.insert((cs, t));
            }
        }
        // Traced callsites the graph never saw.
        for _ in 0..rng.gen_range(0..=3usize) {
            truth.insert((
                0x9000 + 0x10 * rng.gen_range(0..10u64),
                0x100000 + 0x8 * rng.gen_range(0..40u64),
            ));
        }

        let g = ScoredGraph {
            edges: edges.clone(),
            stages: StageProvenance::default(),
        };
        let m = compute_metrics(&g, &truth);
        let o = oracle_metrics(&edges, &truth);
        assert_eq!(m.aict, o.aict);
        assert_eq!(m.precision, o.precision);
        assert_eq!(m.recall, o.recall);
        assert_eq!(m.f1, o.f1);
        assert_eq!(m.global_precision, o.global_precision);
        assert_eq!(m.global_recall, o.global_recall);
        assert_eq!(m.global_f1, o.global_f1);
        assert_eq!(m.degenerate_both_empty, o.both_empty);
        assert_eq!(m.degenerate_one_empty, o.one_empty);
        assert_eq!(m.callsites, o.n);
    }
    assert!(started.elapsed().as_secs_f64() < 5.0);
    println!("PASS a03: evaluation formulas equal the independent oracle on 100 random instances, exactly");
}

/// One generated intra-procedural flow graph: block start addresses plus
/// each block's successor list, kept separately from the program text so
/// the oracle never consults the library's graph construction.
struct FlowSpec {
    blocks: Vec<Addr>,
    succs: BTreeMap<Addr, Vec<Addr>>,
    text: String,
}

fn random_flow(rng: &mut ChaCha8Rng) -> FlowSpec {
    let n = rng.gen_range(1..=10usize);
    let blocks: Vec<Addr> = (0..n).map(|i| 0x1000 + 0x100 * i as u64).collect();
    let mut succs: BTreeMap<Addr, Vec<Addr>> = BTreeMap::new();
    let mut text = String::from(".func f 0x1000\n");
    for (i, &b) in blocks.iter().enumerate() {
        if i > 0 {
            text.push_str(&format!(".block 0x{b:x}\n"));
        }
        text.push_str(&format!("0x{b:x}: mov $0x1, r0\n"));
        let term = b + 4;
        let last = i == n - 1;
        match if last {
            rng.gen_range(0..2)
        } else {
            rng.gen_range(0..3)
        } {
            0 => {
                text.push_str(&format!("0x{term:x}: ret\n"));
                succs.insert(b, vec![]);
            }
            1 => {
                let t = blocks[rng.gen_range(0..n)];
                text.push_str(&format!("0x{term:x}: jmp $0x{t:x}\n"));
                succs.insert(b, vec![t]);
            }
            _ => {
                let t = blocks[rng.gen_range(0..n)];
                text.push_str(&format!("0x{term:x}: je $0x{t:x}\n"));
                succs.insert(b, vec![t, blocks[i + 1]]);
            }
        }
    }
    FlowSpec {
        blocks,
        succs,
        text,
    }
}

fn oracle_backward_paths(
    preds: &BTreeMap<Addr, BTreeSet<Addr>>,
    seed: Addr,
    height: usize,
) -> Vec<Vec<Addr>> {
    fn rec(
        preds: &BTreeMap<Addr, BTreeSet<Addr>>,
        path: &mut Vec<Addr>,
        on_path: &mut BTreeSet<Addr>,
        height: usize,
        out: &mut Vec<Vec<Addr>>,
    ) {
        out.push(path.clone());
        if path.len() >= height {
            return;
        }
        let last = *path.last().unwrap();
        if let Some(ps) = preds.get(&last) {
            for &q in ps {
                if on_path.insert(q) {
                    path.push(q);
                    rec(preds, path, on_path, height, out);
                    path.pop();
                    on_path.remove(&q);
                }
            }
        }
    }
    let mut out = Vec::new();
    let mut path = vec![seed];
    let mut on_path = BTreeSet::from([seed]);
    rec(preds, &mut path, &mut on_path, height, &mut out);
    out
}

#[test]
fn a04_backward_paths_and_memory_sweeps_match_exhaustive_oracles() {
    let started = Instant::now();

    // Backward path enumeration against a direct recursive search.
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    for _ in 0..200 {
        let spec = random_flow(&mut rng);
        let p = parse_program(&spec.text).unwrap();
        let d = build_dcfg(&p).unwrap();
        let seed = spec.blocks[rng.gen_range(0..spec.blocks.len())];
        let height = rng.gen_range(1..=5u32);

        let mut preds: BTreeMap<Addr, BTreeSet<Addr>> = BTreeMap::new();
        for (&b, ss) in &spec.succs {
            for &s in ss {
                preds.entry(s).or_default().insert(b);
            }
        }
        let mut got = extract_backward_paths(&d, seed, height);
        let mut want = oracle_backward_paths(&preds, seed, height as usize);
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    // Memory sweeps against a direct pointer chase.
    let mut rng = ChaCha8Rng::seed_from_u64(402);
    for _ in 0..200 {
        let n_funcs = rng.gen_range(1..=6usize);
        let fn_starts: Vec<Addr> = (0..n_funcs).map(|i| 0x8000 + 0x20 * i as u64).collect();
        let n_secs = rng.gen_range(1..=5usize);
        // (base, slot values); slots sit at base, base+4, ...
        let mut sections: Vec<(Addr, Vec<Addr>)> = Vec::new();
        for s in 0..n_secs {
            let base = 0x20000 + 0x1000 * s as u64;
            let n_slots = rng.gen_range(1..=6usize);
            let slots = (0..n_slots)
                .map(|_| match rng.gen_range(0..3) {
                    0 => fn_starts[rng.gen_range(0..n_funcs)],
                    1 => {
                        // Pointer at or just past a section: the past-end
                        // slot index probes the boundary.
                        let t = rng.gen_range(0..n_secs) as u64;
                        0x20000 + 0x1000 * t + 4 * rng.gen_range(0..=6u64)
                    }
                    _ => 0xdead_0000 + rng.gen_range(0..64u64),
                })
                .collect();
            sections.push((base, slots));
        }
        let mut text = String::new();
        for (i, (base, slots)) in sections.iter().enumerate() {
            text.push_str(&format!(".section sec{i} 0x{base:x}\n"));
            for (k, v) in slots.iter().enumerate() {
                text.push_str(&format!(".slot 0x{:x} 0x{v:x}\n", base + 4 * k as u64));
            }
        }
        for (i, f) in fn_starts.iter().enumerate() {
            text.push_str(&format!(".func f{i} 0x{f:x}\n0x{f:x}: ret\n"));
        }
        let p = parse_program(&text).unwrap();

        let addr = if rng.gen_bool(0.8) {
            let (base, slots) = &sections[rng.gen_range(0..n_secs)];
            base + 4 * rng.gen_range(0..=slots.len() as u64)
        } else {
            0x5_0000 + rng.gen_range(0..32u64)
        };
        let depth = rng.gen_range(0..=3u32);

        fn chase(
            sections: &[(Addr, Vec<Addr>)],
            fn_starts: &BTreeSet<Addr>,
            addr: Addr,
            depth: u32,
            visited: &mut BTreeSet<usize>,
            out: &mut BTreeSet<Addr>,
        ) {
            let Some(si) = sections
                .iter()
                .position(|(b, slots)| addr >= *b && addr < b + 4 * slots.len() as u64)
            else {
                return;
            };
            if !visited.insert(si) {
                return;
            }
            for &v in &sections[si].1 {
                if fn_starts.contains(&v) {
                    out.insert(v);
                } else if depth > 0 {
                    chase(sections, fn_starts, v, depth - 1, visited, out);
                }
            }
        }
        let starts: BTreeSet<Addr> = fn_starts.iter().copied().collect();
        let mut want = BTreeSet::new();
        chase(
            &sections,
            &starts,
            addr,
            depth,
            &mut BTreeSet::new(),
            &mut want,
        );
        assert_eq!(recursive_memory_sweep(&p, addr, depth), want);
    }

    assert!(started.elapsed().as_secs_f64() < 10.0);
    println!("PASS a04: path enumeration and memory sweeps equal exhaustive oracles on 200 random cases each");
}

#[test]
fn a05_dispatch_scenario_resolves_exactly_the_reachable_pointers() {
    let started = Instant::now();
    let p = program("table_dispatch.masm");
    let d = build_dcfg(&p).unwrap();
    // The constant-loaded pointer, the table entry found by walking the
    // callers' pushed table address, and the pointer one chained section
    // deeper — nothing else.
    let want: BTreeSet<Addr> = [0x8049200, 0x8049210, 0x8049220].into();
    for height in [2, 40] {
        let cfg = AnalysisConfig {
            height,
            ..AnalysisConfig::default()
        };
        let r = resolve_callsite_targets(&p, &d, 0x8049108, &cfg);
        assert!(!r.timed_out);
        assert_eq!(r.targets, want);
    }
    assert!(started.elapsed().as_secs_f64() < 1.0);
    println!("PASS a05: the dispatch scenario returns exactly the three justified pointers");
}

#[test]
fn a06_scorer_gradients_training_accuracy_and_determinism() {
    // Analytic gradients against central finite differences, dropout off.
    let mut model = ScorerModel::with_dims(&[8, 16, 8, 1], &[0.0, 0.0], 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(601);
    let rows: Vec<Vec<f64>> = (0..12)
        .map(|_| (0..8).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
        .collect();
    let labels: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let (_, grads) = model.eval_loss_and_grads(&rows, &labels).unwrap();
    let mut params = model.params_flat();
    assert_eq!(params.len(), grads.len());
    let eps = 1e-5;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + eps;
        model.set_params_flat(&params).unwrap();
        let hi = model.eval_loss(&rows, &labels).unwrap();
        params[i] = orig - eps;
        model.set_params_flat(&params).unwrap();
        let lo = model.eval_loss(&rows, &labels).unwrap();
        params[i] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        let rel = (grads[i] - numeric).abs() / (grads[i].abs() + numeric.abs()).max(1e-8);
        assert!(
            rel < 1e-4,
            "gradient {i}: analytic {} vs numeric {numeric}, rel {rel}",
            grads[i]
        );
    }
    model.set_params_flat(&params).unwrap();

    // A linearly separable 200-pair set trains to high accuracy, fast.
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(602);
    let pairs: Vec<icfg_core::features::TrainingPair> = (0..200)
        .map(|i| {
            let label = (i % 2) as f64;
            let center = if label > 0.5 { 2.0 } else { -2.0 };
            icfg_core::features::TrainingPair {
                callsite: i as Addr,
                callee: i as Addr,
                features: (0..6).map(|_| center + rng.gen::<f64>() - 0.5).collect(),
                label,
            }
        })
        .collect();
    let train_once = |seed: u64| {
        let mut m = ScorerModel::with_dims(&[6, 24, 12, 1], &[0.1, 0.1], seed).unwrap();
        m.train(
            &pairs,
            &TrainConfig {
                seed,
                max_epochs: 500,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        m
    };
    let trained = train_once(11);
    let correct = pairs
        .iter()
        .filter(|pr| {
            let s = trained.score(&pr.features).unwrap();
            (s >= 0.5) == (pr.label >= 0.5)
        })
        .count();
    assert!(
        correct as f64 / pairs.len() as f64 >= 0.95,
        "accuracy {correct}/200"
    );
    assert!(started.elapsed().as_secs_f64() < 120.0);

    // Same seed, same bytes; a different seed diverges.
    let again = train_once(11);
    assert_eq!(trained.to_bytes(), again.to_bytes());
    let other = train_once(12);
    assert_ne!(trained.to_bytes(), other.to_bytes());
    println!("PASS a06: gradients check to 1e-4, 200-pair training reaches >=95% accuracy, and seeds are bit-stable");
}

/// Straight-line programs dispatching through constants, a pointer table,
/// or an unresolved register, exercising every candidate-set shape.
fn random_dispatch_program(rng: &mut ChaCha8Rng) -> String {
    let n_leaves = rng.gen_range(2..=5usize);
    let leaves: Vec<(String, Addr)> = (0..n_leaves)
        .map(|i| (format!("leaf{i}"), 0x9000 + 0x40 * i as u64))
        .collect();
    let mut text = String::new();
    let n_slots = rng.gen_range(1..=n_leaves);
    text.push_str(".section tbl 0x30000\n");
    for k in 0..n_slots {
        text.push_str(&format!(
            ".slot 0x{:x} &{}\n",
            0x30000 + 4 * k as u64,
            leaves[k].0
        ));
    }
    text.push_str(".func main 0x8000\n");
    let mut at = 0x8000u64;
    let mut emit = |text: &mut String, line: &str| {
        text.push_str(&format!("0x{at:x}: {line}\n"));
        at += 4;
    };
    for site in 0..rng.gen_range(1..=3usize) {
        match rng.gen_range(0..3) {
            0 => {
                let leaf = &leaves[rng.gen_range(0..n_leaves)].0;
                let slot = 0x8 + 8 * site;
                emit(&mut text, &format!("mov ${leaf}, [fp-0x{slot:x}]"));
                emit(&mut text, &format!("icall [fp-0x{slot:x}]"));
            }
            1 => {
                emit(&mut text, "mov $0x30000, r1");
                emit(&mut text, "mov [r1], r2");
                emit(&mut text, "icall r2");
            }
            _ => {
                emit(&mut text, "icall r0");
            }
        }
    }
    emit(&mut text, "ret");
    for (name, addr) in &leaves {
        text.push_str(&format!(".func {name} 0x{addr:x}\n0x{addr:x}: ret\n"));
    }
    text
}

#[test]
fn a07_threshold_zero_preserves_candidates_and_pruning_is_monotone() {
    let started = Instant::now();

    // Threshold zero returns the conservative candidate map verbatim.
    let mut rng = ChaCha8Rng::seed_from_u64(701);
    for _ in 0..50 {
        let text = random_dispatch_program(&mut rng);
        let p = parse_program(&text).unwrap();
        let d = build_dcfg(&p).unwrap();
        let candidates = l1_candidates(&p, &d);
        let opts = PipelineOptions {
            explicit_threshold: Some(0.0),
            ..PipelineOptions::default()
        };
        let out = run_pipeline(&p, None, None, &opts).unwrap();
        let as_map: CandidateMap = out
            .graph
            .edges
            .iter()
            .map(|(&cs, ts)| (cs, ts.keys().copied().collect()))
            .collect();
        assert_eq!(as_map, candidates);
    }

    // A 21-point sweep never grows an edge set and never raises the mean
    // prediction count.
    for name in [
        "const_dispatch.masm",
        "table_dispatch.masm",
        "staged_dispatch.masm",
        "corpus/arith.masm",
        "corpus/strings.masm",
        "corpus/validate.masm",
        "corpus/nested.masm",
        "corpus/globals.masm",
        "corpus/leaves.masm",
    ] {
        let p = program(name);
        let out = run_pipeline(&p, None, None, &PipelineOptions::default()).unwrap();
        let mut prev: Option<ScoredGraph> = None;
        let mut prev_aict = f64::INFINITY;
        for i in 0..=20 {
            let t = i as f64 * 0.05;
            let g = prune(&out.full_graph, t);
            assert_eq!(
                g.edges.keys().collect::<Vec<_>>(),
                out.full_graph.edges.keys().collect::<Vec<_>>(),
                "callsite keys survive pruning"
            );
            if let Some(prev) = &prev {
                for (cs, ts) in &g.edges {
                    let wider: BTreeSet<&Addr> = prev.edges[cs].keys().collect();
                    assert!(ts.keys().all(|t| wider.contains(t)), "containment at {t}");
                }
            }
            let aict = compute_metrics(&g, &TraceSet::new()).aict;
            assert!(aict <= prev_aict, "AICT rose at {t}");
            prev_aict = aict;
            prev = Some(g);
        }
    }

    assert!(started.elapsed().as_secs_f64() < 10.0);
    println!("PASS a07: threshold 0 reproduces the candidate map on 50 random programs; 21-point sweeps stay monotone");
}

#[test]
fn a08_hidden_chain_recovered_and_separable_from_decoys() {
    let started = Instant::now();
    let staged_dispatch = program("staged_dispatch.masm");
    let truth = parse_trace_set(&fixture("staged_dispatch.trace")).unwrap();

    let corpus = [
        "corpus/arith.masm",
        "corpus/strings.masm",
        "corpus/validate.masm",
        "corpus/nested.masm",
        "corpus/globals.masm",
        "corpus/leaves.masm",
    ];
    let programs: Vec<_> = corpus
        .iter()
        .map(|name| {
            let p = program(name);
            let d = build_dcfg(&p).unwrap();
            (p, d)
        })
        .collect();
    let pairs = build_training_set(&programs, 6.0, 2.0, 1.4, 1);
    assert!(pairs.len() >= 30, "direct-call corpus yields enough pairs");
    let mut model = ScorerModel::new(1);
    model.train(&pairs, &TrainConfig::default()).unwrap();

    let opts = PipelineOptions {
        config: AnalysisConfig {
            delta: 0.5,
            ..AnalysisConfig::default()
        },
        ..PipelineOptions::default()
    };
    let out = run_pipeline(&staged_dispatch, Some(&model), Some(&truth), &opts).unwrap();

    // (a) Nothing observed is missing at threshold zero.
    let at_zero = compute_metrics(&prune(&out.full_graph, 0.0), &truth);
    assert_eq!(at_zero.recall, 1.0);

    // (b) Every link of the hidden chain carries backward evidence from
    // its swept table, and some threshold keeps the whole chain while
    // dropping at least 30% of the conservative edges.
    let chain: [(Addr, Addr); 7] = [
        (0x80491d8, 0x8049040),
        (0x804905c, 0x8049080),
        (0x804909c, 0x80490c0),
        (0x80490dc, 0x8049100),
        (0x804911c, 0x8049140),
        (0x804915c, 0x8049180),
        (0x804919c, 0x8049200),
    ];
    let d = build_dcfg(&staged_dispatch).unwrap();
    let refined = refine_program(&staged_dispatch, &d, &opts.config);
    for (cs, target) in chain {
        assert!(
            refined[&cs].targets.contains(&target),
            "chain link 0x{cs:x} -> 0x{target:x} lacks backward evidence"
        );
    }
    let full_edges: usize = out.full_graph.edges.values().map(|m| m.len()).sum();
    let mut thresholds: Vec<f64> = out
        .full_graph
        .edges
        .values()
        .flat_map(|m| m.values().copied())
        .collect();
    thresholds.push(0.0);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let witness = thresholds.iter().copied().find(|&t| {
        let g = prune(&out.full_graph, t);
        let kept: usize = g.edges.values().map(|m| m.len()).sum();
        chain.iter().all(|(cs, tgt)| g.edges[cs].contains_key(tgt))
            && (kept as f64) <= 0.7 * full_edges as f64
    });
    assert!(
        witness.is_some(),
        "no threshold keeps the chain while shedding 30% of {full_edges} edges"
    );
    assert!(started.elapsed().as_secs_f64() < 120.0);
    println!(
        "PASS a08: chain fully recovered at threshold 0 and separable from decoys at threshold {}",
        witness.unwrap()
    );
}

#[test]
fn a09_score_adjustment_keeps_keys_and_stays_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    for _ in 0..1000 {
        let mut scores: BTreeMap<(Addr, Addr), f64> = BTreeMap::new();
        for cs in 0..rng.gen_range(0..=6u64) {
            for _ in 0..rng.gen_range(0..=5usize) {
                scores.insert((0x100 * cs, 0x9000 + 8 * rng.gen_range(0..12u64)), rng.gen());
            }
        }
        let keys: Vec<(Addr, Addr)> = scores.keys().copied().collect();
        for _ in 0..rng.gen_range(1..=4usize) {
            let mut refined = CandidateMap::new();
            for cs in 0..rng.gen_range(0..=6u64) {
                if rng.gen_bool(0.6) {
                    let targets = (0..rng.gen_range(0..=4usize))
                        .map(|_| 0x9000 + 8 * rng.gen_range(0..12u64))
                        .collect();
                    refined.insert(0x100 * cs, targets);
                }
            }
            let delta = rng.gen::<f64>();
            adjust_scores(&mut scores, &refined, delta);
            assert_eq!(
                scores.keys().copied().collect::<Vec<_>>(),
                keys,
                "edge key set changed"
            );
            assert!(scores.values().all(|s| (0.0..=1.0).contains(s)));
        }
    }
    println!("PASS a09: 1000 random adjustment sequences preserve the key set and keep scores in [0,1]");
}

#[test]
fn a10_reruns_are_byte_identical_and_expiry_keeps_partial_results() {
    let bin = env!("CARGO_BIN_EXE_icfg");
    let fixtures = format!("{}/tests/fixtures", env!("CARGO_MANIFEST_DIR"));
    let work = tempfile::tempdir().unwrap();
    let (dir1, dir2) = (work.path().join("one"), work.path().join("two"));

    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "analyze failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let staged_dispatch = format!("{fixtures}/staged_dispatch.masm");
    let traces = format!("{fixtures}/staged_dispatch.trace");
    run(&[
        "analyze",
        &staged_dispatch,
        "--traces",
        &traces,
        "--mode",
        "a-f",
        "--seed",
        "3",
        "--out-dir",
        dir1.to_str().unwrap(),
    ]);
    // Second run configured purely from the first run's manifest.
    run(&[
        "analyze",
        &staged_dispatch,
        "--traces",
        &traces,
        "--config",
        dir1.join("manifest.txt").to_str().unwrap(),
        "--out-dir",
        dir2.to_str().unwrap(),
    ]);
    let read = |dir: &std::path::Path, name: &str| std::fs::read(dir.join(name)).unwrap();
    assert_eq!(read(&dir1, "graph.txt"), read(&dir2, "graph.txt"));
    assert_eq!(read(&dir1, "metrics.txt"), read(&dir2, "metrics.txt"));
    let strip_wall = |bytes: Vec<u8>| {
        String::from_utf8(bytes)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("result.wall_ms="))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        strip_wall(read(&dir1, "manifest.txt")),
        strip_wall(read(&dir2, "manifest.txt"))
    );

    // A five-step deterministic budget expires mid-analysis but keeps what
    // it found.
    let p = program("const_dispatch.masm");
    let d = build_dcfg(&p).unwrap();
    let cfg = AnalysisConfig {
        deterministic_timeout: true,
        timeout_secs: 0.0005,
        ..AnalysisConfig::default()
    };
    let r = resolve_callsite_targets(&p, &d, 0x8049213, &cfg);
    assert!(r.timed_out);
    assert_eq!(r.targets, BTreeSet::from([0x8049196]));
    println!("PASS a10: manifest-driven reruns are byte-identical and budget expiry retains partial targets");
}
