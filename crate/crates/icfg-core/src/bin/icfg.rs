//! Command-line front end for the resolution pipeline.
//!
//! Exit codes: 0 success, 2 malformed or invalid input, 3 model error,
//! 4 bad configuration, 5 internal failure.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use icfg_core::cfg::build_dcfg;
use icfg_core::frontend::{parse_program, parse_trace_set, serialize_candidate_map, ParseError};
use icfg_core::graph::{
    calibrate_threshold, compute_metrics, parse_graph, prune, serialize_graph,
};
use icfg_core::model::{AnalysisConfig, Program};
use icfg_core::pipeline::{
    build_training_set, parse_manifest, render_manifest, run_pipeline, ManifestInfo,
    ManifestSettings, ModePreset, ObjectiveKind, PipelineError, PipelineOptions,
};
use icfg_core::refine::{refine_program, target_map};
use icfg_core::scorer::{ScorerError, ScorerModel, TrainConfig};

#[derive(Parser)]
#[command(
    name = "icfg",
    version,
    about = "Layered indirect-call target resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write graph, metrics, and manifest files.
    Analyze {
        /// Program listing to analyze.
        program: PathBuf,
        /// Dynamic trace set; enables calibration and metrics.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Trained scorer; omitting it leaves scoring to refinement alone.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory receiving graph.txt, manifest.txt, and metrics.txt.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Analysis preset: c-r, c-f, a-r, or a-f.
        #[arg(long)]
        mode: Option<String>,
        /// Explicit pruning threshold; overrides calibration.
        #[arg(long)]
        threshold: Option<f64>,
        /// Recall floor for recall-preserving calibration.
        #[arg(long)]
        target_recall: Option<f64>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Train a scorer on direct calls from one or more programs.
    Train {
        /// Program listings supplying labeled direct-call pairs.
        #[arg(required = true)]
        programs: Vec<PathBuf>,
        /// Where to write the trained model.
        #[arg(long)]
        out: PathBuf,
        /// Negative pairs sampled per positive pair.
        #[arg(long, default_value_t = 1.4)]
        negatives: f64,
        /// Training epoch cap.
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Run backward refinement only and print the witnessed targets.
    Refine {
        program: PathBuf,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Drop edges below a threshold from a serialized graph.
    Prune {
        graph: PathBuf,
        #[arg(long)]
        threshold: f64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Choose a pruning threshold against traces and print it.
    Calibrate {
        graph: PathBuf,
        traces: PathBuf,
        /// recall or f1.
        #[arg(long, default_value = "recall")]
        objective: String,
        #[arg(long, default_value_t = 1.0)]
        target_recall: f64,
        /// Fraction of traces sampled for calibration.
        #[arg(long)]
        sample: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a serialized graph against traces and print the metrics.
    Eval {
        graph: PathBuf,
        traces: PathBuf,
    },
}

/// Analysis knobs shared by the pipeline-driving subcommands. Values merge
/// as defaults, then the config file, then the mode preset, then these
/// flags.
#[derive(Args, Debug, Clone)]
struct ConfigFlags {
    /// key=value config file; the ICFG_CONFIG environment variable names a
    /// fallback.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Backward path height bound, in blocks.
    #[arg(long)]
    height: Option<u32>,
    /// Pointer-chase depth for memory sweeps.
    #[arg(long)]
    sweep_depth: Option<u32>,
    /// Caller recursion depth for cross-reference resolution.
    #[arg(long)]
    xref_depth: Option<u32>,
    /// Refinement budget per callsite, in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    /// Score adjustment applied by refinement.
    #[arg(long)]
    delta: Option<f64>,
    /// Argument-score acceptance threshold for callee descriptors.
    #[arg(long)]
    tau_arg: Option<f64>,
    /// Return-score acceptance threshold for callee descriptors.
    #[arg(long)]
    tau_ret: Option<f64>,
    /// Threshold used when neither --threshold nor calibration applies.
    #[arg(long)]
    prune_threshold: Option<f64>,
    /// Fraction of traces sampled for calibration.
    #[arg(long)]
    sample: Option<f64>,
    /// Seed for every random choice the run makes.
    #[arg(long)]
    seed: Option<u64>,
    /// Charge refinement in deterministic steps instead of wall-clock time.
    #[arg(long)]
    deterministic_timeout: bool,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {err}")]
    Parse { path: String, err: ParseError },
    #[error("{path}: {err}")]
    Io {
        path: String,
        err: std::io::Error,
    },
    #[error("{path}: {err}")]
    Model { path: String, err: ScorerError },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse { .. } => 2,
            CliError::Pipeline(PipelineError::InvalidProgram(_)) => 2,
            CliError::Usage(_) => 4,
            CliError::Pipeline(PipelineError::Config(_)) => 4,
            CliError::Model { .. } => 3,
            CliError::Pipeline(PipelineError::Model(_)) => 3,
            CliError::Io { .. } => 5,
            CliError::Pipeline(_) => 5,
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Pipeline(PipelineError::InvalidProgram(violations)) = &e {
                for v in violations {
                    eprintln!("  {v}");
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|err| CliError::Io {
        path: path.display().to_string(),
        err,
    })
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    fs::write(path, content).map_err(|err| CliError::Io {
        path: path.display().to_string(),
        err,
    })
}

fn parse_err(path: &Path, err: ParseError) -> CliError {
    CliError::Parse {
        path: path.display().to_string(),
        err,
    }
}

fn read_program(path: &Path) -> Result<Program, CliError> {
    parse_program(&read_file(path)?).map_err(|e| parse_err(path, e))
}

/// Settings from --config, ICFG_CONFIG, or defaults when neither is set.
fn file_settings(flags: &ConfigFlags) -> Result<ManifestSettings, CliError> {
    let path = flags
        .config
        .clone()
        .or_else(|| env::var_os("ICFG_CONFIG").map(PathBuf::from));
    match path {
        Some(p) => parse_manifest(&read_file(&p)?).map_err(|e| parse_err(&p, e)),
        None => Ok(ManifestSettings {
            config: AnalysisConfig::default(),
            mode: None,
            objective: None,
            target_recall: None,
        }),
    }
}

/// Overlay a mode preset and explicit flags onto file-level settings.
fn resolve_config(
    flags: &ConfigFlags,
    settings: &ManifestSettings,
    mode: Option<ModePreset>,
) -> AnalysisConfig {
    let mut cfg = settings.config.clone();
    if let Some(m) = mode {
        cfg.delta = m.delta();
    }
    if let Some(v) = flags.height {
        cfg.height = v;
    }
    if let Some(v) = flags.sweep_depth {
        cfg.sweep_depth = v;
    }
    if let Some(v) = flags.xref_depth {
        cfg.xref_depth = v;
    }
    if let Some(v) = flags.timeout {
        cfg.timeout_secs = v;
    }
    if let Some(v) = flags.delta {
        cfg.delta = v;
    }
    if let Some(v) = flags.tau_arg {
        cfg.tau_arg = v;
    }
    if let Some(v) = flags.tau_ret {
        cfg.tau_ret = v;
    }
    if let Some(v) = flags.prune_threshold {
        cfg.prune_threshold = v;
    }
    if let Some(v) = flags.sample {
        cfg.trace_sample_fraction = v;
    }
    if let Some(v) = flags.seed {
        cfg.rng_seed = v;
    }
    if flags.deterministic_timeout {
        cfg.deterministic_timeout = true;
    }
    cfg
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze {
            program,
            traces,
            model,
            out_dir,
            mode,
            threshold,
            target_recall,
            cfg,
        } => analyze(
            &program,
            traces.as_deref(),
            model.as_deref(),
            &out_dir,
            mode.as_deref(),
            threshold,
            target_recall,
            &cfg,
        ),
        Command::Train {
            programs,
            out,
            negatives,
            epochs,
            cfg,
        } => train(&programs, &out, negatives, epochs, &cfg),
        Command::Refine { program, cfg } => refine(&program, &cfg),
        Command::Prune {
            graph,
            threshold,
            out,
        } => {
            let g = parse_graph(&read_file(&graph)?).map_err(|e| parse_err(&graph, e))?;
            if !(0.0..=1.0).contains(&threshold) {
                return Err(CliError::Usage(format!(
                    "threshold must be in [0, 1], got {threshold}"
                )));
            }
            let rendered = serialize_graph(&prune(&g, threshold));
            match out {
                Some(p) => write_file(&p, &rendered)?,
                None => print!("{rendered}"),
            }
            Ok(())
        }
        Command::Calibrate {
            graph,
            traces,
            objective,
            target_recall,
            sample,
            seed,
        } => {
            let g = parse_graph(&read_file(&graph)?).map_err(|e| parse_err(&graph, e))?;
            let tr = parse_trace_set(&read_file(&traces)?).map_err(|e| parse_err(&traces, e))?;
            let kind = ObjectiveKind::parse(&objective)
                .ok_or_else(|| CliError::Usage(format!("unknown objective {objective}")))?;
            let defaults = AnalysisConfig::default();
            let t = calibrate_threshold(
                &g,
                &tr,
                kind.to_objective(target_recall),
                sample.unwrap_or(defaults.trace_sample_fraction),
                seed.unwrap_or(defaults.rng_seed),
            );
            println!("{t}");
            Ok(())
        }
        Command::Eval { graph, traces } => {
            let g = parse_graph(&read_file(&graph)?).map_err(|e| parse_err(&graph, e))?;
            let tr = parse_trace_set(&read_file(&traces)?).map_err(|e| parse_err(&traces, e))?;
            print!("{}", compute_metrics(&g, &tr).render());
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn analyze(
    program_path: &Path,
    traces_path: Option<&Path>,
    model_path: Option<&Path>,
    out_dir: &Path,
    mode_flag: Option<&str>,
    threshold: Option<f64>,
    target_recall: Option<f64>,
    flags: &ConfigFlags,
) -> Result<(), CliError> {
    let settings = file_settings(flags)?;
    let mode = match mode_flag {
        Some(s) => {
            ModePreset::parse(s).ok_or_else(|| CliError::Usage(format!("unknown mode {s}")))?
        }
        None => settings.mode.unwrap_or(ModePreset::ConservativeRecall),
    };
    let opts = PipelineOptions {
        config: resolve_config(flags, &settings, Some(mode)),
        objective: Some(mode.objective_kind()),
        target_recall: target_recall
            .or(settings.target_recall)
            .unwrap_or(1.0),
        explicit_threshold: threshold,
    };

    let p = read_program(program_path)?;
    let traces = traces_path
        .map(|t| parse_trace_set(&read_file(t)?).map_err(|e| parse_err(t, e)))
        .transpose()?;
    let model = model_path
        .map(|m| {
            ScorerModel::load(m).map_err(|err| CliError::Model {
                path: m.display().to_string(),
                err,
            })
        })
        .transpose()?;

    let out = run_pipeline(&p, model.as_ref(), traces.as_ref(), &opts)?;

    fs::create_dir_all(out_dir).map_err(|err| CliError::Io {
        path: out_dir.display().to_string(),
        err,
    })?;
    write_file(&out_dir.join("graph.txt"), &serialize_graph(&out.graph))?;
    let manifest = render_manifest(&ManifestInfo {
        program_path: &program_path.display().to_string(),
        traces_path: traces_path.map(|p| p.display().to_string()).as_deref(),
        model_path: model_path.map(|p| p.display().to_string()).as_deref(),
        mode: Some(mode),
        opts: &opts,
        output: &out,
    });
    write_file(&out_dir.join("manifest.txt"), &manifest)?;
    if let Some(m) = &out.metrics {
        write_file(&out_dir.join("metrics.txt"), &m.render())?;
    }

    let full_edges: usize = out.full_graph.edges.values().map(|t| t.len()).sum();
    let kept_edges: usize = out.graph.edges.values().map(|t| t.len()).sum();
    println!("callsites: {}", out.graph.edges.len());
    println!("edges kept: {kept_edges} of {full_edges}");
    println!(
        "threshold: {} ({})",
        out.threshold_used,
        out.threshold_source.name()
    );
    if !out.timed_out.is_empty() {
        let list: Vec<String> = out.timed_out.iter().map(|a| format!("0x{a:x}")).collect();
        println!("timed out: {}", list.join(","));
    }
    if let Some(m) = &out.metrics {
        print!("{}", m.render());
    }
    println!("wrote: {}", out_dir.display());
    Ok(())
}

fn train(
    program_paths: &[PathBuf],
    out: &Path,
    negatives: f64,
    epochs: Option<usize>,
    flags: &ConfigFlags,
) -> Result<(), CliError> {
    let settings = file_settings(flags)?;
    let cfg = resolve_config(flags, &settings, None);
    cfg.validate().map_err(PipelineError::Config)?;

    let mut programs = Vec::new();
    for path in program_paths {
        let p = read_program(path)?;
        let violations = p.validate();
        if !violations.is_empty() {
            return Err(PipelineError::InvalidProgram(violations).into());
        }
        let d = build_dcfg(&p).map_err(PipelineError::Cfg)?;
        programs.push((p, d));
    }
    let pairs = build_training_set(&programs, cfg.tau_arg, cfg.tau_ret, negatives, cfg.rng_seed);
    let positives = pairs.iter().filter(|p| p.label == 1.0).count();

    let mut train_cfg = TrainConfig {
        seed: cfg.rng_seed,
        ..TrainConfig::default()
    };
    if let Some(e) = epochs {
        train_cfg.max_epochs = e;
    }
    let mut model = ScorerModel::new(cfg.rng_seed);
    let report = model
        .train(&pairs, &train_cfg)
        .map_err(PipelineError::Model)?;
    model.save(out).map_err(|err| CliError::Model {
        path: out.display().to_string(),
        err,
    })?;

    println!("programs: {}", programs.len());
    println!("pairs: {} ({positives} positive)", pairs.len());
    println!("train/val: {}/{}", report.train_size, report.val_size);
    println!("epochs run: {}", report.epochs_run);
    println!("best val loss: {:.6}", report.best_val_loss);
    println!("saved: {}", out.display());
    Ok(())
}

fn refine(program_path: &Path, flags: &ConfigFlags) -> Result<(), CliError> {
    let settings = file_settings(flags)?;
    let cfg = resolve_config(flags, &settings, None);
    cfg.validate().map_err(PipelineError::Config)?;
    let p = read_program(program_path)?;
    let violations = p.validate();
    if !violations.is_empty() {
        return Err(PipelineError::InvalidProgram(violations).into());
    }
    let d = build_dcfg(&p).map_err(PipelineError::Cfg)?;
    let results = refine_program(&p, &d, &cfg);
    for (cs, r) in &results {
        if r.timed_out {
            eprintln!("warning: refinement budget ran out at 0x{cs:x}");
        }
    }
    print!("{}", serialize_candidate_map(&target_map(&results)));
    Ok(())
}
