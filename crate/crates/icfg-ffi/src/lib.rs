//! C ABI over the resolution pipeline: opaque handles, integer status
//! codes, and a thread-local last-error message.
//!
//! Every constructor hands back an owned handle that must be released with
//! the matching `_free` function; strings returned by the API are released
//! with [`icfg_string_free`]. All functions are safe to call with null
//! handles and report [`IcfgStatus::InvalidArgument`] instead of crashing.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use icfg_core::frontend::{parse_program, parse_trace_set};
use icfg_core::graph::serialize_graph;
use icfg_core::model::AnalysisConfig;
use icfg_core::pipeline::{
    run_pipeline, ObjectiveKind, PipelineError, PipelineOptions, PipelineOutput,
};
use icfg_core::scorer::ScorerModel;

/// Parsed program handle.
pub struct IcfgProgram(icfg_core::model::Program);

/// Trained scorer handle.
pub struct IcfgModel(ScorerModel);

/// Result of one pipeline run: the pruned graph plus its metadata.
pub struct IcfgGraph(PipelineOutput);

/// Status code returned by every fallible call. Mirrors the CLI exit
/// codes; [`icfg_last_error_message`] describes the most recent failure on
/// the calling thread.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum IcfgStatus {
    Ok = 0,
    /// A required pointer was null or otherwise unusable.
    InvalidArgument = 1,
    /// Program, trace, or graph text failed to parse or validate.
    ParseError = 2,
    /// Model bytes were rejected or model I/O failed.
    ModelError = 3,
    /// A configuration value was out of range.
    ConfigError = 4,
    /// Unexpected internal failure.
    InternalError = 5,
}

/// Threshold calibration objective for [`IcfgOptions`].
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum IcfgObjective {
    /// No calibration: the configured prune threshold applies.
    None = 0,
    /// Largest threshold keeping sampled recall at the target.
    Recall = 1,
    /// Threshold maximizing sampled F1.
    F1 = 2,
}

/// Analysis options; obtain defaults with [`icfg_options_default`] and
/// override individual fields.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct IcfgOptions {
    /// Backward path height bound, in blocks.
    pub height: u32,
    /// Pointer-chase depth for memory sweeps.
    pub sweep_depth: u32,
    /// Caller recursion depth for cross-reference resolution.
    pub xref_depth: u32,
    /// Refinement budget per callsite, in seconds.
    pub timeout_secs: f64,
    /// Score adjustment applied by refinement.
    pub delta: f64,
    /// Argument-score acceptance threshold for callee descriptors.
    pub tau_arg: f64,
    /// Return-score acceptance threshold for callee descriptors.
    pub tau_ret: f64,
    /// Threshold used when neither calibration nor an explicit threshold
    /// applies.
    pub prune_threshold: f64,
    /// Fraction of traces sampled for calibration.
    pub trace_sample_fraction: f64,
    /// Seed for every random choice the run makes.
    pub rng_seed: u64,
    /// Charge refinement in deterministic steps instead of wall time.
    pub deterministic_timeout: bool,
    /// Calibration objective, applied when traces are supplied.
    pub objective: IcfgObjective,
    /// Recall floor for the recall objective.
    pub target_recall: f64,
    /// When set, `explicit_threshold` overrides calibration entirely.
    pub has_explicit_threshold: bool,
    pub explicit_threshold: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

fn pipeline_status(e: &PipelineError) -> IcfgStatus {
    match e {
        PipelineError::InvalidProgram(_) => IcfgStatus::ParseError,
        PipelineError::Config(_) => IcfgStatus::ConfigError,
        PipelineError::Model(_) => IcfgStatus::ModelError,
        PipelineError::Cfg(_) | PipelineError::Graph(_) => IcfgStatus::InternalError,
    }
}

fn guarded(f: impl FnOnce() -> IcfgStatus) -> IcfgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            IcfgStatus::InternalError
        }
    }
}

/// Read a C string argument; `what` names it in error messages.
///
/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, IcfgStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(IcfgStatus::InvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        IcfgStatus::ParseError
    })
}

/// Message describing the most recent failure on this thread, or an empty
/// string. The pointer stays valid until the next failing call on the
/// same thread.
#[no_mangle]
pub extern "C" fn icfg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Fill `out` with the default analysis options.
#[no_mangle]
pub extern "C" fn icfg_options_default(out: *mut IcfgOptions) -> IcfgStatus {
    if out.is_null() {
        set_error("out is null");
        return IcfgStatus::InvalidArgument;
    }
    let d = AnalysisConfig::default();
    let defaults = IcfgOptions {
        height: d.height,
        sweep_depth: d.sweep_depth,
        xref_depth: d.xref_depth,
        timeout_secs: d.timeout_secs,
        delta: d.delta,
        tau_arg: d.tau_arg,
        tau_ret: d.tau_ret,
        prune_threshold: d.prune_threshold,
        trace_sample_fraction: d.trace_sample_fraction,
        rng_seed: d.rng_seed,
        deterministic_timeout: d.deterministic_timeout,
        objective: IcfgObjective::None,
        target_recall: 1.0,
        has_explicit_threshold: false,
        explicit_threshold: 0.0,
    };
    unsafe { out.write(defaults) };
    IcfgStatus::Ok
}

/// Parse program text into a handle. On success `*out` owns the program.
#[no_mangle]
pub extern "C" fn icfg_program_parse(
    text: *const c_char,
    out: *mut *mut IcfgProgram,
) -> IcfgStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is null");
            return IcfgStatus::InvalidArgument;
        }
        let text = match unsafe { read_str(text, "program text") } {
            Ok(t) => t,
            Err(s) => return s,
        };
        match parse_program(text) {
            Ok(p) => {
                unsafe { out.write(Box::into_raw(Box::new(IcfgProgram(p)))) };
                IcfgStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                IcfgStatus::ParseError
            }
        }
    })
}

/// Release a program handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn icfg_program_free(p: *mut IcfgProgram) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Load a trained scorer from a file path.
#[no_mangle]
pub extern "C" fn icfg_model_load(path: *const c_char, out: *mut *mut IcfgModel) -> IcfgStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is null");
            return IcfgStatus::InvalidArgument;
        }
        let path = match unsafe { read_str(path, "model path") } {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ScorerModel::load(Path::new(path)) {
            Ok(m) => {
                unsafe { out.write(Box::into_raw(Box::new(IcfgModel(m)))) };
                IcfgStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                IcfgStatus::ModelError
            }
        }
    })
}

/// Release a model handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn icfg_model_free(m: *mut IcfgModel) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Run the pipeline. `model`, `traces_text`, and `options` may be null:
/// scoring then falls back to refinement alone, no metrics or calibration
/// happen, and defaults apply respectively. On success `*out` owns the
/// result.
#[no_mangle]
pub extern "C" fn icfg_analyze(
    program: *const IcfgProgram,
    model: *const IcfgModel,
    traces_text: *const c_char,
    options: *const IcfgOptions,
    out: *mut *mut IcfgGraph,
) -> IcfgStatus {
    guarded(|| {
        if program.is_null() || out.is_null() {
            set_error("program and out must be non-null");
            return IcfgStatus::InvalidArgument;
        }
        let program = unsafe { &(*program).0 };
        let model = unsafe { model.as_ref() }.map(|m| &m.0);

        let traces = if traces_text.is_null() {
            None
        } else {
            let text = match unsafe { read_str(traces_text, "trace text") } {
                Ok(t) => t,
                Err(s) => return s,
            };
            match parse_trace_set(text) {
                Ok(t) => Some(t),
                Err(e) => {
                    set_error(&e.to_string());
                    return IcfgStatus::ParseError;
                }
            }
        };

        let opts = match unsafe { options.as_ref() } {
            None => PipelineOptions::default(),
            Some(o) => PipelineOptions {
                config: AnalysisConfig {
                    height: o.height,
                    sweep_depth: o.sweep_depth,
                    xref_depth: o.xref_depth,
                    timeout_secs: o.timeout_secs,
                    delta: o.delta,
                    tau_arg: o.tau_arg,
                    tau_ret: o.tau_ret,
                    prune_threshold: o.prune_threshold,
                    trace_sample_fraction: o.trace_sample_fraction,
                    rng_seed: o.rng_seed,
                    deterministic_timeout: o.deterministic_timeout,
                },
                objective: match o.objective {
                    IcfgObjective::None => None,
                    IcfgObjective::Recall => Some(ObjectiveKind::Recall),
                    IcfgObjective::F1 => Some(ObjectiveKind::F1),
                },
                target_recall: o.target_recall,
                explicit_threshold: o.has_explicit_threshold.then_some(o.explicit_threshold),
            },
        };

        match run_pipeline(program, model, traces.as_ref(), &opts) {
            Ok(output) => {
                unsafe { out.write(Box::into_raw(Box::new(IcfgGraph(output)))) };
                IcfgStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                pipeline_status(&e)
            }
        }
    })
}

/// Release a result handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn icfg_graph_free(g: *mut IcfgGraph) {
    if !g.is_null() {
        drop(unsafe { Box::from_raw(g) });
    }
}

fn string_out(f: impl FnOnce() -> Option<String>) -> *mut c_char {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Some(s)) => CString::new(s.replace('\0', " "))
            .map(CString::into_raw)
            .unwrap_or(ptr::null_mut()),
        Ok(None) => ptr::null_mut(),
        Err(_) => {
            set_error("internal panic");
            ptr::null_mut()
        }
    }
}

/// Serialize the pruned graph; free the result with [`icfg_string_free`].
/// Null on a null handle.
#[no_mangle]
pub extern "C" fn icfg_graph_serialize(g: *const IcfgGraph) -> *mut c_char {
    string_out(|| {
        let g = unsafe { g.as_ref() }?;
        Some(serialize_graph(&g.0.graph))
    })
}

/// Render the metrics report; free the result with [`icfg_string_free`].
/// Null when the run had no traces or the handle is null.
#[no_mangle]
pub extern "C" fn icfg_graph_metrics(g: *const IcfgGraph) -> *mut c_char {
    string_out(|| {
        let g = unsafe { g.as_ref() }?;
        let m = g.0.metrics.as_ref()?;
        Some(m.render())
    })
}

/// The pruning threshold the run settled on; NaN on a null handle.
#[no_mangle]
pub extern "C" fn icfg_graph_threshold(g: *const IcfgGraph) -> f64 {
    match unsafe { g.as_ref() } {
        Some(g) => g.0.threshold_used,
        None => f64::NAN,
    }
}

/// Number of indirect callsites in the result; 0 on a null handle.
#[no_mangle]
pub extern "C" fn icfg_graph_callsites(g: *const IcfgGraph) -> u64 {
    match unsafe { g.as_ref() } {
        Some(g) => g.0.graph.edges.len() as u64,
        None => 0,
    }
}

/// Number of edges surviving the prune; 0 on a null handle.
#[no_mangle]
pub extern "C" fn icfg_graph_edges(g: *const IcfgGraph) -> u64 {
    match unsafe { g.as_ref() } {
        Some(g) => g.0.graph.edges.values().map(|t| t.len() as u64).sum(),
        None => 0,
    }
}

/// Number of callsites whose refinement budget expired; 0 on a null
/// handle.
#[no_mangle]
pub extern "C" fn icfg_graph_timed_out_count(g: *const IcfgGraph) -> u64 {
    match unsafe { g.as_ref() } {
        Some(g) => g.0.timed_out.len() as u64,
        None => 0,
    }
}

/// Release a string returned by this API. Null is a no-op.
#[no_mangle]
pub extern "C" fn icfg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
