//! C interface to `pathdens`.
//!
//! Handles are opaque. Every fallible call returns a [`PdStatus`]; on failure
//! the message is kept per thread and read with [`pd_last_error_message`].
//! Strings handed out by a handle stay valid until that handle is freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pathdens::scenario::{self, Loaded, RunOutput};
use pathdens::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Validation = 3,
    Domain = 4,
    Contract = 5,
    Config = 6,
    Resource = 7,
    Numerical = 8,
    Divergence = 9,
    Io = 10,
    OutOfRange = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

impl From<&Error> for PdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Domain(_) => PdStatus::Domain,
            Error::Contract(_) => PdStatus::Contract,
            Error::Validation { .. } => PdStatus::Validation,
            Error::Config(_) => PdStatus::Config,
            Error::Resource(_) => PdStatus::Resource,
            Error::Numerical(_) => PdStatus::Numerical,
            Error::Divergence { .. } => PdStatus::Divergence,
            Error::Io(_) => PdStatus::Io,
        }
    }
}

/// Parsed scenario.
pub struct PdScenario {
    loaded: Loaded,
    hash: CString,
}

/// Artifacts of one command.
pub struct PdSolution {
    summary: CString,
    names: Vec<CString>,
    contents: Vec<CString>,
    output: RunOutput,
}

/// Simulated state path on the scenario grid, row-major `len x dim`.
pub struct PdPath {
    dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: PdStatus, msg: impl Into<String>) -> PdStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> PdStatus) -> PdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(PdStatus::Panic, msg)
        }
    }
}

fn from_err(e: Error) -> PdStatus {
    let s = PdStatus::from(&e);
    fail(s, e.to_string())
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, PdStatus> {
    if p.is_null() {
        return Err(fail(PdStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(PdStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn cstring(s: &str) -> CString {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed")
}

/// Message of the last failed call on this thread, or null.
#[no_mangle]
pub extern "C" fn pd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static string.
#[no_mangle]
pub extern "C" fn pd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a scenario JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_scenario_from_json(json: *const c_char, out: *mut *mut PdScenario) -> PdStatus {
    guard(|| {
        if out.is_null() {
            return fail(PdStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let text = match read_str(json, "json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match scenario::load(text.as_bytes()) {
            Ok(loaded) => {
                let hash = cstring(&loaded.hash);
                *out = Box::into_raw(Box::new(PdScenario { loaded, hash }));
                PdStatus::Ok
            }
            Err(e) => from_err(e),
        }
    })
}

/// # Safety
/// `sc` must come from [`pd_scenario_from_json`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pd_scenario_free(sc: *mut PdScenario) {
    if !sc.is_null() {
        drop(Box::from_raw(sc));
    }
}

/// SHA-256 of the scenario bytes, hex encoded.
///
/// # Safety
/// `sc` must be a live scenario handle or null.
#[no_mangle]
pub unsafe extern "C" fn pd_scenario_hash(sc: *const PdScenario) -> *const c_char {
    sc.as_ref().map_or(ptr::null(), |s| s.hash.as_ptr())
}

/// State dimension `n` and noise dimension `d`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_scenario_dims(sc: *const PdScenario, n: *mut usize, d: *mut usize) -> PdStatus {
    guard(|| {
        let Some(s) = sc.as_ref() else { return fail(PdStatus::NullPointer, "scenario is null") };
        if n.is_null() || d.is_null() {
            return fail(PdStatus::NullPointer, "output pointer is null");
        }
        let (a, b) = s.loaded.field.as_dyn().dims();
        *n = a;
        *d = b;
        PdStatus::Ok
    })
}

/// Runs a command (`simulate`, `malliavin`, `hormander`, `master-check`,
/// `rough-check`, `delay-lift`, `density`).
///
/// # Safety
/// `sc` must be live, `command` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pd_run(
    sc: *const PdScenario,
    command: *const c_char,
    mesh_doubling: u32,
    out: *mut *mut PdSolution,
) -> PdStatus {
    guard(|| {
        if out.is_null() {
            return fail(PdStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let Some(s) = sc.as_ref() else { return fail(PdStatus::NullPointer, "scenario is null") };
        let cmd = match read_str(command, "command") {
            Ok(c) => c,
            Err(st) => return st,
        };
        match scenario::run(cmd, &s.loaded, mesh_doubling as usize) {
            Ok(output) => {
                let sol = PdSolution {
                    summary: cstring(&output.summary_line),
                    names: output.artifacts.iter().map(|a| cstring(&a.name)).collect(),
                    contents: output.artifacts.iter().map(|a| cstring(&a.contents)).collect(),
                    output,
                };
                *out = Box::into_raw(Box::new(sol));
                PdStatus::Ok
            }
            Err(e) => from_err(e),
        }
    })
}

/// # Safety
/// `sol` must come from [`pd_run`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pd_solution_free(sol: *mut PdSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// One-line summary of the run.
///
/// # Safety
/// `sol` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn pd_solution_summary(sol: *const PdSolution) -> *const c_char {
    sol.as_ref().map_or(ptr::null(), |s| s.summary.as_ptr())
}

/// # Safety
/// `sol` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn pd_solution_artifact_count(sol: *const PdSolution) -> usize {
    sol.as_ref().map_or(0, |s| s.names.len())
}

/// File name and contents of artifact `index`.
///
/// # Safety
/// `sol` must be live and the output pointers valid.
#[no_mangle]
pub unsafe extern "C" fn pd_solution_artifact(
    sol: *const PdSolution,
    index: usize,
    name: *mut *const c_char,
    contents: *mut *const c_char,
) -> PdStatus {
    guard(|| {
        let Some(s) = sol.as_ref() else { return fail(PdStatus::NullPointer, "solution is null") };
        if name.is_null() || contents.is_null() {
            return fail(PdStatus::NullPointer, "output pointer is null");
        }
        if index >= s.names.len() {
            return fail(PdStatus::OutOfRange, format!("artifact {index} of {}", s.names.len()));
        }
        *name = s.names[index].as_ptr();
        *contents = s.contents[index].as_ptr();
        PdStatus::Ok
    })
}

/// Writes every artifact into `dir`, creating it if needed.
///
/// # Safety
/// `sol` must be live and `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pd_solution_write(sol: *const PdSolution, dir: *const c_char) -> PdStatus {
    guard(|| {
        let Some(s) = sol.as_ref() else { return fail(PdStatus::NullPointer, "solution is null") };
        let d = match read_str(dir, "dir") {
            Ok(d) => d,
            Err(st) => return st,
        };
        match scenario::write_artifacts(std::path::Path::new(d), &s.output.artifacts) {
            Ok(()) => PdStatus::Ok,
            Err(e) => from_err(e),
        }
    })
}

/// Simulates the scenario's state path.
///
/// # Safety
/// `sc` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pd_simulate(sc: *const PdScenario, out: *mut *mut PdPath) -> PdStatus {
    guard(|| {
        if out.is_null() {
            return fail(PdStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let Some(s) = sc.as_ref() else { return fail(PdStatus::NullPointer, "scenario is null") };
        match scenario::simulate(&s.loaded) {
            Ok(b) => {
                let g = &s.loaded.grid;
                let p =
                    PdPath { dim: b.x.dim(), times: (0..g.len()).map(|j| g.t(j)).collect(), states: b.x.into_vec() };
                *out = Box::into_raw(Box::new(p));
                PdStatus::Ok
            }
            Err(e) => from_err(e),
        }
    })
}

/// # Safety
/// `path` must come from [`pd_simulate`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pd_path_free(path: *mut PdPath) {
    if !path.is_null() {
        drop(Box::from_raw(path));
    }
}

/// Number of grid points and state dimension.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_path_shape(path: *const PdPath, len: *mut usize, dim: *mut usize) -> PdStatus {
    guard(|| {
        let Some(p) = path.as_ref() else { return fail(PdStatus::NullPointer, "path is null") };
        if len.is_null() || dim.is_null() {
            return fail(PdStatus::NullPointer, "output pointer is null");
        }
        *len = p.times.len();
        *dim = p.dim;
        PdStatus::Ok
    })
}

/// Copies grid times (`len` values) and states (`len * dim` values, row
/// major) into caller buffers of the given capacities. Either buffer may be
/// null to skip it.
///
/// # Safety
/// Non-null buffers must hold at least their stated capacity.
#[no_mangle]
pub unsafe extern "C" fn pd_path_copy(
    path: *const PdPath,
    times: *mut f64,
    times_cap: usize,
    states: *mut f64,
    states_cap: usize,
) -> PdStatus {
    guard(|| {
        let Some(p) = path.as_ref() else { return fail(PdStatus::NullPointer, "path is null") };
        if !times.is_null() {
            if times_cap < p.times.len() {
                return fail(PdStatus::BufferTooSmall, format!("times needs {} values", p.times.len()));
            }
            ptr::copy_nonoverlapping(p.times.as_ptr(), times, p.times.len());
        }
        if !states.is_null() {
            if states_cap < p.states.len() {
                return fail(PdStatus::BufferTooSmall, format!("states needs {} values", p.states.len()));
            }
            ptr::copy_nonoverlapping(p.states.as_ptr(), states, p.states.len());
        }
        PdStatus::Ok
    })
}
