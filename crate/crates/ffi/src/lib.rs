//! C ABI for flowcryst.
//!
//! Every function returns a [`FlowcrystStatus`]; on failure the message is
//! available from [`flowcryst_last_error`] on the same thread. Models and
//! priors are opaque handles released with their `_free` functions. Arrays
//! are caller-owned; coordinates are row-major `n × 3`, lattice parameters
//! are `[a, b, c, alpha, beta, gamma]` and lattice matrices are row-major
//! with the lattice vectors as rows.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use flowcryst::crystal::{matrix_from_params, params_from_matrix, AtomTypes, Crystal, LatticeMatrix, LatticeParams};
use flowcryst::engine::{generate_dng, reconstruct_csp, stream_rng, AnnealFlags, IntegrationConfig, Sample};
use flowcryst::flowmatch::Task;
use flowcryst::geometry::{torus_exp, torus_log, TorusCloud, TorusTangent};
use flowcryst::io::PriorArtifact;
use flowcryst::metrics::{match_structures, MatchTolerances};
use flowcryst::net::{checkpoint, Model};
use flowcryst::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowcrystStatus {
    Ok = 0,
    NullPointer = 1,
    /// Input failed validation (shape, domain, configuration).
    InvalidArgument = 2,
    /// Numerical or integration failure.
    Runtime = 3,
    Io = 4,
    /// An output buffer is too small; required sizes were written.
    BufferTooSmall = 5,
    Panic = 6,
}

/// Anneal the atom-bit group.
pub const FLOWCRYST_ANNEAL_A: u32 = 1;
/// Anneal the fractional-coordinate group.
pub const FLOWCRYST_ANNEAL_F: u32 = 2;
/// Anneal the lattice group.
pub const FLOWCRYST_ANNEAL_L: u32 = 4;

pub const FLOWCRYST_TASK_CSP: i32 = 0;
pub const FLOWCRYST_TASK_DNG: i32 = 1;

/// Trained vector-field model.
pub struct FlowcrystModel(Model);

/// Fitted base distribution: length prior and atom-count table.
pub struct FlowcrystPrior(PriorArtifact);

/// Borrowed view of a crystal.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FlowcrystCrystalView {
    pub n_atoms: usize,
    pub atomic_numbers: *const i32,
    /// `n_atoms × 3` fractional coordinates in `[0, 1)`.
    pub frac_coords: *const f64,
    pub lattice: [f64; 6],
}

/// Integration settings.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FlowcrystIntegration {
    pub steps: usize,
    pub anneal_slope: f64,
    /// Bitwise OR of `FLOWCRYST_ANNEAL_*`.
    pub anneal_flags: u32,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> FlowcrystStatus {
    match e {
        Error::Io(_) => FlowcrystStatus::Io,
        e if e.is_validation() => FlowcrystStatus::InvalidArgument,
        _ => FlowcrystStatus::Runtime,
    }
}

struct Fail(FlowcrystStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FlowcrystStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FlowcrystStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FlowcrystStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FlowcrystStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FlowcrystStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

fn triples(v: &[f64]) -> Vec<[f64; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

unsafe fn crystal_from_view(v: *const FlowcrystCrystalView) -> Result<Crystal, Fail> {
    let v = v.as_ref().ok_or_else(|| null("crystal"))?;
    let z = slice(v.atomic_numbers, v.n_atoms, "atomic_numbers")?;
    let f = slice(v.frac_coords, 3 * v.n_atoms, "frac_coords")?;
    let kinds = z.iter().map(|&z| AtomTypes::kind_from_atomic_number(z as i64)).collect::<Result<Vec<_>, _>>()?;
    Ok(Crystal::new(AtomTypes::new(kinds)?, TorusCloud::new(triples(f))?, LatticeParams::from_array(v.lattice)?)?)
}

fn integration(cfg: &FlowcrystIntegration) -> IntegrationConfig {
    IntegrationConfig {
        steps: cfg.steps,
        anneal_slope: cfg.anneal_slope,
        anneal: AnnealFlags {
            a: cfg.anneal_flags & FLOWCRYST_ANNEAL_A != 0,
            f: cfg.anneal_flags & FLOWCRYST_ANNEAL_F != 0,
            l: cfg.anneal_flags & FLOWCRYST_ANNEAL_L != 0,
        },
    }
}

/// Null-terminated library version; static storage.
#[no_mangle]
pub extern "C" fn flowcryst_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message of this thread into `buf` (truncated, always
/// null-terminated when `len > 0`) and returns the full message length.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Entrywise shortest signed displacement from `f0` to `f1` on the torus, each in `(-1/2, 1/2]`.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_torus_log(
    f0: *const f64,
    f1: *const f64,
    n_atoms: usize,
    out: *mut f64,
) -> FlowcrystStatus {
    guard(|| {
        let a = TorusCloud::new(triples(slice(f0, 3 * n_atoms, "f0")?))?;
        let b = TorusCloud::new(triples(slice(f1, 3 * n_atoms, "f1")?))?;
        let v = torus_log(&a, &b)?;
        slice_mut(out, 3 * n_atoms, "out")?.copy_from_slice(v.vec.as_flattened());
        Ok(())
    })
}

/// Moves `f` by the tangent `v` and wraps into `[0, 1)`.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_torus_exp(
    f: *const f64,
    v: *const f64,
    n_atoms: usize,
    out: *mut f64,
) -> FlowcrystStatus {
    guard(|| {
        let p = TorusCloud::new(triples(slice(f, 3 * n_atoms, "f")?))?;
        let t = TorusTangent { vec: triples(slice(v, 3 * n_atoms, "v")?) };
        let q = torus_exp(&p, &t)?;
        slice_mut(out, 3 * n_atoms, "out")?.copy_from_slice(q.coords().as_flattened());
        Ok(())
    })
}

/// Canonical lattice matrix (rows are lattice vectors) of `params`.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_lattice_matrix(params: *const f64, out_rows: *mut f64) -> FlowcrystStatus {
    guard(|| {
        let p = slice(params, 6, "params")?;
        let l = matrix_from_params(&LatticeParams::from_array(p.try_into().unwrap())?)?;
        let out = slice_mut(out_rows, 9, "out_rows")?;
        for (i, col) in l.cols.iter().enumerate() {
            out[3 * i..3 * i + 3].copy_from_slice(col);
        }
        Ok(())
    })
}

/// Lattice parameters of a matrix whose rows are the lattice vectors.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_lattice_params(rows: *const f64, out_params: *mut f64) -> FlowcrystStatus {
    guard(|| {
        let r = slice(rows, 9, "rows")?;
        let m = LatticeMatrix::from_row_vectors([[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]]);
        let p = params_from_matrix(&m)?;
        slice_mut(out_params, 6, "out_params")?.copy_from_slice(&p.to_array());
        Ok(())
    })
}

/// Structure matching; `*out_matched` is 1 with `*out_rmsd` the normalized RMSD, or 0.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_match_structures(
    x: *const FlowcrystCrystalView,
    y: *const FlowcrystCrystalView,
    stol: f64,
    angle_tol: f64,
    ltol: f64,
    out_matched: *mut i32,
    out_rmsd: *mut f64,
) -> FlowcrystStatus {
    guard(|| {
        let tol = MatchTolerances::new(stol, angle_tol, ltol)?;
        let (a, b) = (crystal_from_view(x)?, crystal_from_view(y)?);
        let r = match_structures(&a, &b, &tol);
        *out_matched.as_mut().ok_or_else(|| null("out_matched"))? = r.is_some() as i32;
        *out_rmsd.as_mut().ok_or_else(|| null("out_rmsd"))? = r.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Loads a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_model_load(path_: *const c_char, out: *mut *mut FlowcrystModel) -> FlowcrystStatus {
    guard(|| {
        let slot = out.as_mut().ok_or_else(|| null("out"))?;
        let (model, _) = checkpoint::load(path(path_)?)?;
        *slot = Box::into_raw(Box::new(FlowcrystModel(model)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn flowcryst_model_free(model: *mut FlowcrystModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// `FLOWCRYST_TASK_CSP` or `FLOWCRYST_TASK_DNG`; -1 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_model_task(model: *const FlowcrystModel) -> i32 {
    match model.as_ref().map(|m| m.0.task()) {
        Some(Task::Csp) => FLOWCRYST_TASK_CSP,
        Some(Task::Dng) => FLOWCRYST_TASK_DNG,
        None => -1,
    }
}

/// Largest atom count the model accepts; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_model_max_atoms(model: *const FlowcrystModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.max_atoms)
}

/// Loads a prior JSON file written by `flowcryst fit-base`.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_prior_load(path_: *const c_char, out: *mut *mut FlowcrystPrior) -> FlowcrystStatus {
    guard(|| {
        let slot = out.as_mut().ok_or_else(|| null("out"))?;
        let p = PriorArtifact::load(path(path_)?)?;
        *slot = Box::into_raw(Box::new(FlowcrystPrior(p)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn flowcryst_prior_free(prior: *mut FlowcrystPrior) {
    if !prior.is_null() {
        drop(Box::from_raw(prior));
    }
}

unsafe fn write_sample(
    s: &Sample,
    out_frac: *mut f64,
    out_lattice: *mut f64,
    out_valid: *mut i32,
) -> Result<(), Fail> {
    slice_mut(out_frac, 3 * s.kinds.len(), "out_frac")?.copy_from_slice(s.frac.coords().as_flattened());
    let l = slice_mut(out_lattice, 6, "out_lattice")?;
    l[..3].copy_from_slice(&s.lengths);
    l[3..].copy_from_slice(&s.angles);
    *out_valid.as_mut().ok_or_else(|| null("out_valid"))? = s.is_valid() as i32;
    Ok(())
}

/// Predicts a structure for a composition of `n_atoms` atoms.
///
/// Writes `n_atoms × 3` coordinates, six lattice parameters and a validity flag.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_reconstruct(
    model: *const FlowcrystModel,
    prior: *const FlowcrystPrior,
    atomic_numbers: *const i32,
    n_atoms: usize,
    cfg: *const FlowcrystIntegration,
    out_frac: *mut f64,
    out_lattice: *mut f64,
    out_valid: *mut i32,
) -> FlowcrystStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let prior = &prior.as_ref().ok_or_else(|| null("prior"))?.0;
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let kinds = slice(atomic_numbers, n_atoms, "atomic_numbers")?
            .iter()
            .map(|&z| AtomTypes::kind_from_atomic_number(z as i64))
            .collect::<Result<Vec<_>, _>>()?;
        let mut rng = stream_rng(cfg.seed, 0);
        let s = reconstruct_csp(model, &kinds, &prior.length_prior, &integration(cfg), &mut rng)?;
        write_sample(&s, out_frac, out_lattice, out_valid)
    })
}

/// Generates one crystal de novo into buffers holding up to `capacity` atoms.
///
/// `*out_n_atoms` always receives the generated size; when it exceeds
/// `capacity` nothing else is written and `BufferTooSmall` is returned.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_sample(
    model: *const FlowcrystModel,
    prior: *const FlowcrystPrior,
    cfg: *const FlowcrystIntegration,
    capacity: usize,
    out_n_atoms: *mut usize,
    out_atomic_numbers: *mut i32,
    out_frac: *mut f64,
    out_lattice: *mut f64,
    out_valid: *mut i32,
) -> FlowcrystStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let prior = &prior.as_ref().ok_or_else(|| null("prior"))?.0;
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let n_slot = out_n_atoms.as_mut().ok_or_else(|| null("out_n_atoms"))?;
        let mut rng = stream_rng(cfg.seed, 0);
        let s = generate_dng(model, &prior.atom_counts, &prior.length_prior, &integration(cfg), &mut rng)?;
        *n_slot = s.kinds.len();
        if s.kinds.len() > capacity {
            return Err(Fail(
                FlowcrystStatus::BufferTooSmall,
                format!("{} atoms generated, capacity {capacity}", s.kinds.len()),
            ));
        }
        let z = slice_mut(out_atomic_numbers, s.kinds.len(), "out_atomic_numbers")?;
        for (o, &k) in z.iter_mut().zip(&s.kinds) {
            *o = AtomTypes::atomic_number(k) as i32;
        }
        write_sample(&s, out_frac, out_lattice, out_valid)
    })
}

/// Runs the built-in invariant checks; `*out_failed` receives the number of failures.
#[no_mangle]
pub unsafe extern "C" fn flowcryst_selfcheck(out_failed: *mut usize) -> FlowcrystStatus {
    guard(|| {
        let slot = out_failed.as_mut().ok_or_else(|| null("out_failed"))?;
        let results = flowcryst::selfcheck::run_all();
        let failed: Vec<&str> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| *n).collect();
        *slot = failed.len();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Fail(FlowcrystStatus::Runtime, format!("failed checks: {}", failed.join(", "))))
        }
    })
}
