//! C interface to `rank1-lab`.
//!
//! Instances and trees are handed out as opaque pointers that the caller
//! releases with the matching `*_free` function. Every fallible call
//! returns an [`R1Status`]; on failure the message of the underlying error
//! is kept per thread and can be copied out with [`r1_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::ptr;
use std::slice;

use rank1_lab::construction::{check_tree, OracleMode, Schedule, Tree, TreeConfig, TreeParams};
use rank1_lab::dimension::{frostman_lower_bound, hausdorff_bounds, paper_density_schedule, DiameterMode};
use rank1_lab::error::Error;
use rank1_lab::group::UPoint;
use rank1_lab::height::{height_at, CuspOrbitState};
use rank1_lab::params::{lookup, RankOneParams};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum R1Status {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownInstance = 3,
    Validation = 4,
    NoJoinFound = 5,
    CapExceeded = 6,
    Numeric = 7,
    Panic = 8,
}

/// A registry instance.
pub struct R1Params {
    inner: RankOneParams,
}

/// A built tree.
pub struct R1Tree {
    inner: Tree,
}

/// Oracle used to join consecutive stages.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum R1Mode {
    Synthetic = 0,
    Sl2 = 1,
}

/// Bounds on the dimension of the points diverging on average.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct R1DimBounds {
    pub lower: f64,
    pub upper: f64,
    /// NaN when only bounds are known.
    pub exact: f64,
    pub conjecture: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> R1Status {
    match e {
        Error::UnknownInstance(_) => R1Status::UnknownInstance,
        Error::Validation(_) => R1Status::Validation,
        Error::NoJoinFound { .. } => R1Status::NoJoinFound,
        Error::CapExceeded { .. } => R1Status::CapExceeded,
        Error::NumericFloor(_) | Error::ExponentOverflow(_) | Error::SingularCell(_) => R1Status::Numeric,
        _ => R1Status::InvalidArgument,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), (R1Status, String)>>(f: F) -> R1Status {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(Ok(())) => R1Status::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside rank1-lab".into());
            R1Status::Panic
        }
    }
}

fn lib<T>(r: rank1_lab::error::Result<T>) -> Result<T, (R1Status, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (R1Status, String) {
    (R1Status::NullPointer, format!("{what} is null"))
}

unsafe fn params_ref<'a>(p: *const R1Params) -> Result<&'a RankOneParams, (R1Status, String)> {
    p.as_ref().map(|p| &p.inner).ok_or_else(|| null("params"))
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn r1_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Look up a registry instance (`rhck<n>`, `rhp<n>`, `su21`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn r1_params_lookup(name: *const c_char, out: *mut *mut R1Params) -> R1Status {
    guard(|| {
        if name.is_null() {
            return Err(null("name"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let name = CStr::from_ptr(name).to_str().map_err(|_| (R1Status::InvalidArgument, "name is not UTF-8".to_string()))?;
        let inner = lib(lookup(name))?;
        *out = Box::into_raw(Box::new(R1Params { inner }));
        Ok(())
    })
}

/// # Safety
/// `p` must come from [`r1_params_lookup`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn r1_params_free(p: *mut R1Params) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// `p1`, `p2` and the maximal entropy `h_m = p1/2 + p2`.
///
/// # Safety
/// `p` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn r1_params_dims(p: *const R1Params, p1: *mut usize, p2: *mut usize, h_m: *mut f64) -> R1Status {
    guard(|| {
        let p = params_ref(p)?;
        if let Some(o) = p1.as_mut() {
            *o = p.p1;
        }
        if let Some(o) = p2.as_mut() {
            *o = p.p2;
        }
        if let Some(o) = h_m.as_mut() {
            *o = p.h_m();
        }
        Ok(())
    })
}

/// # Safety
/// `p` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn r1_hausdorff_bounds(p: *const R1Params, out: *mut R1DimBounds) -> R1Status {
    guard(|| {
        let p = params_ref(p)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let b = hausdorff_bounds(p);
        *out = R1DimBounds { lower: b.lower, upper: b.upper, exact: b.exact.unwrap_or(f64::NAN), conjecture: b.conjecture };
        Ok(())
    })
}

/// Cusp height after `k` steps of the orbit with A-coordinate `r` and
/// U-part `(z, x)` (`nz = p2`, `nx = p1` entries).
///
/// # Safety
/// `z` and `x` must point to `nz` and `nx` readable doubles (or be null
/// when the count is zero); `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn r1_height_at(
    p: *const R1Params,
    r: f64,
    z: *const f64,
    nz: usize,
    x: *const f64,
    nx: usize,
    k: u64,
    out: *mut f64,
) -> R1Status {
    guard(|| {
        let p = params_ref(p)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if nz != p.p2 || nx != p.p1 {
            return Err((R1Status::InvalidArgument, format!("expected {} Z and {} X coordinates", p.p2, p.p1)));
        }
        let read = |v: *const f64, n: usize| -> Result<Vec<f64>, (R1Status, String)> {
            if n == 0 {
                Ok(Vec::new())
            } else if v.is_null() {
                Err(null("coordinate array"))
            } else {
                Ok(slice::from_raw_parts(v, n).to_vec())
            }
        };
        if !(r > 0.0 && r.is_finite()) {
            return Err((R1Status::InvalidArgument, format!("r = {r} must be positive")));
        }
        let st = CuspOrbitState::unipotent(r, UPoint::new(read(z, nz)?, read(x, nx)?));
        *out = height_at(&st, k);
        Ok(())
    })
}

/// Running Frostman ratio at stage `n` for the growing schedule with
/// joining time `rprime`, using the quoted diameter bound.
///
/// # Safety
/// `p` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn r1_frostman_ratio(p: *const R1Params, n: u32, rprime: u32, out: *mut f64) -> R1Status {
    guard(|| {
        let p = params_ref(p)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let tp = lib(TreeParams::new(p, 0.4, 1.0, rprime, Schedule::Paper))?;
        let ds = lib(paper_density_schedule(p, &tp, n, DiameterMode::PaperBound))?;
        let fb = lib(frostman_lower_bound(&ds, p.dim_u() as f64, None))?;
        *out = *fb.ratios.last().expect("n >= 1");
        Ok(())
    })
}

/// Build a tree of the given depth. `rprime = 0` lets the SL2 oracle pick
/// the joining time; synthetic trees need an explicit one.
///
/// # Safety
/// `p` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn r1_tree_build(
    p: *const R1Params,
    depth: u32,
    mode: R1Mode,
    seed: u64,
    rprime: u32,
    out: *mut *mut R1Tree,
) -> R1Status {
    guard(|| {
        let p = params_ref(p)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mode = match mode {
            R1Mode::Synthetic => OracleMode::Synthetic,
            R1Mode::Sl2 => OracleMode::Sl2,
        };
        let mut cfg = TreeConfig::new(depth, mode, seed);
        cfg.rprime = match (mode, rprime) {
            (OracleMode::Synthetic, 0) => return Err((R1Status::InvalidArgument, "synthetic trees need rprime > 0".into())),
            (OracleMode::Sl2, 0) => None,
            (_, r) => Some(r),
        };
        let inner = lib(Tree::build(p, &cfg))?;
        *out = Box::into_raw(Box::new(R1Tree { inner }));
        Ok(())
    })
}

/// # Safety
/// `t` must come from [`r1_tree_build`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn r1_tree_free(t: *mut R1Tree) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of nodes at `depth` (1-based) and the joining time used.
///
/// # Safety
/// `t` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn r1_tree_info(t: *const R1Tree, depth: u32, nodes: *mut usize, rprime: *mut u32) -> R1Status {
    guard(|| {
        let t = &t.as_ref().ok_or_else(|| null("tree"))?.inner;
        if depth == 0 || depth > t.depth() {
            return Err((R1Status::InvalidArgument, format!("depth {depth} outside 1..={}", t.depth())));
        }
        if let Some(o) = nodes.as_mut() {
            *o = t.level(depth).len();
        }
        if let Some(o) = rprime.as_mut() {
            *o = t.tp.rprime;
        }
        Ok(())
    })
}

/// Coordinates `(Z, X)` of node `id` at `depth`, written to `buf`
/// (`len >= p1 + p2`).
///
/// # Safety
/// `t` must be a live handle and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn r1_tree_point(t: *const R1Tree, depth: u32, id: usize, buf: *mut f64, len: usize) -> R1Status {
    guard(|| {
        let t = &t.as_ref().ok_or_else(|| null("tree"))?.inner;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if depth == 0 || depth > t.depth() || id >= t.level(depth).len() {
            return Err((R1Status::InvalidArgument, format!("no node {id} at depth {depth}")));
        }
        let dim = t.params.dim_u();
        if len < dim {
            return Err((R1Status::InvalidArgument, format!("buffer holds {len} < {dim} values")));
        }
        let g = t.g(depth, id);
        let out = slice::from_raw_parts_mut(buf, dim);
        for (o, v) in out.iter_mut().zip(g.z.iter().chain(&g.x)) {
            *o = *v;
        }
        Ok(())
    })
}

/// Run the structural checks; `passed` receives 1 or 0. A failed check is
/// not an error: the call still returns `Ok`.
///
/// # Safety
/// `t` must be a live handle and `passed` valid.
#[no_mangle]
pub unsafe extern "C" fn r1_tree_check(t: *const R1Tree, seed: u64, passed: *mut i32) -> R1Status {
    guard(|| {
        let t = &t.as_ref().ok_or_else(|| null("tree"))?.inner;
        let passed = passed.as_mut().ok_or_else(|| null("passed"))?;
        let rep = check_tree(t, seed);
        if let Some(f) = rep.first_failure() {
            set_error(f);
        }
        *passed = rep.passed() as i32;
        Ok(())
    })
}
