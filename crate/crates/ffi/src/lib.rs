//! C ABI over `residual_lab`.
//!
//! Every fallible function returns an [`RlStatus`]. On failure a message is
//! stored per thread and can be copied out with [`rl_last_error`]. Handles
//! come from the `*_new` functions and must be released with the matching
//! `*_free`. Buffers are row-major `double` arrays whose lengths are passed
//! explicitly and checked.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use residual_lab::adam::{AdamHyper, AdamState};
use residual_lab::theory::theory_curves;
use residual_lab::wiring::{ForwardTrace, GradReport, Network, NetworkConfig, Variant};
use residual_lab::{LabError, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Numeric = 4,
    /// Backward or gradient query without a matching earlier pass.
    OutOfOrder = 5,
    Panic = 6,
}

/// Values accepted by the `variant` parameters.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlVariant {
    PostLn = 0,
    PreLn = 1,
    Residual = 2,
}

/// A network together with its most recent forward trace and gradients.
pub struct RlNetwork {
    net: Network,
    trace: Option<ForwardTrace>,
    report: Option<GradReport>,
}

pub struct RlAdam {
    state: AdamState,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Fail {
    status: RlStatus,
    msg: String,
}

impl Fail {
    fn new(status: RlStatus, msg: impl Into<String>) -> Self {
        Self { status, msg: msg.into() }
    }
}

fn lab_status(e: &LabError) -> RlStatus {
    match e {
        LabError::Shape { .. } => RlStatus::Shape,
        LabError::DegenerateRow { .. } | LabError::NonFinite(_) | LabError::Overflow => RlStatus::Numeric,
        LabError::Stale => RlStatus::OutOfOrder,
        LabError::Layer { source, .. } => lab_status(source),
        _ => RlStatus::InvalidArgument,
    }
}

impl From<LabError> for Fail {
    fn from(e: LabError) -> Self {
        Fail::new(lab_status(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RlStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (RlStatus::Ok, String::new()),
        Ok(Err(fail)) => (fail.status, fail.msg),
        Err(_) => (RlStatus::Panic, "internal panic".to_owned()),
    };
    LAST_ERROR.with(|m| *m.borrow_mut() = msg);
    status
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::new(RlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::new(RlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::new(RlStatus::NullPointer, "null handle"))
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<(), Fail> {
    if got != want {
        return Err(Fail::new(RlStatus::Shape, format!("{what}: length {got}, expected {want}")));
    }
    Ok(())
}

fn variant(v: i32) -> Result<Variant, Fail> {
    match v {
        0 => Ok(Variant::PostLn),
        1 => Ok(Variant::PreLn),
        2 => Ok(Variant::Residual),
        _ => Err(Fail::new(RlStatus::InvalidArgument, format!("unknown variant {v}"))),
    }
}

fn boxed_network(cfg: NetworkConfig, out: *mut *mut RlNetwork) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::new(RlStatus::NullPointer, "out is null"));
    }
    let net = Network::new(cfg)?;
    let h = Box::new(RlNetwork {
        net,
        trace: None,
        report: None,
    });
    // SAFETY: checked non-null above; the caller provides writable storage.
    unsafe { *out = Box::into_raw(h) };
    Ok(())
}

/// Analysis-initialized network (zero query weights, alternating attention
/// and linear feed-forward blocks). `variant` takes an [`RlVariant`] value.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn rl_network_new(
    variant_id: i32,
    depth: usize,
    width: usize,
    seq_len: usize,
    seed: u64,
    out: *mut *mut RlNetwork,
) -> RlStatus {
    guard(|| {
        let v = variant(variant_id)?;
        boxed_network(NetworkConfig::analysis(v, depth, width, seq_len, seed), out)
    })
}

/// Network from a JSON config with the keys `variant`, `depth`, `width`,
/// `seq_len`, `hidden`, `blocks` (one kind per block), `init`, `ln_mode`,
/// `seed`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rl_network_from_json(json: *const c_char, out: *mut *mut RlNetwork) -> RlStatus {
    guard(|| {
        if json.is_null() {
            return Err(Fail::new(RlStatus::NullPointer, "json is null"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| Fail::new(RlStatus::InvalidArgument, "json is not UTF-8"))?;
        boxed_network(NetworkConfig::from_json(text)?, out)
    })
}

/// # Safety
/// `net` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rl_network_free(net: *mut RlNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of blocks; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rl_network_depth(net: *const RlNetwork) -> usize {
    net.as_ref().map_or(0, |h| h.net.depth())
}

/// Width `d`; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rl_network_width(net: *const RlNetwork) -> usize {
    net.as_ref().map_or(0, |h| h.net.config().width)
}

/// Runs `x` (`rows × width`, `len = rows·width`) through the network and
/// writes `y` (same length). Keeps the trace for [`rl_network_backward`].
///
/// # Safety
/// `x` and `y` must hold `len` and `y_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rl_network_forward(
    net: *mut RlNetwork,
    x: *const f64,
    len: usize,
    y: *mut f64,
    y_len: usize,
) -> RlStatus {
    guard(|| {
        let h = handle(net)?;
        h.trace = None;
        h.report = None;
        let d = h.net.config().width;
        if len == 0 || len % d != 0 {
            return Err(Fail::new(RlStatus::Shape, format!("input length {len} is not a multiple of width {d}")));
        }
        expect_len(y_len, len, "output")?;
        let x = Tensor::new(vec![len / d, d], input(x, len, "x")?.to_vec())?;
        let out = output(y, y_len, "y")?;
        let trace = h.net.forward(&x)?;
        out.copy_from_slice(trace.output.data());
        h.trace = Some(trace);
        Ok(())
    })
}

/// Backpropagates `dy = ∂L/∂y` through the last forward pass and writes the
/// per-block Frobenius norms of the weight gradients (`n = depth`). For
/// ResiDual, `post_norms` / `dual_norms` receive the two path components;
/// either may be null. For other wirings they must be null.
///
/// # Safety
/// Non-null buffers must hold `len` / `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn rl_network_backward(
    net: *mut RlNetwork,
    dy: *const f64,
    len: usize,
    total_norms: *mut f64,
    post_norms: *mut f64,
    dual_norms: *mut f64,
    n: usize,
) -> RlStatus {
    guard(|| {
        let h = handle(net)?;
        let trace = h
            .trace
            .as_ref()
            .ok_or_else(|| Fail::new(RlStatus::OutOfOrder, "backward before forward"))?;
        expect_len(len, trace.output.len(), "dy")?;
        expect_len(n, h.net.depth(), "norm buffers")?;
        let residual = h.net.variant() == Variant::Residual;
        if !residual && (!post_norms.is_null() || !dual_norms.is_null()) {
            return Err(Fail::new(RlStatus::InvalidArgument, "path components exist only for ResiDual"));
        }
        let dy = Tensor::new(trace.output.shape().to_vec(), input(dy, len, "dy")?.to_vec())?;
        let rep = h.net.backward(&dy, trace)?;
        output(total_norms, n, "total_norms")?.copy_from_slice(&rep.block_norms());
        if !post_norms.is_null() {
            let post: Vec<f64> = rep.blocks.iter().map(|b| b.post_norm().unwrap_or(0.0)).collect();
            output(post_norms, n, "post_norms")?.copy_from_slice(&post);
        }
        if !dual_norms.is_null() {
            let dual: Vec<f64> = rep.blocks.iter().map(|b| b.dual_norm().unwrap_or(0.0)).collect();
            output(dual_norms, n, "dual_norms")?.copy_from_slice(&dual);
        }
        h.report = Some(rep);
        Ok(())
    })
}

/// Copies `∂L/∂x` from the last backward pass.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rl_network_input_grad(net: *mut RlNetwork, out: *mut f64, len: usize) -> RlStatus {
    guard(|| {
        let h = handle(net)?;
        let rep = h
            .report
            .as_ref()
            .ok_or_else(|| Fail::new(RlStatus::OutOfOrder, "no backward pass yet"))?;
        expect_len(len, rep.input.len(), "input gradient")?;
        output(out, len, "out")?.copy_from_slice(rep.input.data());
        Ok(())
    })
}

/// Fresh Adam state for `len` coordinates.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn rl_adam_new(
    len: usize,
    alpha: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    out: *mut *mut RlAdam,
) -> RlStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::new(RlStatus::NullPointer, "out is null"));
        }
        if len == 0 || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) || !(alpha >= 0.0) {
            return Err(Fail::new(RlStatus::InvalidArgument, "need len > 0, betas in [0, 1), eps > 0, alpha >= 0"));
        }
        let hyper = AdamHyper { alpha, beta1, beta2, eps };
        *out = Box::into_raw(Box::new(RlAdam {
            state: AdamState::new(&[len], hyper),
        }));
        Ok(())
    })
}

/// # Safety
/// `adam` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rl_adam_free(adam: *mut RlAdam) {
    if !adam.is_null() {
        drop(Box::from_raw(adam));
    }
}

/// Advances the moments with `g` and writes the update `u` (apply as
/// `w -= u`).
///
/// # Safety
/// `g` and `u` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rl_adam_update(adam: *mut RlAdam, g: *const f64, u: *mut f64, len: usize) -> RlStatus {
    guard(|| {
        let h = handle(adam)?;
        expect_len(len, h.state.first_moment().len(), "gradient")?;
        let g = Tensor::new(vec![len], input(g, len, "g")?.to_vec())?;
        let out = output(u, len, "u")?;
        out.copy_from_slice(h.state.update(&g)?.data());
        Ok(())
    })
}

/// Condition number of the next update evaluated at `g`, without advancing
/// the state.
///
/// # Safety
/// `g` must hold `len` doubles; `kappa` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rl_adam_kappa(adam: *const RlAdam, g: *const f64, len: usize, kappa: *mut f64) -> RlStatus {
    guard(|| {
        let h = adam.as_ref().ok_or_else(|| Fail::new(RlStatus::NullPointer, "null handle"))?;
        let out = kappa
            .as_mut()
            .ok_or_else(|| Fail::new(RlStatus::NullPointer, "kappa is null"))?;
        expect_len(len, h.state.first_moment().len(), "gradient")?;
        let g = Tensor::new(vec![len], input(g, len, "g")?.to_vec())?;
        *out = h.state.kappa(&g)?;
        Ok(())
    })
}

/// Closed-form gradient-norm estimate for blocks `1..=depth` (`n = depth`).
///
/// # Safety
/// `out` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn rl_theory_curve(variant_id: i32, depth: usize, out: *mut f64, n: usize) -> RlStatus {
    guard(|| {
        let v = variant(variant_id)?;
        expect_len(n, depth, "curve buffer")?;
        let pts = theory_curves(v, depth)?;
        let buf = output(out, n, "out")?;
        for (b, p) in buf.iter_mut().zip(&pts) {
            *b = p.value;
        }
        Ok(())
    })
}

/// Copies the calling thread's last error message (NUL-terminated, truncated
/// to `cap − 1` bytes) and returns its full length in bytes. An empty
/// message means the last call succeeded.
///
/// # Safety
/// `buf` must be null or hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn rl_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|m| {
        let msg = m.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
