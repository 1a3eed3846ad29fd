//! C ABI over the `nlroi` crate.
//!
//! Every fallible function returns an [`NlroiStatus`]; on failure the message
//! is available from [`nlroi_last_error_message`] on the same thread.
//! Objects are opaque handles created by `*_new`/`*_load`/`*_forward`/
//! `*_backward` and released with the matching `*_free`. Tensors cross the
//! boundary as row-major `double` buffers with an explicit element count.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nlroi::weights::{load_weights, save_weights};
use nlroi::{
    nlroi_backward, nlroi_forward, nlroi_reference, DiagonalMask, Error, ForwardCache, NlRoiConfig,
    NlRoiParams, Prng, Scaling, Tensor,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlroiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    DegenerateAttention = 4,
    Numerical = 5,
    Config = 6,
    Format = 7,
    Corruption = 8,
    Io = 9,
    Internal = 10,
}

/// `NlroiConfig::scaling`: divide scores by `√D_f`.
pub const NLROI_SCALING_PER_CHANNEL: u32 = 0;
/// `NlroiConfig::scaling`: divide scores by `√(D_f·H·W)`.
pub const NLROI_SCALING_FULL_FLATTEN: u32 = 1;
/// `NlroiConfig::diagonal_mask`: self weight is exactly zero.
pub const NLROI_MASK_EXCLUDE: u32 = 0;
/// `NlroiConfig::diagonal_mask`: diagonal score replaced by 0 (debug).
pub const NLROI_MASK_ZERO_SCORE: u32 = 1;

/// Operator hyperparameters, mirroring the Rust `NlRoiConfig`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NlroiConfig {
    pub d: usize,
    pub d_f: usize,
    pub d_mid: usize,
    pub d_g: usize,
    pub h: usize,
    pub w: usize,
    pub attend_to_self: bool,
    /// One of the `NLROI_SCALING_*` values.
    pub scaling: u32,
    /// One of the `NLROI_MASK_*` values.
    pub diagonal_mask: u32,
}

impl From<NlRoiConfig> for NlroiConfig {
    fn from(c: NlRoiConfig) -> Self {
        NlroiConfig {
            d: c.d,
            d_f: c.d_f,
            d_mid: c.d_mid,
            d_g: c.d_g,
            h: c.h,
            w: c.w,
            attend_to_self: c.attend_to_self,
            scaling: match c.scaling {
                Scaling::PerChannel => NLROI_SCALING_PER_CHANNEL,
                Scaling::FullFlatten => NLROI_SCALING_FULL_FLATTEN,
            },
            diagonal_mask: match c.diagonal_mask {
                DiagonalMask::Exclude => NLROI_MASK_EXCLUDE,
                DiagonalMask::ZeroScore => NLROI_MASK_ZERO_SCORE,
            },
        }
    }
}

fn to_config(c: NlroiConfig) -> Result<NlRoiConfig, Failure> {
    {
        let config = NlRoiConfig {
            d: c.d,
            d_f: c.d_f,
            d_mid: c.d_mid,
            d_g: c.d_g,
            h: c.h,
            w: c.w,
            attend_to_self: c.attend_to_self,
            scaling: match c.scaling {
                NLROI_SCALING_PER_CHANNEL => Scaling::PerChannel,
                NLROI_SCALING_FULL_FLATTEN => Scaling::FullFlatten,
                other => return Err(invalid(format!("unknown scaling mode {other}"))),
            },
            diagonal_mask: match c.diagonal_mask {
                NLROI_MASK_EXCLUDE => DiagonalMask::Exclude,
                NLROI_MASK_ZERO_SCORE => DiagonalMask::ZeroScore,
                other => return Err(invalid(format!("unknown diagonal mask {other}"))),
            },
        };
        config.validate()?;
        Ok(config)
    }
}

/// Configuration plus learnable parameters.
pub struct NlroiOperator {
    config: NlRoiConfig,
    params: NlRoiParams,
}

/// Intermediates of one forward pass, consumed by the backward pass.
pub struct NlroiCache {
    cache: ForwardCache,
}

/// Gradients of one backward pass.
pub struct NlroiGrads {
    dx: Tensor,
    params: NlRoiParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

struct Failure(NlroiStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension(_) => NlroiStatus::Dimension,
            Error::DegenerateAttention(_) => NlroiStatus::DegenerateAttention,
            Error::Numerical(_) | Error::Divergence { .. } => NlroiStatus::Numerical,
            Error::Config(_) | Error::Parse { .. } | Error::InsufficientData(_) => {
                NlroiStatus::Config
            }
            Error::Format(_) => NlroiStatus::Format,
            Error::Corruption(_) => NlroiStatus::Corruption,
            Error::Io { .. } => NlroiStatus::Io,
            Error::Resource(_) => NlroiStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(NlroiStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(message: String) -> Failure {
    Failure(NlroiStatus::InvalidArgument, message)
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> NlroiStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            NlroiStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            NlroiStatus::Internal
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn copy_out(src: &Tensor, dst: &mut [f64], what: &str) -> Result<(), Failure> {
    if src.len() != dst.len() {
        return Err(invalid(format!(
            "{what}: buffer holds {} values, {} needed",
            dst.len(),
            src.len()
        )));
    }
    dst.copy_from_slice(src.data());
    Ok(())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

fn param<'a>(params: &'a NlRoiParams, name: &str) -> Result<&'a Tensor, Failure> {
    params
        .tensors()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| invalid(format!("no parameter named `{name}`")))
}

fn blob(op: &NlroiOperator, x: &[f64], n: usize) -> Result<Tensor, Failure> {
    let c = &op.config;
    Ok(Tensor::new(vec![n, c.d, c.h, c.w], x.to_vec())?)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn nlroi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Default configuration for `d` input channels and an `h`×`w` grid.
#[no_mangle]
pub extern "C" fn nlroi_config_default(d: usize, h: usize, w: usize) -> NlroiConfig {
    NlRoiConfig::new(d, h, w).into()
}

/// Creates an operator with freshly initialized parameters.
///
/// # Safety
/// `config` must point to a valid config and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn nlroi_operator_new(
    config: *const NlroiConfig,
    seed: u64,
    out: *mut *mut NlroiOperator,
) -> NlroiStatus {
    guard(|| {
        let config = to_config(*borrow(config, "config")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let params = NlRoiParams::init(&config, &mut Prng::new(seed));
        *out = Box::into_raw(Box::new(NlroiOperator { config, params }));
        Ok(())
    })
}

/// # Safety
/// `op` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nlroi_operator_free(op: *mut NlroiOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// # Safety
/// `op` must be a live operator handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nlroi_operator_config(
    op: *const NlroiOperator,
    out: *mut NlroiConfig,
) -> NlroiStatus {
    guard(|| {
        let op = borrow(op, "op")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = op.config.into();
        Ok(())
    })
}

/// Number of `double`s in the output for `n` RoIs: `n·(D+D_g)·H·W`.
///
/// # Safety
/// `op` must be a live operator handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn nlroi_operator_output_len(op: *const NlroiOperator, n: usize) -> usize {
    match op.as_ref() {
        Some(op) => n * op.config.output_channels() * op.config.h * op.config.w,
        None => 0,
    }
}

/// Forward pass over `n` RoIs. `x` holds `n·D·H·W` values and `out` has
/// room for `out_len` values. When `cache_out` is non-null a cache handle for
/// [`nlroi_operator_backward`] is stored there.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn nlroi_operator_forward(
    op: *const NlroiOperator,
    x: *const f64,
    x_len: usize,
    n: usize,
    out: *mut f64,
    out_len: usize,
    cache_out: *mut *mut NlroiCache,
) -> NlroiStatus {
    guard(|| {
        let op = borrow(op, "op")?;
        let x = blob(op, input(x, x_len, "x")?, n)?;
        let (y, cache) = nlroi_forward(&x, &op.params, &op.config)?;
        copy_out(&y, output(out, out_len, "out")?, "out")?;
        if !cache_out.is_null() {
            *cache_out = Box::into_raw(Box::new(NlroiCache { cache }));
        }
        Ok(())
    })
}

/// Loop-level reference implementation with the same contract as the forward pass.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn nlroi_operator_reference(
    op: *const NlroiOperator,
    x: *const f64,
    x_len: usize,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> NlroiStatus {
    guard(|| {
        let op = borrow(op, "op")?;
        let x = blob(op, input(x, x_len, "x")?, n)?;
        let y = nlroi_reference(&x, &op.params, &op.config)?;
        copy_out(&y, output(out, out_len, "out")?, "out")
    })
}

/// # Safety
/// `cache` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nlroi_cache_free(cache: *mut NlroiCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// Backward pass for the upstream gradient `d_out` (same layout as the
/// forward output).
///
/// # Safety
/// `op` and `cache` must be live handles, `d_out` valid for `d_out_len`
/// values and `grads_out` writable.
#[no_mangle]
pub unsafe extern "C" fn nlroi_operator_backward(
    op: *const NlroiOperator,
    cache: *const NlroiCache,
    d_out: *const f64,
    d_out_len: usize,
    grads_out: *mut *mut NlroiGrads,
) -> NlroiStatus {
    guard(|| {
        let op = borrow(op, "op")?;
        let cache = &borrow(cache, "cache")?.cache;
        if grads_out.is_null() {
            return Err(null("grads_out"));
        }
        let shape = {
            let mut s = cache.x.shape().to_vec();
            s[1] = op.config.output_channels();
            s
        };
        let d_out = Tensor::new(shape, input(d_out, d_out_len, "d_out")?.to_vec())?;
        let (dx, params) = nlroi_backward(cache, &op.params, &op.config, &d_out)?;
        *grads_out = Box::into_raw(Box::new(NlroiGrads { dx, params }));
        Ok(())
    })
}

/// # Safety
/// `grads` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nlroi_grads_free(grads: *mut NlroiGrads) {
    if !grads.is_null() {
        drop(Box::from_raw(grads));
    }
}

/// Copies the input gradient (`n·D·H·W` values).
///
/// # Safety
/// `grads` must be live and `dst` valid for `len` values.
#[no_mangle]
pub unsafe extern "C" fn nlroi_grads_input(
    grads: *const NlroiGrads,
    dst: *mut f64,
    len: usize,
) -> NlroiStatus {
    guard(|| {
        let g = borrow(grads, "grads")?;
        copy_out(&g.dx, output(dst, len, "dst")?, "dx")
    })
}

/// Copies the gradient of the parameter `name` (`w_phi`, `b_phi`, `w_psi`,
/// `b_psi`, `w_g1`, `b_g1`, `w_g2`, `b_g2`).
///
/// # Safety
/// `grads` must be live, `name` a NUL-terminated string and `dst` valid for `len` values.
#[no_mangle]
pub unsafe extern "C" fn nlroi_grads_param(
    grads: *const NlroiGrads,
    name: *const c_char,
    dst: *mut f64,
    len: usize,
) -> NlroiStatus {
    guard(|| {
        let g = borrow(grads, "grads")?;
        let name = c_str(name, "name")?;
        copy_out(param(&g.params, name)?, output(dst, len, "dst")?, name)
    })
}

/// Stores the element count of parameter `name` in `len_out`.
///
/// # Safety
/// `op` must be live, `name` NUL-terminated and `len_out` writable.
#[no_mangle]
pub unsafe extern "C" fn nlroi_operator_param_len(
    op: *const NlroiOperator,
    name: *const c_char,
    len_out: *mut usize,
) -> NlroiStatus {
    guard(|| {
        let op = borrow(op, "op")?;
        let t = param(&op.params, c_str(name, "name")?)?;
        if len_out.is_null() {
            return Err(null("len_out"));
        }
        *len_out = t.len();
        Ok(())
    })
}

/// Copies parameter `name` into `dst`.
///
/// # Safety
/// `op` must be live, `name` NUL-terminated and `dst` valid for `len` values.
#[no_mangle]
pub unsafe extern "C" fn nlroi_operator_get_param(
    op: *const NlroiOperator,
    name: *const c_char,
    dst: *mut f64,
    len: usize,
) -> NlroiStatus {
    guard(|| {
        let op = borrow(op, "op")?;
        let name = c_str(name, "name")?;
        copy_out(param(&op.params, name)?, output(dst, len, "dst")?, name)
    })
}

/// Overwrites parameter `name` with `len` values from `src`.
///
/// # Safety
/// `op` must be live, `name` NUL-terminated and `src` valid for `len` values.
#[no_mangle]
pub unsafe extern "C" fn nlroi_operator_set_param(
    op: *mut NlroiOperator,
    name: *const c_char,
    src: *const f64,
    len: usize,
) -> NlroiStatus {
    guard(|| {
        let op = op.as_mut().ok_or_else(|| null("op"))?;
        let name = c_str(name, "name")?;
        let values = input(src, len, "src")?;
        let slot = op
            .params
            .tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| invalid(format!("no parameter named `{name}`")))?;
        if slot.len() != len {
            return Err(invalid(format!(
                "`{name}` holds {} values, got {len}",
                slot.len()
            )));
        }
        slot.data_mut().copy_from_slice(values);
        Ok(())
    })
}

/// Writes the parameters as a weights file.
///
/// # Safety
/// `op` must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn nlroi_operator_save(
    op: *const NlroiOperator,
    path: *const c_char,
) -> NlroiStatus {
    guard(|| {
        let op = borrow(op, "op")?;
        let path = c_str(path, "path")?;
        let named: Vec<(String, Tensor)> = op
            .params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Ok(save_weights(path, &named)?)
    })
}

/// Creates an operator for `config` with parameters read from `path`.
/// Tensors other than the eight operator parameters are ignored.
///
/// # Safety
/// `config` must be valid, `path` NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nlroi_operator_load(
    config: *const NlroiConfig,
    path: *const c_char,
    out: *mut *mut NlroiOperator,
) -> NlroiStatus {
    guard(|| {
        let config = to_config(*borrow(config, "config")?)?;
        let path = c_str(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let tensors = load_weights(path)?;
        let mut params = NlRoiParams::zeros(&config);
        for (name, slot) in params.tensors_mut() {
            let (_, t) = tensors.iter().find(|(n, _)| n == name).ok_or_else(|| {
                Failure(
                    NlroiStatus::Format,
                    format!("weights have no tensor `{name}`"),
                )
            })?;
            *slot = t.clone();
        }
        params.validate(&config)?;
        *out = Box::into_raw(Box::new(NlroiOperator { config, params }));
        Ok(())
    })
}

/// Static name of a status code, e.g. `"NLROI_STATUS_DIMENSION"`, or
/// `"NLROI_STATUS_UNKNOWN"` for values outside the enum.
#[no_mangle]
pub extern "C" fn nlroi_status_name(status: i32) -> *const c_char {
    let s: &'static CStr = match status {
        0 => c"NLROI_STATUS_OK",
        1 => c"NLROI_STATUS_NULL_POINTER",
        2 => c"NLROI_STATUS_INVALID_ARGUMENT",
        3 => c"NLROI_STATUS_DIMENSION",
        4 => c"NLROI_STATUS_DEGENERATE_ATTENTION",
        5 => c"NLROI_STATUS_NUMERICAL",
        6 => c"NLROI_STATUS_CONFIG",
        7 => c"NLROI_STATUS_FORMAT",
        8 => c"NLROI_STATUS_CORRUPTION",
        9 => c"NLROI_STATUS_IO",
        10 => c"NLROI_STATUS_INTERNAL",
        _ => c"NLROI_STATUS_UNKNOWN",
    };
    s.as_ptr()
}
