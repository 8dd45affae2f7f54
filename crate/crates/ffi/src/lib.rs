//! C ABI over the `dit-reuse` library.
//!
//! Models and generation results are opaque heap handles released with their
//! `*_free` function. Every fallible call returns a [`DrStatus`]; on failure
//! [`dr_last_error`] describes what went wrong on the calling thread. Panics
//! are caught at the boundary and reported as [`DrStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dit_reuse::harness::ExperimentConfig;
use dit_reuse::model::{Model, TapId};
use dit_reuse::quality::{psnr, ssim, Decoder};
use dit_reuse::reuse::{ReuseConfig, ReuseMode, DEFAULT_NORM_EPSILON};
use dit_reuse::sampling::{
    generate, generate_baseline, Decision, GenerationResult, SchedulerConfig,
};
use dit_reuse::selection::spearman_rho;
use dit_reuse::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    Numeric = 5,
    InvalidState = 6,
    UndefinedCorrelation = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Proxy tap numbers accepted in [`DrReuseParams::tap`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrTap {
    BlockIn = 1,
    AttnIn = 2,
    AttnOut = 3,
    CrossAttnIn = 4,
    CrossAttnOut = 5,
    MlpIn = 6,
    MlpOut = 7,
    BlockOut = 8,
}

/// Values accepted in [`DrReuseParams::mode`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrReuseMode {
    Aligned = 0,
    Independent = 1,
}

/// Reuse settings. `tap` and `mode` hold [`DrTap`] and [`DrReuseMode`]
/// values; they are plain integers so that out-of-range input is an error
/// rather than undefined behaviour.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DrReuseParams {
    /// Use `INFINITY` to reuse every step after warmup.
    pub threshold: f64,
    pub warmup_fraction: f64,
    pub tap: u32,
    pub mode: u32,
}

/// A toy DiT plus the sampler settings used for every generation.
pub struct DrModel {
    model: Model,
    sched: SchedulerConfig,
}

pub struct DrGeneration {
    result: GenerationResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|e| {
        let pos = e.nul_position();
        CString::new(&e.into_vec()[..pos]).expect("truncated before the first nul")
    });
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> DrStatus {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => DrStatus::Config,
        Error::Dimension { .. } => DrStatus::Dimension,
        Error::Numeric { .. } => DrStatus::Numeric,
        Error::InvalidState(_) => DrStatus::InvalidState,
        Error::Argument(_) => DrStatus::InvalidArgument,
        Error::UndefinedCorrelation(_) => DrStatus::UndefinedCorrelation,
        Error::Io(_) => DrStatus::Io,
    }
}

struct Failure(DrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DrStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DrStatus::InvalidArgument, msg.into())
}

/// Run `f`, translating errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            DrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            DrStatus::Panic
        }
    }
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn model_ref<'a>(p: *const DrModel) -> Result<&'a DrModel, Failure> {
    p.as_ref().ok_or_else(|| null("model"))
}

unsafe fn gen_ref<'a>(p: *const DrGeneration) -> Result<&'a DrGeneration, Failure> {
    p.as_ref().ok_or_else(|| null("generation"))
}

fn reuse_config(p: &DrReuseParams) -> Result<ReuseConfig, Failure> {
    let tap = usize::try_from(p.tap)
        .ok()
        .filter(|t| (1..=8).contains(t))
        .map(|t| TapId::ALL[t - 1])
        .ok_or_else(|| invalid(format!("tap must be 1..=8, got {}", p.tap)))?;
    let mode = match p.mode {
        0 => ReuseMode::Aligned,
        1 => ReuseMode::Independent,
        m => return Err(invalid(format!("mode must be 0 or 1, got {m}"))),
    };
    let cfg = ReuseConfig {
        threshold: p.threshold,
        warmup_fraction: p.warmup_fraction,
        proxy_tap: tap,
        mode,
        norm_epsilon: DEFAULT_NORM_EPSILON,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn boxed_model(cfg: ExperimentConfig) -> Result<*mut DrModel, Failure> {
    let model = Model::new(cfg.model)?;
    Ok(Box::into_raw(Box::new(DrModel {
        model,
        sched: cfg.scheduler,
    })))
}

/// Default toy model, 50 steps, guidance 5.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn dr_model_new_default(out: *mut *mut DrModel) -> DrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed_model(ExperimentConfig::default())?;
        Ok(())
    })
}

/// Build a model from an experiment config document; only its `model` and
/// `scheduler` sections are used.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn dr_model_from_json(
    json: *const c_char,
    out: *mut *mut DrModel,
) -> DrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| invalid(format!("json is not UTF-8: {e}")))?;
        *out = boxed_model(ExperimentConfig::from_json(text)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from a `dr_model_*` constructor and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn dr_model_free(model: *mut DrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn run_generation(
    model: *const DrModel,
    prompt_id: u64,
    params: Option<&DrReuseParams>,
    out: *mut *mut DrGeneration,
) -> DrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = model_ref(model)?;
        let result = match params {
            Some(p) => generate(prompt_id, &m.model, &m.sched, Some(&reuse_config(p)?))?,
            None => generate_baseline(prompt_id, &m.model, &m.sched)?,
        };
        *out = Box::into_raw(Box::new(DrGeneration { result }));
        Ok(())
    })
}

/// Full-compute generation.
///
/// # Safety
/// `model` must be a live handle and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn dr_generate_baseline(
    model: *const DrModel,
    prompt_id: u64,
    out: *mut *mut DrGeneration,
) -> DrStatus {
    run_generation(model, prompt_id, None, out)
}

/// Generation with step reuse.
///
/// # Safety
/// `model` must be a live handle, `params` readable, and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn dr_generate(
    model: *const DrModel,
    prompt_id: u64,
    params: *const DrReuseParams,
    out: *mut *mut DrGeneration,
) -> DrStatus {
    match params.as_ref() {
        Some(p) => run_generation(model, prompt_id, Some(p), out),
        None => guard(|| Err(null("params"))),
    }
}

/// Number of `float`s in the final latent; 0 for a null handle.
///
/// # Safety
/// `gen` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dr_generation_latent_len(gen: *const DrGeneration) -> usize {
    gen.as_ref().map_or(0, |g| g.result.latent.len())
}

/// Write the latent shape (frames, channels, height, width) to `shape[0..4]`.
///
/// # Safety
/// `gen` must be a live handle and `shape` writable for four elements.
#[no_mangle]
pub unsafe extern "C" fn dr_generation_latent_shape(
    gen: *const DrGeneration,
    shape: *mut usize,
) -> DrStatus {
    guard(|| {
        let g = gen_ref(gen)?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        let s = g.result.latent.shape();
        ptr::copy_nonoverlapping(s.as_ptr(), shape, 4);
        Ok(())
    })
}

/// Copy the final latent into `buf`, which must hold `dr_generation_latent_len` floats.
///
/// # Safety
/// `gen` must be a live handle and `buf` writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn dr_generation_copy_latent(
    gen: *const DrGeneration,
    buf: *mut f32,
    len: usize,
) -> DrStatus {
    guard(|| {
        let g = gen_ref(gen)?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let data = g.result.latent.as_slice();
        if len < data.len() {
            return Err(Failure(
                DrStatus::BufferTooSmall,
                format!("buffer holds {len} floats, latent has {}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Reused pass-steps over all pass-steps; NaN for a null handle.
///
/// # Safety
/// `gen` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dr_generation_reuse_ratio(gen: *const DrGeneration) -> f64 {
    gen.as_ref().map_or(f64::NAN, |g| g.result.reuse_ratio())
}

/// Matmul FLOPs charged over the whole run; 0 for a null handle.
///
/// # Safety
/// `gen` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dr_generation_total_flops(gen: *const DrGeneration) -> u64 {
    gen.as_ref().map_or(0, |g| g.result.flops.total())
}

/// # Safety
/// `gen` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dr_generation_n_steps(gen: *const DrGeneration) -> usize {
    gen.as_ref().map_or(0, |g| g.result.n_steps)
}

/// Per-step decisions, 1 = reused and 0 = computed, for the conditional and
/// unconditional passes. Either output may be null to skip it.
///
/// # Safety
/// `gen` must be a live handle; non-null outputs must be writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dr_generation_decisions(
    gen: *const DrGeneration,
    cond: *mut u8,
    uncond: *mut u8,
    len: usize,
) -> DrStatus {
    guard(|| {
        let g = gen_ref(gen)?;
        let n = g.result.steps.len();
        if len < n {
            return Err(Failure(
                DrStatus::BufferTooSmall,
                format!("buffer holds {len} steps, run has {n}"),
            ));
        }
        for (i, s) in g.result.steps.iter().enumerate() {
            if !cond.is_null() {
                *cond.add(i) = u8::from(s.cond == Decision::Reused);
            }
            if !uncond.is_null() {
                *uncond.add(i) = u8::from(s.uncond == Decision::Reused);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `gen` must come from a `dr_generate*` call and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn dr_generation_free(gen: *mut DrGeneration) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// PSNR (dB, capped at 100) and SSIM between the decoded latents of two runs.
///
/// # Safety
/// `a` and `b` must be live handles; `psnr_db` and `ssim_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dr_compare(
    a: *const DrGeneration,
    b: *const DrGeneration,
    psnr_db: *mut f64,
    ssim_out: *mut f64,
) -> DrStatus {
    guard(|| {
        let (a, b) = (gen_ref(a)?, gen_ref(b)?);
        let psnr_db = out_ptr(psnr_db, "psnr_db")?;
        let ssim_out = out_ptr(ssim_out, "ssim_out")?;
        let (la, lb) = (&a.result.latent, &b.result.latent);
        if la.shape() != lb.shape() {
            return Err(Failure(
                DrStatus::Dimension,
                format!("latent shapes differ: {:?} vs {:?}", la.shape(), lb.shape()),
            ));
        }
        let decoder = Decoder::standard(la.shape())?;
        let (fa, fb) = (decoder.decode(la)?, decoder.decode(lb)?);
        *psnr_db = psnr(&fa, &fb)?;
        *ssim_out = ssim(&fa, &fb)?;
        Ok(())
    })
}

/// Spearman rank correlation of two length-`n` arrays.
///
/// # Safety
/// `a` and `b` must be readable for `n` doubles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dr_spearman_rho(
    a: *const f64,
    b: *const f64,
    n: usize,
    out: *mut f64,
) -> DrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if a.is_null() || b.is_null() {
            return Err(null("input array"));
        }
        let (a, b) = (
            std::slice::from_raw_parts(a, n),
            std::slice::from_raw_parts(b, n),
        );
        *out = spearman_rho(a, b)?;
        Ok(())
    })
}

/// Message for the most recent failed call on this thread, or null after a
/// success. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn dr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
