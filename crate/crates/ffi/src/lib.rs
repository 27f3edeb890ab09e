//! C ABI over the `ardit` crate.
//!
//! Every fallible call returns an [`ArditStatus`]; on failure a message is
//! kept per thread and can be read with [`ardit_last_error`]. Objects are
//! opaque handles created by `*_new`/`*_load`/`*_parse` and released by the
//! matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ardit::ardit::{fim_generate, generate, DurationModel, GenerateOptions};
use ardit::blockplan::FimSplit;
use ardit::flowmatch::OdeSchedule;
use ardit::harness::{load_ardit, run_stage, ArditModel, Artifacts, ExperimentConfig, Stage};
use ardit::latentae::make_frame_mask;
use ardit::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes. Nonzero values other than the last three mirror the CLI
/// exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArditStatus {
    Ok = 0,
    InvalidInput = 2,
    InvalidConfig = 3,
    Singularity = 4,
    InvalidState = 5,
    MissingDependency = 6,
    MalformedFile = 7,
    Io = 8,
    NullPointer = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for ArditStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Input(_) => Self::InvalidInput,
            Error::Config(_) => Self::InvalidConfig,
            Error::Singularity(_) => Self::Singularity,
            Error::State(_) => Self::InvalidState,
            Error::Dependency { .. } => Self::MissingDependency,
            Error::Format(_) => Self::MalformedFile,
            Error::Io(_) => Self::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(ArditStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ArditStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ArditStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            ArditStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ArditStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ArditStatus::InvalidInput, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn write_out(t: &Tensor, out: *mut f32, capacity: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    if capacity < t.len() {
        return Err(Fail(
            ArditStatus::BufferTooSmall,
            format!("output needs {} floats, buffer holds {capacity}", t.len()),
        ));
    }
    unsafe { ptr::copy_nonoverlapping(t.data().as_ptr(), out, t.len()) };
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn ardit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn ardit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque experiment configuration.
pub struct ArditConfig(ExperimentConfig);

#[no_mangle]
pub extern "C" fn ardit_config_new() -> *mut ArditConfig {
    Box::into_raw(Box::new(ArditConfig(ExperimentConfig::default())))
}

/// Parse flat `key = value` text into a new configuration.
///
/// # Safety
/// `text` must be a nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ardit_config_parse(text: *const c_char, out: *mut *mut ArditConfig) -> ArditStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ExperimentConfig::parse(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(ArditConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ardit_config_free(cfg: *mut ArditConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Run one pipeline stage (`gen-data`, `train-ae`, ..., `eval`) in `out_dir`.
///
/// # Safety
/// Pointers must be valid; strings nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn ardit_run_stage(cfg: *const ArditConfig, stage: *const c_char, out_dir: *const c_char) -> ArditStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let stage: Stage = str_arg(stage, "stage")?.parse()?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        run_stage(stage, &cfg.0, &Artifacts::new(dir))?;
        Ok(())
    })
}

/// Opaque trained velocity model.
pub struct ArditModelHandle(ArditModel);

/// Load a model checkpoint written by the `train-ardit` or `distill` stage.
///
/// # Safety
/// `path` must be nul-terminated; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ardit_model_load(path: *const c_char, out: *mut *mut ArditModelHandle) -> ArditStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(str_arg(path, "path")?);
        let model = load_ardit(&path, Stage::TrainArdit)?;
        *out = Box::into_raw(Box::new(ArditModelHandle(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ardit_model_free(model: *mut ArditModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of one latent token, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ardit_model_d_latent(model: *const ArditModelHandle) -> usize {
    model.as_ref().map_or(0, |m| m.0.net.d_latent())
}

fn options(block_size: usize, ode_steps: usize) -> Result<GenerateOptions, Fail> {
    if block_size == 0 {
        return Err(Fail(ArditStatus::InvalidInput, "block_size must be positive".into()));
    }
    Ok(GenerateOptions {
        block_size,
        schedule: OdeSchedule::new(ode_steps)?,
        use_cache: true,
    })
}

/// Generate `n_latent` tokens for a transcript of symbol ids. Writes
/// `n_latent * d_latent` floats, row-major, to `out` (capacity in floats).
/// `block_size = SIZE_MAX` generates everything in one block.
///
/// # Safety
/// `text` must hold `n_text` ids and `out` `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn ardit_model_generate(
    model: *const ArditModelHandle,
    text: *const u32,
    n_text: usize,
    n_latent: usize,
    block_size: usize,
    ode_steps: usize,
    seed: u64,
    out: *mut f32,
    capacity: usize,
) -> ArditStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let text: Vec<usize> = slice_arg(text, n_text, "text")?.iter().map(|&s| s as usize).collect();
        let opts = options(block_size, ode_steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = generate(&m.net, &m.params, &text, n_latent, &opts, &mut rng)?.scale(m.latent_scale);
        write_out(&z, out, capacity)
    })
}

/// Fill tokens `[n_left, n_right)` of a `total`-token sequence given the
/// rest. `context` holds `total * d_latent` floats (middle rows ignored);
/// the full sequence is written to `out`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ardit_model_fill_middle(
    model: *const ArditModelHandle,
    text: *const u32,
    n_text: usize,
    context: *const f32,
    total: usize,
    n_left: usize,
    n_right: usize,
    block_size: usize,
    ode_steps: usize,
    seed: u64,
    out: *mut f32,
    capacity: usize,
) -> ArditStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let d = m.net.d_latent();
        let text: Vec<usize> = slice_arg(text, n_text, "text")?.iter().map(|&s| s as usize).collect();
        let ctx = Tensor::from_vec(total, d, slice_arg(context, total * d, "context")?.to_vec())?.scale(1.0 / m.latent_scale);
        let split = FimSplit::new(n_left, n_right, total)?;
        let opts = options(block_size, ode_steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = fim_generate(&m.net, &m.params, &text, &ctx, &split, &opts, &mut rng)?.scale(m.latent_scale);
        write_out(&z, out, capacity)
    })
}

/// Latent length for `n_symbols` ordinary symbols at `seconds_per_symbol`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ardit_estimate_length(
    n_symbols: usize,
    seconds_per_symbol: f64,
    hop_seconds: f64,
    downsample: usize,
    out: *mut usize,
) -> ArditStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dm = DurationModel::new(seconds_per_symbol, hop_seconds, downsample)?;
        *out = dm.estimate(&vec![0; n_symbols])?;
        Ok(())
    })
}

/// Write the masked-reconstruction frame mask (1 = regenerated) for
/// `n_frames` frames and the given anchor into `out` (`n_frames` bytes).
///
/// # Safety
/// `out` must hold `n_frames` bytes.
#[no_mangle]
pub unsafe extern "C" fn ardit_frame_mask(n_frames: usize, anchor: usize, out: *mut u8) -> ArditStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mask = make_frame_mask(n_frames, anchor)?;
        let dst = std::slice::from_raw_parts_mut(out, n_frames);
        for (d, &b) in dst.iter_mut().zip(&mask.bits) {
            *d = b as u8;
        }
        Ok(())
    })
}
