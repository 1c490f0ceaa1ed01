//! C ABI over `mantis-core`: opaque model handles, status codes and a
//! per-thread last-error message.
//!
//! Every function returns a [`MantisStatus`]; on failure the message is
//! available from [`mantis_last_error_message`] until the next failing call on
//! the same thread. Panics are caught and reported as `MANTIS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mantis_core::ftnmt::{values, FtConfig};
use mantis_core::inference::{sliding_inference, InferenceConfig};
use mantis_core::mantis::{Mantis, MantisConfig};
use mantis_core::substrate::Tensor;
use mantis_core::trainer::Confusion;
use mantis_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MantisStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Data = 5,
    Io = 6,
    Panic = 7,
}

/// Opaque network handle.
pub struct MantisModel {
    inner: Mantis,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MantisMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub iou: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &Error) -> MantisStatus {
    match e {
        Error::Shape { .. } => MantisStatus::Shape,
        Error::InvalidArgument(_) | Error::Json(_) => MantisStatus::InvalidArgument,
        Error::NonFinite(_) => MantisStatus::NonFinite,
        Error::Data(_) | Error::Image { .. } => MantisStatus::Data,
        Error::Io { .. } => MantisStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MantisStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MantisStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            MantisStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            MantisStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MantisStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn model_arg<'a>(m: *const MantisModel) -> Result<&'a Mantis, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or(Failure::Null("model"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mantis_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn mantis_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn mantis_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Builds a freshly initialised network from a JSON model config (NULL for the
/// defaults) and stores the handle in `*out_model`.
///
/// # Safety
/// `config_json` must be NULL or a NUL-terminated string; `out_model` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mantis_model_new(config_json: *const c_char, out_model: *mut *mut MantisModel) -> MantisStatus {
    guard(|| {
        if out_model.is_null() {
            return Err(Failure::Null("out_model"));
        }
        let config: MantisConfig = if config_json.is_null() {
            MantisConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Failure::Invalid(format!("model config: {e}")))?
        };
        let model = Mantis::new(config)?;
        *out_model = Box::into_raw(Box::new(MantisModel { inner: model }));
        Ok(())
    })
}

/// Loads a checkpoint directory into a new handle.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mantis_model_load(dir: *const c_char, out_model: *mut *mut MantisModel) -> MantisStatus {
    guard(|| {
        if out_model.is_null() {
            return Err(Failure::Null("out_model"));
        }
        let model = Mantis::load(Path::new(str_arg(dir, "dir")?))?;
        *out_model = Box::into_raw(Box::new(MantisModel { inner: model }));
        Ok(())
    })
}

/// Writes the handle's parameters as a checkpoint directory.
///
/// # Safety
/// `model` must come from this library; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mantis_model_save(model: *const MantisModel, dir: *const c_char) -> MantisStatus {
    guard(|| {
        model_arg(model)?.save(Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn mantis_model_free(model: *mut MantisModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters.
///
/// # Safety
/// `model` must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mantis_model_num_parameters(model: *const MantisModel, out: *mut usize) -> MantisStatus {
    guard(|| {
        let n = model_arg(model)?.params.num_scalars();
        *out.as_mut().ok_or(Failure::Null("out"))? = n;
        Ok(())
    })
}

/// The model config as a newly allocated JSON string; release it with
/// [`mantis_string_free`].
///
/// # Safety
/// `model` must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mantis_model_config_json(model: *const MantisModel, out: *mut *mut c_char) -> MantisStatus {
    guard(|| {
        let json = model_arg(model)?.config_json().to_string();
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = CString::new(json).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn mantis_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Change probability for a batch of image pairs.
///
/// Images are row-major `batch × channels × height × width` doubles in
/// `[0, 1]`; `out` receives `batch × height × width` values.
///
/// # Safety
/// Pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn mantis_model_predict(
    model: *const MantisModel,
    img1: *const f64,
    img2: *const f64,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> MantisStatus {
    guard(|| {
        let m = model_arg(model)?;
        let n = batch * channels * height * width;
        let shape = vec![batch, channels, height, width];
        let a = Tensor::new(shape.clone(), slice_arg(img1, n, "img1")?.to_vec())?;
        let b = Tensor::new(shape, slice_arg(img2, n, "img2")?.to_vec())?;
        let p = m.predict(&a, &b)?;
        slice_out(out, batch * height * width, "out")?.copy_from_slice(p.data());
        Ok(())
    })
}

/// Sliding-window change probability for one `channels × height × width`
/// raster pair; `out` receives `height × width` values.
///
/// # Safety
/// Pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn mantis_sliding_inference(
    model: *const MantisModel,
    raster1: *const f64,
    raster2: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
    out: *mut f64,
) -> MantisStatus {
    guard(|| {
        let m = model_arg(model)?;
        let n = channels * height * width;
        let shape = vec![channels, height, width];
        let a = Tensor::new(shape.clone(), slice_arg(raster1, n, "raster1")?.to_vec())?;
        let b = Tensor::new(shape, slice_arg(raster2, n, "raster2")?.to_vec())?;
        let p = sliding_inference(m, &a, &b, &InferenceConfig::new(window, stride))?;
        slice_out(out, height * width, "out")?.copy_from_slice(p.data());
        Ok(())
    })
}

/// Averaged fractal Tanimoto similarity with complement of two vectors in `[0, 1]`.
///
/// # Safety
/// `p` and `l` must reference `len` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mantis_ftnmt(p: *const f64, l: *const f64, len: usize, depth: u32, out: *mut f64) -> MantisStatus {
    guard(|| {
        if len == 0 {
            return Err(Failure::Invalid("empty vectors".into()));
        }
        let p = Tensor::new(vec![len], slice_arg(p, len, "p")?.to_vec())?;
        let l = Tensor::new(vec![len], slice_arg(l, len, "l")?.to_vec())?;
        if [&p, &l].iter().any(|t| t.data().iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Failure::Invalid("inputs must lie in [0, 1]".into()));
        }
        let v = values::ftnmt_avg(&p, &l, &FtConfig::new(depth, &[0]))?.item();
        *out.as_mut().ok_or(Failure::Null("out"))? = v;
        Ok(())
    })
}

/// Pixel metrics of two binary masks (nonzero bytes are positive).
///
/// # Safety
/// `pred` and `gt` must reference `len` bytes; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mantis_metrics(pred: *const u8, gt: *const u8, len: usize, out: *mut MantisMetrics) -> MantisStatus {
    guard(|| {
        let pred = slice_arg(pred, len, "pred")?;
        let gt = slice_arg(gt, len, "gt")?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            c.add_pixel(p != 0, g != 0);
        }
        let m = c.metrics();
        *out.as_mut().ok_or(Failure::Null("out"))? = MantisMetrics {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            mcc: m.mcc,
            iou: m.iou,
        };
        Ok(())
    })
}
