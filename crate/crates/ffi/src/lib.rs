//! C ABI over `fstereo`. Every fallible call returns an [`FsStatus`]; the
//! message for the most recent failure on the calling thread is available
//! from [`fs_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fstereo::model::{ModelConfig, StereoModel};
use fstereo::objective::{compute_metrics, DisparityMap, GroundTruth};
use fstereo::synth::RgbImage;
use fstereo::tensor::Checkpoint;
use fstereo::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or an out-of-range argument.
    InvalidArgument = 1,
    Config = 2,
    /// Extent or layout mismatch.
    Shape = 3,
    Format = 4,
    Io = 5,
    Numerical = 6,
    Data = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// Opaque model handle.
pub struct FsModel {
    inner: StereoModel<f32>,
}

/// Opaque disparity map handle.
pub struct FsDisparity {
    inner: DisparityMap,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct FsMetrics {
    pub epe: f64,
    /// Percentage of valid pixels with error strictly above the threshold.
    pub bad_pixel: f64,
    pub d1: f64,
    pub n_valid: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn status_of(e: &Error) -> FsStatus {
    match e {
        Error::Config(_) => FsStatus::Config,
        Error::Dimension { .. } | Error::Padding(_) | Error::Shape(_) => FsStatus::Shape,
        Error::Format { .. } | Error::BadMagic { .. } | Error::MissingEntry(_) | Error::Image(_) => FsStatus::Format,
        Error::Io(_) => FsStatus::Io,
        Error::Numerical(_) => FsStatus::Numerical,
        Error::Data(_) => FsStatus::Data,
    }
}

enum Fail {
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsStatus::Ok,
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            FsStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            FsStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Arg(format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(format!("{name} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail::Arg(format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn nonnull<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::Arg(format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failure on this thread; valid until the next failing call.
#[no_mangle]
pub extern "C" fn fs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Create a model from a preset name (`toy`, `micro`, `full`) with fresh weights.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_model_new(preset: *const c_char, out: *mut *mut FsModel) -> FsStatus {
    guard(|| {
        nonnull(out, "out")?;
        let cfg = match str_arg(preset, "preset")? {
            "toy" => ModelConfig::toy(),
            "micro" => ModelConfig::micro(),
            "full" => ModelConfig::default(),
            p => return Err(Fail::Lib(Error::Config(format!("unknown preset `{p}`")))),
        };
        *out = Box::into_raw(Box::new(FsModel { inner: StereoModel::new(cfg)? }));
        Ok(())
    })
}

/// Load weights from a checkpoint file into an existing model.
///
/// # Safety
/// `model` must come from [`fs_model_new`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fs_model_load(model: *mut FsModel, path: *const c_char) -> FsStatus {
    guard(|| {
        nonnull(model, "model")?;
        let ckpt = Checkpoint::load(PathBuf::from(str_arg(path, "path")?))?;
        (*model).inner.load_checkpoint(&ckpt)?;
        Ok(())
    })
}

/// Write the model weights to a checkpoint file.
///
/// # Safety
/// `model` must come from [`fs_model_new`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fs_model_save(model: *const FsModel, path: *const c_char) -> FsStatus {
    guard(|| {
        nonnull(model, "model")?;
        (*model).inner.to_checkpoint().save(PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of trainable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from [`fs_model_new`].
#[no_mangle]
pub unsafe extern "C" fn fs_model_num_parameters(model: *const FsModel) -> u64 {
    model.as_ref().map_or(0, |m| m.inner.num_parameters() as u64)
}

/// Maximum disparity D of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from [`fs_model_new`].
#[no_mangle]
pub unsafe extern "C" fn fs_model_max_disparity(model: *const FsModel) -> u32 {
    model.as_ref().map_or(0, |m| m.inner.cfg.max_disp as u32)
}

/// # Safety
/// `model` must be null or come from [`fs_model_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_model_free(model: *mut FsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predict disparity for an interleaved 8-bit RGB pair of `height * width`
/// pixels into `out` (`height * width` floats, row-major). `iters == 0`
/// selects the model's inference default.
///
/// # Safety
/// `left` and `right` must hold `3 * height * width` bytes and `out` room for
/// `height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn fs_model_predict(
    model: *const FsModel,
    left: *const u8,
    right: *const u8,
    height: u32,
    width: u32,
    iters: u32,
    out: *mut f32,
) -> FsStatus {
    guard(|| {
        nonnull(model, "model")?;
        nonnull(out, "out")?;
        let (h, w) = (height as usize, width as usize);
        let l = RgbImage::new(h, w, slice_arg(left, 3 * h * w, "left")?.to_vec())?;
        let r = RgbImage::new(h, w, slice_arg(right, 3 * h * w, "right")?.to_vec())?;
        let m = &(*model).inner;
        let iters = if iters == 0 { m.cfg.infer_iters } else { iters as usize };
        let p = m.predict(&l, &r, None, iters)?;
        std::slice::from_raw_parts_mut(out, h * w).copy_from_slice(&p.disparity.data);
        Ok(())
    })
}

/// Read a PFM disparity file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_pfm_read(path: *const c_char, out: *mut *mut FsDisparity) -> FsStatus {
    guard(|| {
        nonnull(out, "out")?;
        let inner = fstereo::synth::read_pfm(PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(FsDisparity { inner }));
        Ok(())
    })
}

/// Write `height * width` row-major floats as a little-endian PFM file.
///
/// # Safety
/// `path` must be NUL-terminated; `data` must hold `height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn fs_pfm_write(path: *const c_char, data: *const f32, height: u32, width: u32) -> FsStatus {
    guard(|| {
        let (h, w) = (height as usize, width as usize);
        let map = DisparityMap::new(h, w, slice_arg(data, h * w, "data")?.to_vec())?;
        fstereo::synth::write_pfm(&map, PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `d` must be null or come from [`fs_pfm_read`].
#[no_mangle]
pub unsafe extern "C" fn fs_disparity_height(d: *const FsDisparity) -> u32 {
    d.as_ref().map_or(0, |d| d.inner.height as u32)
}

/// # Safety
/// `d` must be null or come from [`fs_pfm_read`].
#[no_mangle]
pub unsafe extern "C" fn fs_disparity_width(d: *const FsDisparity) -> u32 {
    d.as_ref().map_or(0, |d| d.inner.width as u32)
}

/// Row-major values owned by the handle, or null for a null handle.
///
/// # Safety
/// `d` must be null or come from [`fs_pfm_read`].
#[no_mangle]
pub unsafe extern "C" fn fs_disparity_data(d: *const FsDisparity) -> *const f32 {
    d.as_ref().map_or(ptr::null(), |d| d.inner.data.as_ptr())
}

/// # Safety
/// `d` must be null or come from [`fs_pfm_read`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_disparity_free(d: *mut FsDisparity) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// EPE, bad-pixel percentage at `threshold` and D1 over pixels where `valid`
/// is nonzero. A null `valid` treats every pixel as valid.
///
/// # Safety
/// `pred`, `gt` (and `valid` if non-null) must hold `height * width` entries.
#[no_mangle]
pub unsafe extern "C" fn fs_metrics(
    pred: *const f32,
    gt: *const f32,
    valid: *const u8,
    height: u32,
    width: u32,
    threshold: f64,
    out: *mut FsMetrics,
) -> FsStatus {
    guard(|| {
        nonnull(out, "out")?;
        let (h, w) = (height as usize, width as usize);
        let p = DisparityMap::new(h, w, slice_arg(pred, h * w, "pred")?.to_vec())?;
        let g = DisparityMap::new(h, w, slice_arg(gt, h * w, "gt")?.to_vec())?;
        let mask = if valid.is_null() { vec![true; h * w] } else { slice_arg(valid, h * w, "valid")?.iter().map(|&v| v != 0).collect() };
        let r = compute_metrics(&p, &GroundTruth::new(g, mask)?, &[threshold])?;
        *out = FsMetrics { epe: r.epe, bad_pixel: r.bp[0].1, d1: r.d1, n_valid: r.n_valid as u64 };
        Ok(())
    })
}
