//! C ABI over trained checkpoints.
//!
//! Handles are opaque; every fallible call returns an [`RganStatus`] and
//! leaves a message for [`rgan_last_error_message`] on failure. Images
//! cross the boundary as interleaved RGB `f32` in `[-1, 1]`, row-major,
//! `height * width * 3` values.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rgan::data::load_and_preprocess;
use rgan::models::StyleTransfer;
use rgan::training::{load_checkpoint, Approach, Models, TrainConfig};
use rgan::{Error, ImageTensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Internal = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RganApproach {
    A1 = 1,
    A2 = 2,
}

/// A loaded generator. Create with [`rgan_model_load`], release with
/// [`rgan_model_free`].
pub struct RganModel {
    models: Models,
    config: TrainConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RganStatus {
    match e {
        Error::Shape(_) => RganStatus::Shape,
        Error::Argument(_) | Error::Config(_) => RganStatus::InvalidArgument,
        Error::Io { .. } | Error::Image { .. } => RganStatus::Io,
        Error::Checkpoint(_) | Error::Checksum(_) | Error::ConfigMismatch { .. } | Error::Json(_) => {
            RganStatus::Checkpoint
        }
        _ => RganStatus::Internal,
    }
}

struct Fail(RganStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RganStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RganStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside rgan".into());
            RganStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(RganStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(RganStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const RganModel) -> Result<&'a RganModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rgan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rgan_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint directory, verifying its checksums.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rgan_model_load(path: *const c_char, out: *mut *mut RganModel) -> RganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let dir = path_arg(path, "path")?;
        let state = load_checkpoint(&dir)?;
        let config = state.config().clone();
        let models = state.models;
        *out = Box::into_raw(Box::new(RganModel { models, config }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`rgan_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rgan_model_free(model: *mut RganModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn rgan_model_image_size(
    model: *const RganModel,
    out_height: *mut usize,
    out_width: *mut usize,
) -> RganStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out_height.is_null() || out_width.is_null() {
            return Err(null("out"));
        }
        (*out_height, *out_width) = m.config.image_size;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rgan_model_approach(model: *const RganModel, out: *mut RganApproach) -> RganStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = match m.config.approach {
            Approach::A1 => RganApproach::A1,
            Approach::A2 => RganApproach::A2,
        };
        Ok(())
    })
}

/// Trainable parameter count of the whole bundle.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rgan_param_count(model: *const RganModel, out: *mut u64) -> RganStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.models.param_count() as u64;
        Ok(())
    })
}

/// Stylises one image. `height` and `width` must equal the model's image
/// size.
///
/// # Safety
/// `content`, `style` and `out` must each point to
/// `height * width * 3` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rgan_transfer(
    model: *const RganModel,
    content: *const f32,
    style: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
) -> RganStatus {
    guard(|| {
        let m = model_ref(model)?;
        if content.is_null() || style.is_null() || out.is_null() {
            return Err(null("image buffer"));
        }
        if (height, width) != m.config.image_size {
            let (h, w) = m.config.image_size;
            return Err(Fail(
                RganStatus::Shape,
                format!("model expects {h}x{w} images, got {height}x{width}"),
            ));
        }
        let n = height * width * 3;
        let c = ImageTensor::new(height, width, 3, std::slice::from_raw_parts(content, n).to_vec())?;
        let s = ImageTensor::new(height, width, 3, std::slice::from_raw_parts(style, n).to_vec())?;
        let y = m.models.transfer(&c, &s)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(y.data());
        Ok(())
    })
}

/// Reads two image files, stylises and writes a PNG to `out_path`.
///
/// # Safety
/// All paths must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rgan_transfer_files(
    model: *const RganModel,
    content_path: *const c_char,
    style_path: *const c_char,
    out_path: *const c_char,
) -> RganStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (cp, sp, op) = (
            path_arg(content_path, "content_path")?,
            path_arg(style_path, "style_path")?,
            path_arg(out_path, "out_path")?,
        );
        let size = m.config.image_size;
        let c = load_and_preprocess(&cp, size)?;
        let s = load_and_preprocess(&sp, size)?;
        m.models.transfer(&c, &s)?.save_png(&op)?;
        Ok(())
    })
}
