//! C interface to the `grnc` codec.
//!
//! Models are opaque handles. Every fallible call returns a [`GrncStatus`];
//! on failure a description is available from [`grnc_last_error`] on the
//! same thread until the next failing call. Buffers handed out by the
//! library must be released with [`grnc_buffer_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use grnc::bitstream::bits_per_pixel;
use grnc::codec::{model_digest, read_checkpoint, CodecModel, ReconstructionMode};
use grnc::dataio::{to_image, to_tensor, ImageBuffer};
use grnc::pipeline::{decode_stream, encode_image};
use grnc::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrncStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Panic = 5,
}

/// A loaded model and the digest of the checkpoint it came from.
pub struct GrncModel {
    model: CodecModel,
    digest: [u8; 32],
}

/// Use the model's configured reconstruction mode.
pub const GRNC_MODE_DEFAULT: i32 = -1;
pub const GRNC_MODE_ONE_SHOT: i32 = 0;
pub const GRNC_MODE_ADDITIVE: i32 = 1;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GrncStatus {
    match e {
        Error::Io(_) => GrncStatus::Io,
        Error::BadMagic
        | Error::UnknownVersion(_)
        | Error::TruncatedHeader
        | Error::TruncatedPayload
        | Error::TrailingBytes
        | Error::Malformed { .. }
        | Error::UnsupportedMaxval(_) => GrncStatus::Format,
        _ => GrncStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (GrncStatus, String)>) -> GrncStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GrncStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GrncStatus::Panic
        }
    }
}

fn fail(e: Error) -> (GrncStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (GrncStatus, String) {
    (GrncStatus::NullArgument, format!("{name} is null"))
}

fn leak(bytes: Vec<u8>, out: *mut *mut u8, out_len: *mut usize) {
    let b = bytes.into_boxed_slice();
    // SAFETY: callers checked both out-pointers for null.
    unsafe {
        *out_len = b.len();
        *out = Box::into_raw(b) as *mut u8;
    }
}

/// Message for the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn grnc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a `GRNM` checkpoint from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grnc_model_from_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut GrncModel,
) -> GrncStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = slice::from_raw_parts(data, len);
        let model = read_checkpoint(bytes).map_err(fail)?;
        let handle = Box::new(GrncModel {
            model,
            digest: model_digest(bytes),
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Loads a `GRNM` checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grnc_model_load(path: *const c_char, out: *mut *mut GrncModel) -> GrncStatus {
    if path.is_null() {
        return guard(|| Err(null("path")));
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(p) => p.to_owned(),
        Err(_) => return guard(|| Err((GrncStatus::InvalidArgument, "path is not UTF-8".into()))),
    };
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) => return guard(|| Err(fail(Error::Io(e)))),
    };
    grnc_model_from_bytes(bytes.as_ptr(), bytes.len(), out)
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from a load call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn grnc_model_free(model: *mut GrncModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Code channels of a loaded model, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn grnc_model_code_channels(model: *const GrncModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.config.code_channels as u32)
}

/// Raw rate of a stream with these parameters.
#[no_mangle]
pub extern "C" fn grnc_bits_per_pixel(iterations: u32, code_channels: u32) -> f64 {
    bits_per_pixel(iterations as usize, code_channels as usize)
}

/// Compresses interleaved 8-bit RGB into a `GRNB` stream. `iterations` of 0
/// and `mode` of [`GRNC_MODE_DEFAULT`] use the model's settings.
///
/// # Safety
/// `rgb` must point to `3·width·height` bytes; the out-pointers must be
/// writable. The stream is released with [`grnc_buffer_free`].
#[no_mangle]
pub unsafe extern "C" fn grnc_encode_rgb(
    model: *const GrncModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    iterations: u32,
    mode: i32,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> GrncStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if out.is_null() || out_len.is_null() {
            return Err(null("out"));
        }
        let (w, h) = (width as usize, height as usize);
        let n = w.checked_mul(h).and_then(|v| v.checked_mul(3)).ok_or_else(|| {
            (GrncStatus::InvalidArgument, "image dimensions overflow".to_string())
        })?;
        let img = ImageBuffer::new(w, h, slice::from_raw_parts(rgb, n).to_vec()).map_err(fail)?;
        let mode = match mode {
            GRNC_MODE_DEFAULT => m.model.config.mode,
            v => u8::try_from(v)
                .ok()
                .and_then(|b| ReconstructionMode::from_u8(b).ok())
                .ok_or_else(|| (GrncStatus::InvalidArgument, format!("unknown mode {v}")))?,
        };
        let iterations = if iterations == 0 {
            m.model.config.iterations
        } else {
            iterations as usize
        };
        let (_, bytes) =
            encode_image(&m.model, m.digest, &to_tensor(&img), iterations, mode).map_err(fail)?;
        leak(bytes, out, out_len);
        Ok(())
    })
}

/// Decodes the first `iterations` passes of a stream (all when 0) into
/// interleaved 8-bit RGB. With `strict` non-zero a stream from another
/// checkpoint is rejected.
///
/// # Safety
/// `stream` must point to `len` bytes; the out-pointers must be writable.
/// The pixels are released with [`grnc_buffer_free`].
#[no_mangle]
pub unsafe extern "C" fn grnc_decode_rgb(
    model: *const GrncModel,
    stream: *const u8,
    len: usize,
    iterations: u32,
    strict: i32,
    out_rgb: *mut *mut u8,
    out_len: *mut usize,
    out_width: *mut u32,
    out_height: *mut u32,
) -> GrncStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if stream.is_null() {
            return Err(null("stream"));
        }
        if out_rgb.is_null() || out_len.is_null() || out_width.is_null() || out_height.is_null() {
            return Err(null("out"));
        }
        let bytes = slice::from_raw_parts(stream, len);
        let k = (iterations != 0).then_some(iterations as usize);
        let decoded = decode_stream(&m.model, m.digest, bytes, k, strict != 0).map_err(fail)?;
        let img = to_image(&decoded.image).map_err(fail)?;
        *out_width = img.width as u32;
        *out_height = img.height as u32;
        leak(img.data, out_rgb, out_len);
        Ok(())
    })
}

/// Releases a buffer returned by the library. Null is ignored.
///
/// # Safety
/// `ptr` and `len` must be exactly as returned, and freed only once.
#[no_mangle]
pub unsafe extern "C" fn grnc_buffer_free(ptr: *mut u8, len: usize) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(ptr, len)));
    }
}
