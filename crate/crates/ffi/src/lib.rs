//! C interface to trained models.
//!
//! Every fallible call returns a [`UmcStatus`]. On failure a message is kept
//! per thread and can be copied out with [`umc_last_error`]. Models are opaque
//! handles created by [`umc_model_load`] and released with
//! [`umc_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use unimoco::corpus::{ModalInput, PatchGrid};
use unimoco::eval::CandidateIndex;
use unimoco::model::{load_checkpoint, Embedding, UniMoCo};
use unimoco::numerics::cosine_similarity;
use unimoco::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UmcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Dimension = 5,
    Degenerate = 6,
    Panic = 7,
}

/// A loaded model.
pub struct UmcModel {
    inner: UniMoCo,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: UmcStatus, msg: impl Into<String>) -> UmcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn from_error(e: Error) -> UmcStatus {
    let status = match &e {
        Error::Io { .. } => UmcStatus::Io,
        Error::Checkpoint { .. } => UmcStatus::Checkpoint,
        Error::Dimension { .. } | Error::PaddingOverflow { .. } => UmcStatus::Dimension,
        Error::Degenerate(_) => UmcStatus::Degenerate,
        _ => UmcStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), UmcStatus>) -> UmcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UmcStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(UmcStatus::Panic, "internal panic"),
    }
}

/// Empty slices may come with a null pointer.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], UmcStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(UmcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn handle<'a>(m: *const UmcModel) -> Result<&'a UniMoCo, UmcStatus> {
    m.as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| fail(UmcStatus::NullPointer, "model is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn umc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn umc_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn umc_model_load(path: *const c_char, out: *mut *mut UmcModel) -> UmcStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(UmcStatus::NullPointer, "path or out is null"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(UmcStatus::InvalidArgument, "path is not UTF-8"))?;
        let inner = load_checkpoint(Path::new(path)).map_err(from_error)?;
        *out = Box::into_raw(Box::new(UmcModel { inner }));
        Ok(())
    })
}

/// Releases a handle from [`umc_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn umc_model_free(model: *mut UmcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn umc_model_dim(model: *const UmcModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().d_model)
}

/// Image geometry expected by [`umc_embed`]: patches per image and values
/// per patch.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn umc_model_image_shape(
    model: *const UmcModel,
    patches: *mut usize,
    patch_dim: *mut usize,
) -> UmcStatus {
    guard(|| {
        let m = handle(model)?;
        if patches.is_null() || patch_dim.is_null() {
            return Err(fail(UmcStatus::NullPointer, "output is null"));
        }
        *patches = m.config().patches;
        *patch_dim = m.config().patch_dim;
        Ok(())
    })
}

/// Embeds one input into `out` (`out_len` must equal the model width). The
/// image is `patches * patch_dim` row-major values, or null for text only.
///
/// # Safety
/// Every non-null pointer must be valid for its stated length.
#[no_mangle]
pub unsafe extern "C" fn umc_embed(
    model: *const UmcModel,
    instruction: *const u32,
    instruction_len: usize,
    content: *const u32,
    content_len: usize,
    image: *const f64,
    image_len: usize,
    out: *mut f64,
    out_len: usize,
) -> UmcStatus {
    guard(|| {
        let m = handle(model)?;
        let d = m.config().d_model;
        if out.is_null() {
            return Err(fail(UmcStatus::NullPointer, "out is null"));
        }
        if out_len != d {
            return Err(fail(UmcStatus::Dimension, format!("out holds {out_len} values, model width is {d}")));
        }
        let image = if image.is_null() {
            None
        } else {
            let data = slice(image, image_len, "image")?.to_vec();
            Some(PatchGrid::new(m.config().patches, m.config().patch_dim, data).map_err(from_error)?)
        };
        let input = ModalInput {
            instruction: slice(instruction, instruction_len, "instruction")?.to_vec(),
            content: slice(content, content_len, "content")?.to_vec(),
            image,
        };
        let e = m.embed(&input).map_err(from_error)?;
        std::slice::from_raw_parts_mut(out, d).copy_from_slice(e.as_slice());
        Ok(())
    })
}

/// Cosine similarity of two vectors of length `len`.
///
/// # Safety
/// `a` and `b` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn umc_cosine_similarity(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> UmcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(UmcStatus::NullPointer, "out is null"));
        }
        let (a, b) = (slice(a, len, "a")?, slice(b, len, "b")?);
        *out = cosine_similarity(a, b).map_err(from_error)?;
        Ok(())
    })
}

/// Position of the candidate most similar to `query`. `candidates` is `n`
/// unit-norm rows of width `dim`; ties go to the lowest position.
///
/// # Safety
/// `query` must hold `dim` values, `candidates` `n * dim`; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn umc_match(
    query: *const f64,
    candidates: *const f64,
    n: usize,
    dim: usize,
    out: *mut usize,
) -> UmcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(UmcStatus::NullPointer, "out is null"));
        }
        if dim == 0 {
            return Err(fail(UmcStatus::InvalidArgument, "dim is 0"));
        }
        let total = n
            .checked_mul(dim)
            .ok_or_else(|| fail(UmcStatus::InvalidArgument, "n * dim overflows"))?;
        let q = Embedding(slice(query, dim, "query")?.to_vec());
        let rows = slice(candidates, total, "candidates")?;
        let embs = rows.chunks(dim).map(|r| Embedding(r.to_vec())).collect();
        let index = CandidateIndex::new(embs, (0..n).collect()).map_err(from_error)?;
        *out = index.best(&q);
        Ok(())
    })
}
