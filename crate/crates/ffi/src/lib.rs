//! C ABI over the glyphread recognizer.
//!
//! Handles are opaque pointers created and freed by this library. Every
//! fallible call returns a [`GrStatus`]; on failure a description is kept in
//! thread-local storage and can be read with [`gr_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use glyphread::beamsearch::{beam_decode, DecodeConfig, Decoded, LexiconMode};
use glyphread::lexicon::LexiconTrie;
use glyphread::{Error, GrayImage, ModelBundle};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numeric = 6,
    Panic = 7,
}

/// A loaded model bundle together with its optional LM and lexicon.
pub struct GrModel {
    bundle: ModelBundle,
    trie: Option<LexiconTrie>,
}

/// Ranked decode results.
pub struct GrResult {
    items: Vec<(CString, f64)>,
}

/// Decoding options. Obtain defaults from [`gr_decode_options_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct GrDecodeOptions {
    pub beam_width: u32,
    /// Fuse the bundle's character LM (nonzero = on)
    pub use_lm: u8,
    pub lm_weight: f64,
    /// Restrict output to the bundle's lexicon (nonzero = on)
    pub use_lexicon: u8,
    /// 0 = trie pruning, 1 = nearest word by edit distance
    pub lexicon_mode: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: GrStatus, msg: impl Into<String>) -> GrStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> GrStatus {
    let status = match &e {
        Error::Shape(_) => GrStatus::Shape,
        Error::Numeric(_) => GrStatus::Numeric,
        Error::Input(_) => GrStatus::InvalidArgument,
        Error::Io { .. } => GrStatus::Io,
        Error::Format(_) => GrStatus::Format,
    };
    fail(status, e.to_string())
}

fn guarded(f: impl FnOnce() -> GrStatus) -> GrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == GrStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(GrStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, GrStatus> {
    if p.is_null() {
        return Err(fail(GrStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(GrStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the last failed call on this thread (empty after success).
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn gr_decode_options_default() -> GrDecodeOptions {
    let d = DecodeConfig::default();
    GrDecodeOptions {
        beam_width: d.beam_width as u32,
        use_lm: 0,
        lm_weight: d.lm_weight,
        use_lexicon: 0,
        lexicon_mode: 0,
    }
}

/// Loads a bundle from `path`. On success `*out` owns a handle to release
/// with [`gr_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gr_model_load(path: *const c_char, out: *mut *mut GrModel) -> GrStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GrStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let bundle = match ModelBundle::load(path) {
            Ok(b) => b,
            Err(e) => return from_error(e),
        };
        let trie = match bundle.lexicon.as_deref().map(LexiconTrie::build).transpose() {
            Ok(t) => t,
            Err(e) => return from_error(e),
        };
        *out = Box::into_raw(Box::new(GrModel { bundle, trie }));
        GrStatus::Ok
    })
}

/// # Safety
/// `model` must come from [`gr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gr_model_free(model: *mut GrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn run_decode(model: &GrModel, image: &GrayImage, opts: &GrDecodeOptions) -> Result<Vec<Decoded>, GrStatus> {
    let lm = if opts.use_lm != 0 {
        match &model.bundle.lm {
            Some(lm) => Some(lm),
            None => return Err(fail(GrStatus::InvalidArgument, "use_lm set but the bundle has no LM")),
        }
    } else {
        None
    };
    let trie = if opts.use_lexicon != 0 {
        match &model.trie {
            Some(t) => Some(t),
            None => return Err(fail(GrStatus::InvalidArgument, "use_lexicon set but the bundle has no lexicon")),
        }
    } else {
        None
    };
    let lexicon_mode = match opts.lexicon_mode {
        0 => LexiconMode::Prune,
        1 => LexiconMode::Edit,
        m => return Err(fail(GrStatus::InvalidArgument, format!("unknown lexicon mode {m}"))),
    };
    let config = DecodeConfig {
        beam_width: opts.beam_width as usize,
        lm_weight: opts.lm_weight,
        lm,
        trie,
        lexicon_mode,
        ..Default::default()
    };
    beam_decode(&model.bundle.model, image, &config).map_err(from_error)
}

unsafe fn finish_decode(
    model: *const GrModel,
    image: Result<GrayImage, GrStatus>,
    opts: *const GrDecodeOptions,
    out: *mut *mut GrResult,
) -> GrStatus {
    if out.is_null() {
        return fail(GrStatus::NullPointer, "out is null");
    }
    *out = ptr::null_mut();
    if model.is_null() {
        return fail(GrStatus::NullPointer, "model is null");
    }
    let image = match image {
        Ok(i) => i,
        Err(s) => return s,
    };
    let opts = if opts.is_null() { gr_decode_options_default() } else { *opts };
    match run_decode(&*model, &image, &opts) {
        Ok(results) => {
            let items = results
                .into_iter()
                .map(|d| (CString::new(d.word).unwrap_or_default(), d.score))
                .collect();
            *out = Box::into_raw(Box::new(GrResult { items }));
            GrStatus::Ok
        }
        Err(s) => s,
    }
}

/// Decodes an 8-bit grayscale image of `height`×`width` pixels (row-major,
/// 0 = black). `opts` may be null for defaults.
///
/// # Safety
/// `pixels` must point to `height * width` bytes; `model` must be a live
/// handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gr_decode(
    model: *const GrModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    opts: *const GrDecodeOptions,
    out: *mut *mut GrResult,
) -> GrStatus {
    guarded(|| {
        let image = if pixels.is_null() {
            Err(fail(GrStatus::NullPointer, "pixels is null"))
        } else if height == 0 || width == 0 {
            Err(fail(GrStatus::InvalidArgument, "image must be non-empty"))
        } else {
            let bytes = std::slice::from_raw_parts(pixels, height * width);
            GrayImage::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect()).map_err(from_error)
        };
        finish_decode(model, image, opts, out)
    })
}

/// Decodes a binary PGM file.
///
/// # Safety
/// As for [`gr_decode`]; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gr_decode_pgm(
    model: *const GrModel,
    path: *const c_char,
    opts: *const GrDecodeOptions,
    out: *mut *mut GrResult,
) -> GrStatus {
    guarded(|| {
        let image = path_arg(path).and_then(|p| GrayImage::load_pgm(p).map_err(from_error));
        finish_decode(model, image, opts, out)
    })
}

/// Number of ranked results (0 for a null handle).
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gr_result_count(result: *const GrResult) -> usize {
    result.as_ref().map_or(0, |r| r.items.len())
}

/// Word at `index` (best first), or null when out of range. Owned by the
/// result handle.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gr_result_word(result: *const GrResult, index: usize) -> *const c_char {
    result
        .as_ref()
        .and_then(|r| r.items.get(index))
        .map_or(ptr::null(), |(w, _)| w.as_ptr())
}

/// Log-score at `index`, or NaN when out of range.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gr_result_score(result: *const GrResult, index: usize) -> f64 {
    result
        .as_ref()
        .and_then(|r| r.items.get(index))
        .map_or(f64::NAN, |(_, s)| *s)
}

/// # Safety
/// `result` must come from a decode call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gr_result_free(result: *mut GrResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}
