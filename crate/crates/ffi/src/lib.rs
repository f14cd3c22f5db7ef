//! C ABI over the `pftseg` core: palettes, label projection, blending,
//! confusion/mIoU, and loading checkpoints to synthesize images and
//! segment them.
//!
//! Every fallible function returns a [`PftsegStatus`]. On failure the
//! message is kept per thread and can be read with
//! [`pftseg_last_error_message`]. Handles are opaque and must be released
//! with their matching `*_free` function. Image buffers are `3 × h × w`
//! channel-major `double`s; label buffers are `h × w` row-major bytes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pftseg::generator::{Branch, Decoder, LatentCode};
use pftseg::label::LabelMap;
use pftseg::metrics::{confusion, miou};
use pftseg::palette::{self, Palette, RgbSegMap};
use pftseg::pixclass::{extract_pixel_features, predict, PixelClassifier};
use pftseg::tensor::Tensor3;
use pftseg::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PftsegStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Validation = 3,
    Usage = 4,
    Shape = 5,
    Training = 6,
    Parse = 7,
    MissingArtifact = 8,
    Io = 9,
    Panic = 10,
}

pub struct PftsegPalette(Palette);
pub struct PftsegDecoder(Decoder);
pub struct PftsegClassifier(PixelClassifier);

/// Output stream selector for [`pftseg_decoder_synthesize`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PftsegBranch {
    Seg = 0,
    Img = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PftsegStatus {
    match e {
        Error::Config(_) => PftsegStatus::Config,
        Error::Validation(_) => PftsegStatus::Validation,
        Error::Usage(_) => PftsegStatus::Usage,
        Error::Shape { .. } => PftsegStatus::Shape,
        Error::Training { .. } | Error::Inversion { .. } => PftsegStatus::Training,
        Error::Parse { .. } => PftsegStatus::Parse,
        Error::MissingArtifact { .. } => PftsegStatus::MissingArtifact,
        Error::Io { .. } => PftsegStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PftsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PftsegStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            PftsegStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            PftsegStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Usage("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pftseg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pftseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be a valid pointer to write the handle into.
#[no_mangle]
pub unsafe extern "C" fn pftseg_palette_new(k: usize, out: *mut *mut PftsegPalette) -> PftsegStatus {
    guard(|| put(out, PftsegPalette(palette::make_palette(k)?)))
}

/// # Safety
/// `p` must come from [`pftseg_palette_new`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn pftseg_palette_free(p: *mut PftsegPalette) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `p` must be a live palette handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn pftseg_palette_k(p: *const PftsegPalette) -> usize {
    p.as_ref().map_or(0, |p| p.0.k())
}

/// Copies the `k × 3` colours (RGB in [0, 1], class-major) into `out`.
///
/// # Safety
/// `out` must hold `3 * k` doubles.
#[no_mangle]
pub unsafe extern "C" fn pftseg_palette_colors(p: *const PftsegPalette, out: *mut f64) -> PftsegStatus {
    guard(|| {
        let p = as_ref(p, "palette")?;
        let out = slice_mut(out, 3 * p.0.k(), "out")?;
        for (dst, c) in out.chunks_mut(3).zip(&p.0.colors) {
            dst.copy_from_slice(c);
        }
        Ok(())
    })
}

/// Label map to RGB segmentation map.
///
/// # Safety
/// `labels` must hold `h * w` bytes and `out` `3 * h * w` doubles.
#[no_mangle]
pub unsafe extern "C" fn pftseg_project_labels(
    p: *const PftsegPalette,
    labels: *const u8,
    h: usize,
    w: usize,
    out: *mut f64,
) -> PftsegStatus {
    guard(|| {
        let p = as_ref(p, "palette")?;
        let l = LabelMap::from_vec(h, w, slice(labels, h * w, "labels")?.to_vec());
        let rgb = palette::project_labels(&l, &p.0)?;
        slice_mut(out, 3 * h * w, "out")?.copy_from_slice(&rgb.0.data);
        Ok(())
    })
}

/// Nearest-colour decoding of an RGB map; ties go to the lower class.
///
/// # Safety
/// `rgb` must hold `3 * h * w` doubles and `out` `h * w` bytes.
#[no_mangle]
pub unsafe extern "C" fn pftseg_unproject(
    p: *const PftsegPalette,
    rgb: *const f64,
    h: usize,
    w: usize,
    out: *mut u8,
) -> PftsegStatus {
    guard(|| {
        let p = as_ref(p, "palette")?;
        let t = Tensor3::from_vec(3, h, w, slice(rgb, 3 * h * w, "rgb")?.to_vec());
        let l = palette::unproject(&t, &p.0);
        slice_mut(out, h * w, "out")?.copy_from_slice(&l.data);
        Ok(())
    })
}

/// `lambda * image + (1 - lambda) * map`.
///
/// # Safety
/// `image`, `map` and `out` must each hold `3 * h * w` doubles.
#[no_mangle]
pub unsafe extern "C" fn pftseg_interpolate(
    image: *const f64,
    map: *const f64,
    h: usize,
    w: usize,
    lambda: f64,
    out: *mut f64,
) -> PftsegStatus {
    guard(|| {
        let n = 3 * h * w;
        let x = Tensor3::from_vec(3, h, w, slice(image, n, "image")?.to_vec());
        let m = RgbSegMap(Tensor3::from_vec(3, h, w, slice(map, n, "map")?.to_vec()));
        let blend = palette::interpolate(&x, &m, lambda)?;
        slice_mut(out, n, "out")?.copy_from_slice(&blend.pixels.data);
        Ok(())
    })
}

/// Mean IoU of `pred` against `gt` over `k` classes; classes absent from
/// both count as IoU 0. `counts`, when not NULL, receives the `k × k`
/// confusion matrix (row = ground truth).
///
/// # Safety
/// `pred` and `gt` must hold `n` bytes, `counts` `k * k` integers or NULL.
#[no_mangle]
pub unsafe extern "C" fn pftseg_miou(
    pred: *const u8,
    gt: *const u8,
    n: usize,
    k: usize,
    out_miou: *mut f64,
    counts: *mut u64,
) -> PftsegStatus {
    guard(|| {
        let p = LabelMap::from_vec(1, n, slice(pred, n, "pred")?.to_vec());
        let g = LabelMap::from_vec(1, n, slice(gt, n, "gt")?.to_vec());
        let cm = confusion(&p, &g, k)?;
        if out_miou.is_null() {
            return Err(Fail::Null("out_miou"));
        }
        *out_miou = miou(&cm);
        if !counts.is_null() {
            slice_mut(counts, k * k, "counts")?.copy_from_slice(&cm.counts);
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pftseg_decoder_load(path: *const c_char, out: *mut *mut PftsegDecoder) -> PftsegStatus {
    guard(|| {
        let path = path_arg(path)?;
        put(out, PftsegDecoder(Decoder::load(&path)?))
    })
}

/// # Safety
/// `d` must come from [`pftseg_decoder_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn pftseg_decoder_free(d: *mut PftsegDecoder) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Latent rows, latent width and output resolution.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pftseg_decoder_shape(
    d: *const PftsegDecoder,
    styles: *mut usize,
    latent_dim: *mut usize,
    resolution: *mut usize,
) -> PftsegStatus {
    guard(|| {
        let cfg = as_ref(d, "decoder")?.0.config();
        for (p, v) in [
            (styles, cfg.num_styles()),
            (latent_dim, cfg.latent_dim),
            (resolution, cfg.output_resolution),
        ] {
            if p.is_null() {
                return Err(Fail::Null("shape output"));
            }
            *p = v;
        }
        Ok(())
    })
}

unsafe fn latent_arg(d: &Decoder, w: *const f64, len: usize) -> Result<LatentCode, Fail> {
    let cfg = d.config();
    let (n, c) = (cfg.num_styles(), cfg.latent_dim);
    if len != n * c {
        return Err(Error::Usage(format!("latent has {len} values, decoder expects {n} x {c}")).into());
    }
    Ok(LatentCode::from_vec(n, c, slice(w, len, "latent")?.to_vec()))
}

/// Renders one branch for latent `w` (`styles × latent_dim`, row-major).
///
/// # Safety
/// `w` must hold `w_len` doubles and `out` `3 * res * res`.
#[no_mangle]
pub unsafe extern "C" fn pftseg_decoder_synthesize(
    d: *const PftsegDecoder,
    w: *const f64,
    w_len: usize,
    branch: PftsegBranch,
    out: *mut f64,
) -> PftsegStatus {
    guard(|| {
        let d = &as_ref(d, "decoder")?.0;
        let lat = latent_arg(d, w, w_len)?;
        let b = match branch {
            PftsegBranch::Seg => Branch::Seg,
            PftsegBranch::Img => Branch::Img,
        };
        let (img, _) = d.synthesize(&lat, b, false)?;
        slice_mut(out, img.data.len(), "out")?.copy_from_slice(&img.data);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pftseg_classifier_load(path: *const c_char, out: *mut *mut PftsegClassifier) -> PftsegStatus {
    guard(|| {
        let path = path_arg(path)?;
        put(out, PftsegClassifier(PixelClassifier::load(&path)?))
    })
}

/// # Safety
/// `c` must come from [`pftseg_classifier_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn pftseg_classifier_free(c: *mut PftsegClassifier) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `c` must be a live classifier handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn pftseg_classifier_k(c: *const PftsegClassifier) -> usize {
    c.as_ref().map_or(0, |c| c.0.k())
}

/// Segments latent `w` with the decoder's features and the classifier,
/// writing `res × res` labels.
///
/// # Safety
/// `w` must hold `w_len` doubles and `out` `res * res` bytes.
#[no_mangle]
pub unsafe extern "C" fn pftseg_classifier_predict(
    c: *const PftsegClassifier,
    d: *const PftsegDecoder,
    w: *const f64,
    w_len: usize,
    out: *mut u8,
) -> PftsegStatus {
    guard(|| {
        let c = &as_ref(c, "classifier")?.0;
        let d = &as_ref(d, "decoder")?.0;
        let lat = latent_arg(d, w, w_len)?;
        let feats = extract_pixel_features(d, &lat, c.layers.as_deref())?;
        let labels = predict(c, &feats)?;
        slice_mut(out, labels.data.len(), "out")?.copy_from_slice(&labels.data);
        Ok(())
    })
}
