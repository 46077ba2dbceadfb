//! C ABI over `avfusion`.
//!
//! Every function returns an [`AvfStatus`]; on failure the message is
//! available from [`avf_last_error_message`] on the same thread. Models
//! are opaque [`AvfModel`] handles released with [`avf_model_free`].
//! Matrices cross the boundary as row-major `double` buffers.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use avfusion::audio::{resample_to, spectrogram, SpectrogramConfig};
use avfusion::model::io;
use avfusion::{Dims, Error, FusionModel, HeadSpec, Matrix, ModalityFeatures, Model, ModelKind};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Format = 4,
    Io = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvfModelKind {
    Jca = 0,
    Concat = 1,
    VanillaCa = 2,
}

impl From<AvfModelKind> for ModelKind {
    fn from(k: AvfModelKind) -> Self {
        match k {
            AvfModelKind::Jca => ModelKind::Jca,
            AvfModelKind::Concat => ModelKind::Concat,
            AvfModelKind::VanillaCa => ModelKind::VanillaCa,
        }
    }
}

impl From<ModelKind> for AvfModelKind {
    fn from(k: ModelKind) -> Self {
        match k {
            ModelKind::Jca => AvfModelKind::Jca,
            ModelKind::Concat => AvfModelKind::Concat,
            ModelKind::VanillaCa => AvfModelKind::VanillaCa,
        }
    }
}

/// Shape of a model.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AvfDims {
    pub seq_len: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub k: usize,
    pub outputs: usize,
}

/// Opaque model handle.
pub struct AvfModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> AvfStatus {
    match e {
        Error::Shape { .. } => AvfStatus::ShapeMismatch,
        Error::NonFinite { .. } | Error::DegenerateCcc { .. } | Error::Diverged { .. } => AvfStatus::Numeric,
        Error::BadMagic { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Truncated { .. }
        | Error::Parse { .. }
        | Error::LabelRange { .. }
        | Error::UnsupportedAudio(_) => AvfStatus::Format,
        Error::Io { .. } => AvfStatus::Io,
        _ => AvfStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (AvfStatus, String)>) -> AvfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AvfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AvfStatus::Panic
        }
    }
}

fn lib(e: Error) -> (AvfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AvfStatus, String) {
    (AvfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (AvfStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (AvfStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (AvfStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn avf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn avf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Xavier-initialised model with a linear head of `outputs` (1 or 2).
#[no_mangle]
pub unsafe extern "C" fn avf_model_new(
    kind: AvfModelKind,
    dims: AvfDims,
    seed: u64,
    out: *mut *mut AvfModel,
) -> AvfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = Dims::new(dims.seq_len, dims.d_a, dims.d_v, dims.k).map_err(lib)?;
        let m = Model::xavier(kind.into(), d, HeadSpec::linear(dims.outputs), seed).map_err(lib)?;
        *out = Box::into_raw(Box::new(AvfModel { inner: m }));
        Ok(())
    })
}

/// Loads a parameter file (`JCAP`, `CONP` or `VCAP`).
#[no_mangle]
pub unsafe extern "C" fn avf_model_load(path: *const c_char, out: *mut *mut AvfModel) -> AvfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path)?;
        let m = io::load(&p).map_err(lib)?;
        *out = Box::into_raw(Box::new(AvfModel { inner: m }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn avf_model_save(model: *const AvfModel, path: *const c_char) -> AvfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let p = path_arg(path)?;
        io::save(&m.inner, &p).map_err(lib)
    })
}

/// Releases a handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn avf_model_free(model: *mut AvfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn avf_model_kind(model: *const AvfModel, out: *mut AvfModelKind) -> AvfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = m.inner.kind().into();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn avf_model_dims(model: *const AvfModel, out: *mut AvfDims) -> AvfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        let d = m.inner.dims();
        *o = AvfDims {
            seq_len: d.seq_len,
            d_a: d.d_a,
            d_v: d.d_v,
            k: d.k,
            outputs: m.inner.head().output_dim(),
        };
        Ok(())
    })
}

/// Clipped predictions for one sub-sequence. `audio` is `seq_len x d_a`,
/// `visual` is `seq_len x d_v` and `out` receives `seq_len x outputs`.
#[no_mangle]
pub unsafe extern "C" fn avf_model_predict(
    model: *const AvfModel,
    audio: *const f64,
    audio_len: usize,
    visual: *const f64,
    visual_len: usize,
    out: *mut f64,
    out_len: usize,
) -> AvfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = m.inner.dims();
        let outputs = m.inner.head().output_dim();
        let a = input(audio, audio_len, "audio")?;
        let v = input(visual, visual_len, "visual")?;
        if a.len() != d.seq_len * d.d_a || v.len() != d.seq_len * d.d_v {
            return Err((
                AvfStatus::ShapeMismatch,
                format!(
                    "expected {} audio and {} visual values, got {} and {}",
                    d.seq_len * d.d_a,
                    d.seq_len * d.d_v,
                    a.len(),
                    v.len()
                ),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < d.seq_len * outputs {
            return Err((
                AvfStatus::BufferTooSmall,
                format!("output needs {} values, buffer holds {out_len}", d.seq_len * outputs),
            ));
        }
        let xa = Matrix::from_vec(d.seq_len, d.d_a, a.to_vec())
            .and_then(ModalityFeatures::audio)
            .map_err(lib)?;
        let xv = Matrix::from_vec(d.seq_len, d.d_v, v.to_vec())
            .and_then(ModalityFeatures::visual)
            .map_err(lib)?;
        let y = m.inner.predict(&xa, &xv).map_err(lib)?;
        slice::from_raw_parts_mut(out, y.len()).copy_from_slice(y.as_slice());
        Ok(())
    })
}

/// Concordance correlation coefficient of two length-`n` arrays.
#[no_mangle]
pub unsafe extern "C" fn avf_ccc(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> AvfStatus {
    guard(|| {
        let xs = input(x, n, "x")?;
        let ys = input(y, n, "y")?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = avfusion::ccc(xs, ys).map_err(lib)?.rho_c;
        Ok(())
    })
}

/// Normalised log-power spectrogram with the default configuration
/// (64 bands). The signal is resampled from `sample_rate` to 44100 Hz.
/// Writes `rows` (bands) and `cols` (frames); the matrix is copied into
/// `out` when it is non-null and holds `rows * cols` values. Call with a
/// null `out` to query the size.
#[no_mangle]
pub unsafe extern "C" fn avf_spectrogram(
    signal: *const f64,
    len: usize,
    sample_rate: u32,
    out: *mut f64,
    out_len: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> AvfStatus {
    guard(|| {
        let s = input(signal, len, "signal")?;
        let r = rows.as_mut().ok_or_else(|| null("rows"))?;
        let c = cols.as_mut().ok_or_else(|| null("cols"))?;
        let cfg = SpectrogramConfig::default();
        let x = resample_to(s, sample_rate, cfg.sample_rate).map_err(lib)?;
        let m = spectrogram(&x, &cfg).map_err(lib)?;
        *r = m.rows();
        *c = m.cols();
        if out.is_null() {
            return Ok(());
        }
        if out_len < m.len() {
            return Err((
                AvfStatus::BufferTooSmall,
                format!("spectrogram needs {} values, buffer holds {out_len}", m.len()),
            ));
        }
        ptr::copy_nonoverlapping(m.as_slice().as_ptr(), out, m.len());
        Ok(())
    })
}
