//! C ABI over srmkit.
//!
//! Every function returns an [`SrmkitStatus`]; on failure a description is
//! kept per thread and can be read with [`srmkit_last_error`]. Models are
//! opaque handles owned by the caller and released with
//! [`srmkit_model_free`]. Matrices cross the boundary as row-major `double`
//! buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use srmkit::atlas::{load_atlas, AtlasKind};
use srmkit::dataio::Dataset;
use srmkit::evaluation::r2_score;
use srmkit::fastsrm::{fastsrm_fit, fastsrm_transform, FastSrmConfig, Storage};
use srmkit::srm::{detsrm_fit, probsrm_fit, procrustes_update, reconstruct, Algorithm, RunGrid, SrmModel, SrmOptions};
use srmkit::{Matrix, SrmError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrmkitStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Format = 3,
    Dimension = 4,
    InvalidInput = 5,
    NonFinite = 6,
    Config = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrmkitAlgorithm {
    Detsrm = 0,
    Probsrm = 1,
    Fastsrm = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrmkitAtlasKind {
    Partition = 0,
    Probabilistic = 1,
}

/// Opaque fitted model.
pub struct SrmkitModel {
    inner: SrmModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn classify(err: &SrmError) -> SrmkitStatus {
    match err {
        SrmError::Io { .. } => SrmkitStatus::Io,
        SrmError::Format { .. } | SrmError::Json { .. } => SrmkitStatus::Format,
        SrmError::Dimension(_) => SrmkitStatus::Dimension,
        SrmError::InvalidInput(_) => SrmkitStatus::InvalidInput,
        SrmError::NonFinite(_) => SrmkitStatus::NonFinite,
        SrmError::Config(_) => SrmkitStatus::Config,
        SrmError::Run { source, .. } | SrmError::Fold { source, .. } => classify(source),
    }
}

enum Failure {
    Null(&'static str),
    Srm(SrmError),
}

impl From<SrmError> for Failure {
    fn from(e: SrmError) -> Self {
        Failure::Srm(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SrmkitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SrmkitStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed as {what}"));
            SrmkitStatus::NullPointer
        }
        Ok(Err(Failure::Srm(e))) => {
            set_error(e.to_string());
            classify(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SrmkitStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| SrmError::InvalidInput(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn model_arg<'a>(p: *const SrmkitModel) -> Result<&'a SrmModel, Failure> {
    p.as_ref().map(|m| &m.inner).ok_or(Failure::Null("model"))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next srmkit call on the same thread.
#[no_mangle]
pub extern "C" fn srmkit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn srmkit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fits a model on the runs listed in a manifest. `atlas_path` may be NULL
/// except for FastSRM. FastSRM components are kept in memory.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn srmkit_fit(
    algorithm: SrmkitAlgorithm,
    manifest_path: *const c_char,
    atlas_path: *const c_char,
    atlas_kind: SrmkitAtlasKind,
    k: usize,
    n_iter: usize,
    n_jobs: usize,
    seed: u64,
    out: *mut *mut SrmkitModel,
) -> SrmkitStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let dataset = Dataset::open(path_arg(manifest_path, "manifest_path")?)?;
        let opts = SrmOptions { n_iter, seed, n_jobs };
        let model = match algorithm {
            SrmkitAlgorithm::Detsrm => {
                let data = dataset.load_all()?;
                detsrm_fit(&RunGrid::from_owned(&data)?, k, &opts)?.model
            }
            SrmkitAlgorithm::Probsrm => {
                let data = dataset.load_all()?;
                probsrm_fit(&RunGrid::from_owned(&data)?, k, &opts)?.model
            }
            SrmkitAlgorithm::Fastsrm => {
                let kind = match atlas_kind {
                    SrmkitAtlasKind::Partition => AtlasKind::Partition,
                    SrmkitAtlasKind::Probabilistic => AtlasKind::Probabilistic,
                };
                let atlas = load_atlas(path_arg(atlas_path, "atlas_path")?, kind)?;
                let cfg = FastSrmConfig {
                    n_iter,
                    n_jobs,
                    seed,
                    storage: Storage::InMemory,
                    ..FastSrmConfig::new(k)
                };
                fastsrm_fit(&dataset, &atlas, &cfg)?.model
            }
        };
        *out = Box::into_raw(Box::new(SrmkitModel { inner: model }));
        Ok(())
    })
}

/// Opens a model directory; components are read into memory.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srmkit_model_load(dir: *const c_char, out: *mut *mut SrmkitModel) -> SrmkitStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let model = SrmModel::load(path_arg(dir, "dir")?)?.to_in_memory()?;
        *out = Box::into_raw(Box::new(SrmkitModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn srmkit_model_save(model: *const SrmkitModel, dir: *const c_char) -> SrmkitStatus {
    guard(|| {
        let model = model_arg(model)?;
        model.save(path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn srmkit_model_free(model: *mut SrmkitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `k`, the subject count and the voxel count.
///
/// # Safety
/// `model` must be a live handle; each out pointer may be NULL.
#[no_mangle]
pub unsafe extern "C" fn srmkit_model_shape(
    model: *const SrmkitModel,
    k: *mut usize,
    n_subjects: *mut usize,
    n_voxels: *mut usize,
) -> SrmkitStatus {
    guard(|| {
        let model = model_arg(model)?;
        if let Some(k) = k.as_mut() {
            *k = model.k;
        }
        if let Some(n) = n_subjects.as_mut() {
            *n = model.n_subjects();
        }
        if let Some(v) = n_voxels.as_mut() {
            *v = model.n_voxels;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srmkit_model_algorithm(model: *const SrmkitModel, out: *mut SrmkitAlgorithm) -> SrmkitStatus {
    guard(|| {
        let model = model_arg(model)?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = match model.algorithm {
            Algorithm::DetSrm => SrmkitAlgorithm::Detsrm,
            Algorithm::ProbSrm => SrmkitAlgorithm::Probsrm,
            Algorithm::FastSrm => SrmkitAlgorithm::Fastsrm,
        };
        Ok(())
    })
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got != want {
        return Err(SrmError::Dimension(format!("{what} holds {got} values, expected {want}")).into());
    }
    Ok(())
}

/// Copies subject `subject`'s k×v components into `out` (`len` = k·v).
///
/// # Safety
/// `model` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn srmkit_model_component(
    model: *const SrmkitModel,
    subject: usize,
    out: *mut f64,
    len: usize,
) -> SrmkitStatus {
    guard(|| {
        let model = model_arg(model)?;
        let w = model.component(subject)?;
        check_len(len, w.as_slice().len(), "out")?;
        out_slice(out, len, "out")?.copy_from_slice(w.as_slice());
        Ok(())
    })
}

/// Shared response of one run: the mean over `subjects` of `X_i W_iᵀ`.
/// `runs[j]` is subject `subjects[j]`'s t×v run; `out` receives t×k.
///
/// # Safety
/// `runs` and `subjects` must hold `n_selected` entries, each run `t·v`
/// doubles; `out` must hold `t·k` doubles.
#[no_mangle]
pub unsafe extern "C" fn srmkit_transform(
    model: *const SrmkitModel,
    subjects: *const usize,
    runs: *const *const f64,
    n_selected: usize,
    t: usize,
    out: *mut f64,
) -> SrmkitStatus {
    guard(|| {
        let model = model_arg(model)?;
        if n_selected == 0 {
            return Err(SrmError::InvalidInput("no subjects selected".into()).into());
        }
        if subjects.is_null() {
            return Err(Failure::Null("subjects"));
        }
        if runs.is_null() {
            return Err(Failure::Null("runs"));
        }
        let subjects = std::slice::from_raw_parts(subjects, n_selected);
        let v = model.n_voxels;
        let mats = std::slice::from_raw_parts(runs, n_selected)
            .iter()
            .map(|&p| Ok(Matrix::from_vec(t, v, slice_arg(p, t * v, "runs[j]")?.to_vec())?))
            .collect::<Result<Vec<_>, Failure>>()?;
        let refs: Vec<&Matrix> = mats.iter().collect();
        let shared = fastsrm_transform(model, &refs, subjects)?;
        out_slice(out, t * model.k, "out")?.copy_from_slice(shared.as_slice());
        Ok(())
    })
}

/// Predicted t×v data `S W_i` of one subject from a t×k shared response.
///
/// # Safety
/// `shared` must hold `t·k` doubles and `out` `t·v` doubles.
#[no_mangle]
pub unsafe extern "C" fn srmkit_reconstruct(
    model: *const SrmkitModel,
    subject: usize,
    shared: *const f64,
    t: usize,
    out: *mut f64,
) -> SrmkitStatus {
    guard(|| {
        let model = model_arg(model)?;
        let s = Matrix::from_vec(t, model.k, slice_arg(shared, t * model.k, "shared")?.to_vec())?;
        let w = model.component(subject)?;
        let pred = reconstruct(&w, &s)?;
        out_slice(out, t * model.n_voxels, "out")?.copy_from_slice(pred.as_slice());
        Ok(())
    })
}

/// R² of a prediction; `degenerate` (may be NULL) is set to 1 when the
/// truth is constant, in which case the score is 0.
///
/// # Safety
/// `pred` and `truth` must hold `len` doubles; `score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srmkit_r2_score(
    pred: *const f64,
    truth: *const f64,
    len: usize,
    score: *mut f64,
    degenerate: *mut i32,
) -> SrmkitStatus {
    guard(|| {
        let r = r2_score(slice_arg(pred, len, "pred")?, slice_arg(truth, len, "truth")?)?;
        *score.as_mut().ok_or(Failure::Null("score"))? = r.score;
        if let Some(d) = degenerate.as_mut() {
            *d = i32::from(r.degenerate);
        }
        Ok(())
    })
}

/// Orthonormal Procrustes solution `U V` of a k×v matrix `m = U D V`.
///
/// # Safety
/// `m` and `out` must each hold `k·v` doubles.
#[no_mangle]
pub unsafe extern "C" fn srmkit_procrustes(m: *const f64, k: usize, v: usize, out: *mut f64) -> SrmkitStatus {
    guard(|| {
        let input = Matrix::from_vec(k, v, slice_arg(m, k * v, "m")?.to_vec())?;
        let w = procrustes_update(&input)?;
        out_slice(out, k * v, "out")?.copy_from_slice(w.as_slice());
        Ok(())
    })
}
