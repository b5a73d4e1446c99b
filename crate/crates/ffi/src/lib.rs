//! C ABI over `mtlkit`.
//!
//! Every fallible function returns an [`MtlStatus`]; on failure a message is
//! available from [`mtl_last_error`] on the same thread. Handles are opaque
//! and owned by the caller, who releases them with the matching `*_free`.
//! Score and label buffers are dense row-major arrays: `n` rows (images) by
//! `p` or `q` columns (classes).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use mtlkit::checkpoint::Checkpoint;
use mtlkit::data::{load_manifest, AugmentConfig, Dataset};
use mtlkit::eval::{correlation_matrix, ensemble_max, map_class, map_image, top_k_accuracy, average_precision, ScoreMatrix};
use mtlkit::network::Head;
use mtlkit::objective::TaskMode;
use mtlkit::tensor::Tensor;
use mtlkit::train::{evaluate, score_images};
use mtlkit::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    DimensionMismatch = 5,
    NoPositives = 6,
    BadCheckpoint = 7,
    Internal = 8,
}

/// Metrics of a model on a dataset. Values that do not apply are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MtlMetrics {
    pub map_class: f64,
    pub map_image: f64,
    pub top1: f64,
    pub top3: f64,
}

/// A loaded checkpoint and its evaluation geometry.
pub struct MtlModel {
    ck: Checkpoint,
    aug: AugmentConfig,
}

/// A loaded manifest with its images.
pub struct MtlDataset {
    ds: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

enum Fail {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn status_of(e: &Error) -> MtlStatus {
    match e {
        Error::Io(_) | Error::MissingImage(_) => MtlStatus::Io,
        Error::ParseError { .. } | Error::Csv { .. } | Error::Json(_) | Error::Image(_) | Error::UnknownLabel(_) => {
            MtlStatus::Parse
        }
        Error::ShapeMismatch { .. } | Error::DimensionMismatch(_) | Error::MatrixMismatch(_) => {
            MtlStatus::DimensionMismatch
        }
        Error::NoPositives => MtlStatus::NoPositives,
        Error::Checkpoint(_) => MtlStatus::BadCheckpoint,
        Error::BadK { .. }
        | Error::BadClass { .. }
        | Error::BadLabel(_)
        | Error::BadConfig(_)
        | Error::BadSpec(_)
        | Error::CropTooLarge { .. } => MtlStatus::InvalidArgument,
        Error::NonScalarRoot { .. } | Error::MissingGradient(_) => MtlStatus::Internal,
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MtlStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            return MtlStatus::Ok;
        }
        Ok(Err(Fail::Null(what))) => (MtlStatus::NullPointer, format!("`{what}` is null")),
        Ok(Err(Fail::Invalid(m))) => (MtlStatus::InvalidArgument, m),
        Ok(Err(Fail::Lib(e))) => (status_of(&e), e.to_string()),
        Err(_) => (MtlStatus::Internal, "internal panic".to_string()),
    };
    set_error(msg);
    status
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg(ptr: *const c_char) -> Result<String, Fail> {
    if ptr.is_null() {
        return Err(Fail::Null("path"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail::Invalid("path is not valid UTF-8".into()))
}

fn area(n: usize, cols: usize) -> Result<usize, Fail> {
    n.checked_mul(cols).ok_or_else(|| Fail::Invalid("buffer size overflows".into()))
}

fn matrix(kind: Head, values: &[f64], n: usize, cols: usize) -> Result<ScoreMatrix, Fail> {
    let rows = values.chunks_exact(cols.max(1)).take(n).map(<[f64]>::to_vec).collect();
    let ids = (0..n).map(|i| i.to_string()).collect();
    let classes = (0..cols).map(|j| j.to_string()).collect();
    Ok(ScoreMatrix::new(kind, ids, classes, rows)?)
}

fn label_rows(labels: &[u8], n: usize, cols: usize) -> Vec<Vec<u8>> {
    labels.chunks_exact(cols.max(1)).take(n).map(<[u8]>::to_vec).collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mtl_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version contains NUL"),
    };
    VERSION.as_ptr()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn mtl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Average precision of one ranking. `labels` holds 0/1 flags.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable elements; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mtl_average_precision(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> MtlStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l = slice(labels, n, "labels")?;
        let out = out_ref(out, "out")?;
        *out = average_precision(s, l)?;
        Ok(())
    })
}

/// Class-wise mean AP over an `n x p` score matrix; classes without
/// positives are skipped.
///
/// # Safety
/// `scores` and `labels` must point to `n * p` readable elements; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn mtl_map_class(scores: *const f64, labels: *const u8, n: usize, p: usize, out: *mut f64) -> MtlStatus {
    guard(|| {
        let len = area(n, p)?;
        let s = matrix(Head::Lesion, slice(scores, len, "scores")?, n, p)?;
        let u = label_rows(slice(labels, len, "labels")?, n, p);
        *out_ref(out, "out")? = map_class(&s, &u)?.mean;
        Ok(())
    })
}

/// Image-wise mean AP over an `n x p` score matrix; images without
/// positives are skipped.
///
/// # Safety
/// As for [`mtl_map_class`].
#[no_mangle]
pub unsafe extern "C" fn mtl_map_image(scores: *const f64, labels: *const u8, n: usize, p: usize, out: *mut f64) -> MtlStatus {
    guard(|| {
        let len = area(n, p)?;
        let s = matrix(Head::Lesion, slice(scores, len, "scores")?, n, p)?;
        let u = label_rows(slice(labels, len, "labels")?, n, p);
        *out_ref(out, "out")? = map_image(&s, &u)?.mean;
        Ok(())
    })
}

/// Top-`k` accuracy of an `n x q` location score matrix against 1-based
/// true locations.
///
/// # Safety
/// `scores` must point to `n * q` readable values, `locations` to `n`;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtl_top_k_accuracy(
    scores: *const f64,
    locations: *const usize,
    n: usize,
    q: usize,
    k: usize,
    out: *mut f64,
) -> MtlStatus {
    guard(|| {
        let s = matrix(Head::Location, slice(scores, area(n, q)?, "scores")?, n, q)?;
        let v = slice(locations, n, "locations")?;
        *out_ref(out, "out")? = top_k_accuracy(&s, v, k)?;
        Ok(())
    })
}

/// Element-wise maximum of two equally sized buffers. `out` may alias
/// either input.
///
/// # Safety
/// `a`, `b` and `out` must each point to `len` valid elements.
#[no_mangle]
pub unsafe extern "C" fn mtl_ensemble_max(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> MtlStatus {
    guard(|| {
        let x = matrix(Head::Lesion, slice(a, len, "a")?, 1, len)?;
        let y = matrix(Head::Lesion, slice(b, len, "b")?, 1, len)?;
        let m = ensemble_max(&x, &y)?;
        slice_mut(out, len, "out")?.copy_from_slice(m.rows.first().map_or(&[][..], Vec::as_slice));
        Ok(())
    })
}

/// Loads a checkpoint written by `mtlkit train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtl_model_load(path: *const c_char, out: *mut *mut MtlModel) -> MtlStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let ck = Checkpoint::load(path_arg(path)?)?;
        let aug = AugmentConfig {
            crop: ck.net.config().input_size,
            ..AugmentConfig::default()
        };
        *out = Box::into_raw(Box::new(MtlModel { ck, aug }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`mtl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtl_model_free(model: *mut MtlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of lesion outputs; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtl_model_num_lesions(model: *const MtlModel) -> usize {
    model.as_ref().map_or(0, |m| m.ck.net.num_lesions())
}

/// Number of location outputs; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtl_model_num_locations(model: *const MtlModel) -> usize {
    model.as_ref().map_or(0, |m| m.ck.net.num_locations())
}

/// Image channels the model expects; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtl_model_in_channels(model: *const MtlModel) -> usize {
    model.as_ref().map_or(0, |m| m.ck.net.config().in_channels)
}

/// Scores one `channels x height x width` image with values in [0, 1].
/// Writes sigmoid lesion scores and softmax location scores, averaged over
/// ten crops when `ten_crop` is set.
///
/// # Safety
/// `pixels` must point to `channels * height * width` values;
/// `lesion_out` and `location_out` must hold the model's lesion and location
/// counts.
#[no_mangle]
pub unsafe extern "C" fn mtl_model_predict(
    model: *const MtlModel,
    pixels: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    ten_crop: bool,
    lesion_out: *mut f64,
    location_out: *mut f64,
) -> MtlStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let len = area(area(channels, height)?, width)?;
        let img = Tensor::new(vec![channels, height, width], slice(pixels, len, "pixels")?.to_vec())?;
        if channels != m.ck.net.config().in_channels {
            return Err(Fail::Lib(Error::DimensionMismatch(format!(
                "model expects {} channels, image has {channels}",
                m.ck.net.config().in_channels
            ))));
        }
        let (les, loc) = score_images(&m.ck.net, &[&img], &m.ck.channel_means, &m.aug, ten_crop)?;
        slice_mut(lesion_out, les[0].len(), "lesion_out")?.copy_from_slice(&les[0]);
        slice_mut(location_out, loc[0].len(), "location_out")?.copy_from_slice(&loc[0]);
        Ok(())
    })
}

/// Loads a manifest and its images.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtl_dataset_load(path: *const c_char, out: *mut *mut MtlDataset) -> MtlStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let ds = load_manifest(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MtlDataset { ds }));
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `dataset` must come from [`mtl_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtl_dataset_free(dataset: *mut MtlDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Sample count; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtl_dataset_len(dataset: *const MtlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.ds.len())
}

/// Lesion label count; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtl_dataset_num_lesions(dataset: *const MtlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.ds.num_lesions())
}

/// Location label count; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtl_dataset_num_locations(dataset: *const MtlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.ds.num_locations())
}

/// Lesion/location co-occurrence matrix, row-major `P x Q`.
///
/// # Safety
/// `out` must hold `out_len` values; `out_len` must equal P * Q.
#[no_mangle]
pub unsafe extern "C" fn mtl_dataset_correlation(dataset: *const MtlDataset, out: *mut f64, out_len: usize) -> MtlStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or(Fail::Null("dataset"))?;
        let want = d.ds.num_lesions() * d.ds.num_locations();
        if out_len != want {
            return Err(Fail::Invalid(format!("correlation needs {want} values, buffer holds {out_len}")));
        }
        let r = correlation_matrix(&d.ds).r;
        let flat: Vec<f64> = r.into_iter().flatten().collect();
        slice_mut(out, out_len, "out")?.copy_from_slice(&flat);
        Ok(())
    })
}

/// Scores every sample and reports both heads' metrics.
///
/// # Safety
/// `model` and `dataset` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtl_evaluate(
    model: *const MtlModel,
    dataset: *const MtlDataset,
    ten_crop: bool,
    out: *mut MtlMetrics,
) -> MtlStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let d = dataset.as_ref().ok_or(Fail::Null("dataset"))?;
        let out = out_ref(out, "out")?;
        let (_, report) = evaluate(&m.ck, &d.ds, &m.aug, ten_crop, TaskMode::Mtl)?;
        let lesion = report.lesion.as_ref();
        let location = report.location.as_ref();
        *out = MtlMetrics {
            map_class: lesion.map_or(f64::NAN, |l| l.map_class),
            map_image: lesion.map_or(f64::NAN, |l| l.map_image),
            top1: location.map_or(f64::NAN, |l| l.top1),
            top3: location.and_then(|l| l.top3).unwrap_or(f64::NAN),
        };
        Ok(())
    })
}
