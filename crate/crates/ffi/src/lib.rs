//! C ABI over `csi-locate`.
//!
//! Objects are opaque handles created by `csl_*_load`/`csl_*_new` and
//! released with the matching `csl_*_free`. Every fallible call returns a
//! [`CslStatus`]; on failure `csl_last_error` describes the cause for the
//! calling thread. Channels are passed as two row-major `m_r x w` float
//! arrays holding the real and imaginary parts.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use csi_locate::channel_sim::{CsiMeasurement, Dataset};
use csi_locate::experiment::column;
use csi_locate::features::{designed_features, feature_len};
use csi_locate::io::{read_checkpoint, read_dataset};
use csi_locate::model::{Model, Stream};
use csi_locate::numerics::{ComplexMatrix, Tensor};
use csi_locate::Error;

/// Status codes. The error values match the exit codes of the `csi-locate`
/// command-line tool where one exists.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CslStatus {
    Ok = 0,
    /// Null pointer, bad length or non-UTF-8 path.
    InvalidArgument = 1,
    Config = 2,
    /// Malformed file, dimension mismatch or other data error.
    Data = 3,
    Numerical = 4,
    /// The stream is still filling its fusion windows; no estimate yet.
    NotReady = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Loaded model. Safe to share between threads for read-only calls.
pub struct CslModel(Arc<Model>);

/// Per-UE streaming state bound to a model.
pub struct CslStream(Stream<Arc<Model>>);

/// Loaded measurement dataset.
pub struct CslDataset(Dataset);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CslModelInfo {
    pub num_antennas: u32,
    pub num_subcarriers: u32,
    /// Number of grid points in a probability map.
    pub num_points: u32,
    /// Earlier measurements a stream needs before its first estimate.
    pub history: u32,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CslEstimate {
    pub x: f64,
    pub y: f64,
    /// Row-major 2x2 covariance.
    pub cov: [f64; 4],
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CslStatus {
    match e {
        Error::NotReady { .. } => CslStatus::NotReady,
        _ => match e.exit_code() {
            2 => CslStatus::Config,
            4 => CslStatus::Numerical,
            _ => CslStatus::Data,
        },
    }
}

struct Fail(CslStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(CslStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CslStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            CslStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn channel_arg(re: *const f32, im: *const f32, rows: usize, cols: usize) -> Result<ComplexMatrix<f32>, Fail> {
    if re.is_null() || im.is_null() {
        return Err(invalid("channel pointer is null"));
    }
    let n = rows * cols;
    let re = std::slice::from_raw_parts(re, n).to_vec();
    let im = std::slice::from_raw_parts(im, n).to_vec();
    Ok(ComplexMatrix::new(Tensor::new(&[rows, cols], re)?, Tensor::new(&[rows, cols], im)?)?)
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next `csl_*` call on the same thread.
#[no_mangle]
pub extern "C" fn csl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn csl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `csi-locate train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csl_model_load(path: *const c_char, out: *mut *mut CslModel) -> CslStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = ptr::null_mut();
        let ck = read_checkpoint(&path_arg(path)?)?;
        let model = Model::from_store(ck.spec, ck.store)?;
        *out = Box::into_raw(Box::new(CslModel(Arc::new(model))));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `csl_model_load` and not be used afterwards.
/// Streams created from it stay valid.
#[no_mangle]
pub unsafe extern "C" fn csl_model_free(model: *mut CslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn csl_model_info(model: *const CslModel, out: *mut CslModelInfo) -> CslStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        *mut_arg(out, "out")? = CslModelInfo {
            num_antennas: m.spec.m_r as u32,
            num_subcarriers: m.spec.w as u32,
            num_points: m.grid.len() as u32,
            history: m.spec.history() as u32,
        };
        Ok(())
    })
}

/// Mean distance error of the model on a dataset, over records with enough
/// history for the model's fusion windows.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csl_model_evaluate(model: *const CslModel, dataset: *const CslDataset, mde: *mut f64) -> CslStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let ds = &ref_arg(dataset, "dataset")?.0;
        let out = mut_arg(mde, "mde")?;
        *out = column(m, ds, m.spec.history())?.0.stats.mde;
        Ok(())
    })
}

/// Starts an empty stream. The stream keeps the model alive.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn csl_stream_new(model: *const CslModel, out: *mut *mut CslStream) -> CslStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let out = mut_arg(out, "out")?;
        *out = Box::into_raw(Box::new(CslStream(Stream::new(Arc::clone(&m.0)))));
        Ok(())
    })
}

/// # Safety
/// `stream` must come from `csl_stream_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn csl_stream_free(stream: *mut CslStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Forgets all buffered measurements, e.g. before switching to another UE.
///
/// # Safety
/// `stream` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csl_stream_reset(stream: *mut CslStream) -> CslStatus {
    guard(|| {
        mut_arg(stream, "stream")?.0.reset();
        Ok(())
    })
}

/// Feeds one measurement. Returns `Ok` and fills `out` once the fusion
/// windows are full, `NotReady` before that.
///
/// # Safety
/// `re` and `im` must each point to `num_antennas * num_subcarriers`
/// floats; `stream` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn csl_stream_push(
    stream: *mut CslStream,
    re: *const f32,
    im: *const f32,
    ue_id: u32,
    timestamp: f64,
    out: *mut CslEstimate,
) -> CslStatus {
    guard(|| {
        let s = &mut mut_arg(stream, "stream")?.0;
        let out = mut_arg(out, "out")?;
        let (m_r, w) = (s.model().spec.m_r, s.model().spec.w);
        let m = CsiMeasurement {
            h: channel_arg(re, im, m_r, w)?,
            position: [0.0; 2],
            timestamp,
            ue_id,
        };
        let e = s.push_ready(&m)?;
        let c = e.covariance;
        *out = CslEstimate {
            x: e.position[0],
            y: e.position[1],
            cov: [c[0][0], c[0][1], c[1][0], c[1][1]],
        };
        Ok(())
    })
}

/// Loads a dataset file written by `csi-locate simulate`.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn csl_dataset_load(path: *const c_char, out: *mut *mut CslDataset) -> CslStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = ptr::null_mut();
        let ds = read_dataset(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CslDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from `csl_dataset_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn csl_dataset_free(dataset: *mut CslDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of records; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn csl_dataset_len(dataset: *const CslDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Copies record `index`: channel into `re`/`im` (each `m_r * w` floats),
/// true position into `position[2]`.
///
/// # Safety
/// Pointers must be valid and the buffers large enough.
#[no_mangle]
pub unsafe extern "C" fn csl_dataset_record(
    dataset: *const CslDataset,
    index: usize,
    re: *mut f32,
    im: *mut f32,
    position: *mut f64,
    ue_id: *mut u32,
    timestamp: *mut f64,
) -> CslStatus {
    guard(|| {
        let ds = &ref_arg(dataset, "dataset")?.0;
        let r = ds
            .records
            .get(index)
            .ok_or_else(|| invalid(&format!("index {index} out of range for {} records", ds.len())))?;
        if re.is_null() || im.is_null() || position.is_null() || ue_id.is_null() || timestamp.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let n = ds.m_r * ds.w;
        std::slice::from_raw_parts_mut(re, n).copy_from_slice(r.h.re().data());
        std::slice::from_raw_parts_mut(im, n).copy_from_slice(r.h.im().data());
        let p = r.position_f64();
        *position = p[0];
        *position.add(1) = p[1];
        *ue_id = r.ue_id;
        *timestamp = r.timestamp;
        Ok(())
    })
}

/// Designed (delay-domain autocorrelation) features of one channel. `out`
/// must hold `8 * num_antennas * num_subcarriers` floats.
///
/// # Safety
/// `re`/`im` must hold `num_antennas * num_subcarriers` floats and `out`
/// must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn csl_designed_features(
    num_antennas: u32,
    num_subcarriers: u32,
    re: *const f32,
    im: *const f32,
    out: *mut f32,
    out_len: usize,
) -> CslStatus {
    guard(|| {
        let (m, w) = (num_antennas as usize, num_subcarriers as usize);
        if m == 0 || w == 0 {
            return Err(invalid("dimensions must be positive"));
        }
        let need = feature_len(m, w);
        if out.is_null() || out_len < need {
            return Err(invalid(&format!("output buffer needs {need} floats")));
        }
        let h: ComplexMatrix<f64> = channel_arg(re, im, m, w)?.cast();
        let f = designed_features(&h)?;
        for (o, v) in std::slice::from_raw_parts_mut(out, need).iter_mut().zip(f) {
            *o = v as f32;
        }
        Ok(())
    })
}
