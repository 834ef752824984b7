//! C ABI over `geomix`.
//!
//! Every function returns a [`GeomixStatus`]. On failure the message is
//! kept per thread and read with [`geomix_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use geomix::dataset::{parse_dataset_with_cutoff, MixtureSystem};
use geomix::harness::{certify, Mode};
use geomix::training::{load_model, predict_all};
use geomix::{Error, Model};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeomixStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Config = 6,
    Checkpoint = 7,
    Numeric = 8,
    Capacity = 9,
    BufferTooSmall = 10,
    Internal = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeomixMode {
    NodePerm = 0,
    Rotation = 1,
    GraphPerm = 2,
}

/// A loaded checkpoint.
pub struct GeomixModel {
    model: Model,
}

/// Parsed mixture systems.
pub struct GeomixDataset {
    systems: Vec<MixtureSystem>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> GeomixStatus {
    match e {
        Error::Io { .. } => GeomixStatus::Io,
        Error::Parse { .. } => GeomixStatus::Parse,
        Error::Validation { .. } => GeomixStatus::Validation,
        Error::Config(_) => GeomixStatus::Config,
        Error::Checkpoint(_) => GeomixStatus::Checkpoint,
        Error::NumericFault { .. } | Error::DegenerateRotation(_) | Error::UndefinedCorrelation(_) => GeomixStatus::Numeric,
        Error::Capacity { .. } => GeomixStatus::Capacity,
        Error::Contract(_) | Error::DegenerateSplit(_) => GeomixStatus::InvalidArgument,
    }
}

struct Fail(GeomixStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GeomixStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GeomixStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GeomixStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(GeomixStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(GeomixStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn geomix_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn geomix_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `model_out` writable.
#[no_mangle]
pub unsafe extern "C" fn geomix_model_load(path: *const c_char, model_out: *mut *mut GeomixModel) -> GeomixStatus {
    guard(|| {
        let slot = out(model_out, "model_out")?;
        *slot = std::ptr::null_mut();
        let model = load_model(&path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(GeomixModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`geomix_model_load`] and not be freed yet; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn geomix_model_free(model: *mut GeomixModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `count_out` writable.
#[no_mangle]
pub unsafe extern "C" fn geomix_model_num_parameters(model: *const GeomixModel, count_out: *mut usize) -> GeomixStatus {
    guard(|| {
        *out(count_out, "count_out")? = handle(model, "model")?.model.num_parameters();
        Ok(())
    })
}

/// Radius graph cutoff the model was trained with, Å.
///
/// # Safety
/// `model` must be a live handle and `cutoff_out` writable.
#[no_mangle]
pub unsafe extern "C" fn geomix_model_cutoff(model: *const GeomixModel, cutoff_out: *mut f64) -> GeomixStatus {
    guard(|| {
        *out(cutoff_out, "cutoff_out")? = handle(model, "model")?.model.config.cutoff;
        Ok(())
    })
}

/// Parses a JSON-lines dataset with graphs built at the model's cutoff.
///
/// # Safety
/// `model` must be a live handle, `path` NUL-terminated and `dataset_out` writable.
#[no_mangle]
pub unsafe extern "C" fn geomix_dataset_load(
    model: *const GeomixModel,
    path: *const c_char,
    dataset_out: *mut *mut GeomixDataset,
) -> GeomixStatus {
    guard(|| {
        let slot = out(dataset_out, "dataset_out")?;
        *slot = std::ptr::null_mut();
        let cutoff = handle(model, "model")?.model.config.cutoff;
        let systems = parse_dataset_with_cutoff(&path_arg(path)?, cutoff)?;
        *slot = Box::into_raw(Box::new(GeomixDataset { systems }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`geomix_dataset_load`] and not be freed yet; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn geomix_dataset_free(dataset: *mut GeomixDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be a live handle and `len_out` writable.
#[no_mangle]
pub unsafe extern "C" fn geomix_dataset_len(dataset: *const GeomixDataset, len_out: *mut usize) -> GeomixStatus {
    guard(|| {
        *out(len_out, "len_out")? = handle(dataset, "dataset")?.systems.len();
        Ok(())
    })
}

/// Measured conductivity of system `index`, mS/cm.
///
/// # Safety
/// `dataset` must be a live handle and `target_out` writable.
#[no_mangle]
pub unsafe extern "C" fn geomix_dataset_target(dataset: *const GeomixDataset, index: usize, target_out: *mut f64) -> GeomixStatus {
    guard(|| {
        let systems = &handle(dataset, "dataset")?.systems;
        let s = systems.get(index).ok_or_else(|| {
            Fail(GeomixStatus::InvalidArgument, format!("index {index} out of range for {} systems", systems.len()))
        })?;
        *out(target_out, "target_out")? = s.target;
        Ok(())
    })
}

/// Writes one prediction per system, in mS/cm, in dataset order.
/// `capacity` is the length of `predictions`.
///
/// # Safety
/// Both handles must be live and `predictions` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn geomix_predict(
    model: *const GeomixModel,
    dataset: *const GeomixDataset,
    predictions: *mut f64,
    capacity: usize,
) -> GeomixStatus {
    guard(|| {
        let model = &handle(model, "model")?.model;
        let systems = &handle(dataset, "dataset")?.systems;
        if predictions.is_null() {
            return Err(null("predictions"));
        }
        if capacity < systems.len() {
            return Err(Fail(
                GeomixStatus::BufferTooSmall,
                format!("need {} doubles, got {capacity}", systems.len()),
            ));
        }
        let refs: Vec<&MixtureSystem> = systems.iter().collect();
        let pred = predict_all(model, &refs)?;
        std::slice::from_raw_parts_mut(predictions, pred.len()).copy_from_slice(&pred);
        Ok(())
    })
}

/// Certifies one symmetry of the model on the dataset. `mode` is a
/// [`GeomixMode`] value. Permutation modes are checked exactly; rotations
/// at `tol` relative deviation.
///
/// # Safety
/// Both handles must be live; `max_rel_dev_out` and `pass_out` writable.
#[no_mangle]
pub unsafe extern "C" fn geomix_verify(
    model: *const GeomixModel,
    dataset: *const GeomixDataset,
    mode: i32,
    trials: usize,
    tol: f64,
    seed: u64,
    max_rel_dev_out: *mut f64,
    pass_out: *mut bool,
) -> GeomixStatus {
    guard(|| {
        let model = &handle(model, "model")?.model;
        let systems = &handle(dataset, "dataset")?.systems;
        let dev = out(max_rel_dev_out, "max_rel_dev_out")?;
        let pass = out(pass_out, "pass_out")?;
        let (mode, tol) = match mode {
            m if m == GeomixMode::NodePerm as i32 => (Mode::NodePerm, 0.0),
            m if m == GeomixMode::Rotation as i32 => (Mode::Rotation, tol),
            m if m == GeomixMode::GraphPerm as i32 => (Mode::GraphPerm, 0.0),
            m => return Err(Fail(GeomixStatus::InvalidArgument, format!("unknown mode {m}"))),
        };
        let r = certify(model, systems, mode, trials, tol, seed)?;
        *dev = r.max_rel_dev;
        *pass = r.pass;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_arguments_are_reported() {
        let mut m = std::ptr::null_mut();
        let st = unsafe { geomix_model_load(std::ptr::null(), &mut m) };
        assert_eq!(st, GeomixStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(geomix_last_error()) }.to_str().unwrap();
        assert!(msg.contains("path"));
        assert!(m.is_null());
        assert_eq!(unsafe { geomix_model_load(c"x".as_ptr(), std::ptr::null_mut()) }, GeomixStatus::NullPointer);
    }

    #[test]
    fn freeing_null_is_a_no_op() {
        unsafe {
            geomix_model_free(std::ptr::null_mut());
            geomix_dataset_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn version_matches_crate() {
        let v = unsafe { CStr::from_ptr(geomix_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
