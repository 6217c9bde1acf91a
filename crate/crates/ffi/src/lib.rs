//! C ABI over the setpred toolkit.
//!
//! Every function returns an [`SpStatus`]; on failure a message is kept per
//! thread and can be read with [`sp_last_error`]. Datasets and trained
//! models are opaque handles released with their `_free` function.
//! Panics never cross the boundary; they surface as `SP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use setpred::cli::{family, CliError};
use setpred::data::{
    generate_synthetic, read_features, write_features, DataError, Dataset, Split, SyntheticSpec,
};
use setpred::hyperband::{plan, Config};
use setpred::metrics::f1_report;
use setpred::predictors::Model;
use setpred::trainer::{self, Checkpoint, TrainError, TrainStatus};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Data = 3,
    Diverged = 4,
    Io = 5,
    BufferTooSmall = 6,
    Internal = 7,
    Panic = 8,
}

/// Dataset partitions.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpSplit {
    Train = 0,
    Val = 1,
    Test = 2,
}

/// Set-prediction scores of one split.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpMetrics {
    pub o_f1: f64,
    pub c_f1: f64,
    pub i_f1: f64,
    pub cardinality_error: f64,
    pub cardinality_ci: f64,
}

/// Opaque dataset handle.
pub struct SpDataset {
    inner: Dataset,
}

/// Opaque trained-model handle: full training state plus its best model.
pub struct SpModel {
    ckpt: Checkpoint,
    best: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SpStatus, String);

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::Io(_) => SpStatus::Io,
            DataError::InvalidSpec { .. } => SpStatus::InvalidArgument,
            _ => SpStatus::Data,
        };
        Failure(code, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::InvalidConfig(_) => SpStatus::InvalidArgument,
            TrainError::Io(_) => SpStatus::Io,
            TrainError::Data(_) | TrainError::EmptySplit(_) | TrainError::Checkpoint(_) => {
                SpStatus::Data
            }
            _ => SpStatus::Internal,
        };
        Failure(code, e.to_string())
    }
}

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        let code = match e {
            CliError::Usage(_) => SpStatus::InvalidArgument,
            CliError::Data(_) => SpStatus::Data,
            CliError::Diverged(_) => SpStatus::Diverged,
            CliError::Runtime(_) => SpStatus::Internal,
        };
        Failure(code, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, converting errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> SpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SpStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SpStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SpStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SpStatus::InvalidArgument, msg.into())
}

fn split_of(s: SpSplit) -> Split {
    match s {
        SpSplit::Train => Split::Train,
        SpSplit::Val => Split::Val,
        SpSplit::Test => Split::Test,
    }
}

/// Copies `labels` into `buf` and stores the count in `len`. When `cap` is
/// too small nothing is copied, `len` still receives the count and
/// `SP_STATUS_BUFFER_TOO_SMALL` is returned.
unsafe fn write_labels(
    labels: &[usize],
    buf: *mut u32,
    cap: usize,
    len: *mut usize,
) -> Result<(), Failure> {
    *mut_arg(len, "len")? = labels.len();
    if labels.len() > cap {
        return Err(Failure(
            SpStatus::BufferTooSmall,
            format!("{} labels do not fit in a buffer of {cap}", labels.len()),
        ));
    }
    if !labels.is_empty() {
        if buf.is_null() {
            return Err(null("buf"));
        }
        for (i, &l) in labels.iter().enumerate() {
            *buf.add(i) = l as u32;
        }
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a synthetic dataset. `spec_json` holds synthetic spec fields
/// (missing ones take preset values); null means the preset itself.
///
/// # Safety
/// `spec_json` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_generate(
    spec_json: *const c_char,
    seed: u64,
    out: *mut *mut SpDataset,
) -> SpStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let spec = match opt_str_arg(spec_json, "spec_json")? {
            Some(s) => serde_json::from_str::<SyntheticSpec>(s)
                .map_err(|e| invalid(format!("spec_json: {e}")))?,
            None => SyntheticSpec::default(),
        };
        let inner = generate_synthetic(&spec, seed)?;
        *out = Box::into_raw(Box::new(SpDataset { inner }));
        Ok(())
    })
}

/// Reads an FSET file (and its manifest, if present).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_load(
    path: *const c_char,
    out: *mut *mut SpDataset,
) -> SpStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let inner = read_features(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(SpDataset { inner }));
        Ok(())
    })
}

/// Writes an FSET file and its manifest.
///
/// # Safety
/// `ds` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_save(ds: *const SpDataset, path: *const c_char) -> SpStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        write_features(&PathBuf::from(str_arg(path, "path")?), &ds.inner)?;
        Ok(())
    })
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `ds` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_free(ds: *mut SpDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of samples and labels of a dataset.
///
/// # Safety
/// `ds` must come from this library; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_shape(
    ds: *const SpDataset,
    n_samples: *mut usize,
    n_labels: *mut usize,
) -> SpStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        *mut_arg(n_samples, "n_samples")? = ds.inner.len();
        *mut_arg(n_labels, "n_labels")? = ds.inner.n_labels();
        Ok(())
    })
}

/// Ground-truth labels of one sample, in dataset order.
///
/// # Safety
/// `ds` must come from this library; `buf` must hold `cap` values; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_labels(
    ds: *const SpDataset,
    index: usize,
    buf: *mut u32,
    cap: usize,
    len: *mut usize,
) -> SpStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        let s = ds
            .inner
            .samples
            .get(index)
            .ok_or_else(|| invalid(format!("sample {index} out of range")))?;
        write_labels(&s.labels, buf, cap, len)
    })
}

/// Trains `family` (e.g. "FF_BCE", "TF_set") for `epochs` epochs.
/// `hyper_json` is a JSON object of hyperparameter overrides or null.
/// A run that diverges before its first evaluation yields `SP_STATUS_DIVERGED`.
///
/// # Safety
/// `ds` must come from this library; strings must be NUL-terminated or null
/// where allowed; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_model_train(
    ds: *const SpDataset,
    family_name: *const c_char,
    hyper_json: *const c_char,
    seed: u64,
    epochs: usize,
    out: *mut *mut SpModel,
) -> SpStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.inner;
        let out = mut_arg(out, "out")?;
        let name = str_arg(family_name, "family")?;
        let fam = family(name).ok_or_else(|| invalid(format!("unknown family `{name}`")))?;
        fam.check_dataset(ds).map_err(invalid)?;
        let hyper: Config = match opt_str_arg(hyper_json, "hyper_json")? {
            Some(s) => serde_json::from_str(s).map_err(|e| invalid(format!("hyper_json: {e}")))?,
            None => Config::new(),
        };
        if epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        let setup = fam.setup(&hyper, seed, 0).map_err(invalid)?;
        let mut ckpt = Checkpoint::new(setup, ds)?;
        trainer::train(&mut ckpt, ds, epochs)?;
        if matches!(ckpt.status, TrainStatus::Diverged(_)) && ckpt.best.is_none() {
            return Err(Failure(
                SpStatus::Diverged,
                format!("{name} diverged before its first evaluation"),
            ));
        }
        let best = ckpt.best_model()?;
        *out = Box::into_raw(Box::new(SpModel { ckpt, best }));
        Ok(())
    })
}

/// Loads a checkpoint written by `sp_model_save` or the command-line tool.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_model_load(path: *const c_char, out: *mut *mut SpModel) -> SpStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let ckpt = Checkpoint::load(&PathBuf::from(str_arg(path, "path")?))?;
        let best = ckpt.best_model()?;
        *out = Box::into_raw(Box::new(SpModel { ckpt, best }));
        Ok(())
    })
}

/// Saves the complete training state.
///
/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sp_model_save(model: *const SpModel, path: *const c_char) -> SpStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        m.ckpt.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sp_model_free(model: *mut SpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn check_compatible(m: &SpModel, ds: &Dataset) -> Result<(), Failure> {
    if m.best.n_labels != ds.n_labels() || m.best.d_in != ds.grid.d {
        return Err(Failure(
            SpStatus::Data,
            format!(
                "model expects N = {}, d = {} but the dataset has N = {}, d = {}",
                m.best.n_labels,
                m.best.d_in,
                ds.n_labels(),
                ds.grid.d
            ),
        ));
    }
    Ok(())
}

/// Decodes every sample of a split with the model's decode rule and scores it.
///
/// # Safety
/// `model` and `ds` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_model_evaluate(
    model: *mut SpModel,
    ds: *const SpDataset,
    split: SpSplit,
    out: *mut SpMetrics,
) -> SpStatus {
    guard(|| {
        let m = mut_arg(model, "model")?;
        let ds = &ref_arg(ds, "ds")?.inner;
        let out = mut_arg(out, "out")?;
        check_compatible(m, ds)?;
        let r = trainer::evaluate(
            &mut m.best,
            ds,
            split_of(split),
            &m.ckpt.setup.decode,
            m.ckpt.setup.train.seed,
        )?;
        *out = SpMetrics {
            o_f1: r.o_f1,
            c_f1: r.c_f1,
            i_f1: r.i_f1,
            cardinality_error: r.cardinality_error,
            cardinality_ci: r.cardinality_ci,
        };
        Ok(())
    })
}

/// Predicted label set of one sample. Auto-regressive models report labels
/// in emission order, feed-forward models in ascending order.
///
/// # Safety
/// `model` and `ds` must come from this library; `buf` must hold `cap`
/// values; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_model_predict(
    model: *mut SpModel,
    ds: *const SpDataset,
    index: usize,
    buf: *mut u32,
    cap: usize,
    len: *mut usize,
) -> SpStatus {
    guard(|| {
        let m = mut_arg(model, "model")?;
        let ds = &ref_arg(ds, "ds")?.inner;
        check_compatible(m, ds)?;
        if index >= ds.len() {
            return Err(invalid(format!("sample {index} out of range")));
        }
        let pred = trainer::predict(
            &mut m.best,
            ds,
            &[index],
            &m.ckpt.setup.decode,
            m.ckpt.setup.train.seed,
        )?;
        write_labels(&pred[0], buf, cap, len)
    })
}

/// Scores flattened label sets. Sample `i` owns
/// `labels[offsets[i]..offsets[i + 1]]`; both offset arrays have `n + 1` entries.
///
/// # Safety
/// Every pointer must reference arrays of the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn sp_f1_report(
    n_samples: usize,
    n_labels: usize,
    gt_labels: *const u32,
    gt_offsets: *const usize,
    pred_labels: *const u32,
    pred_offsets: *const usize,
    out: *mut SpMetrics,
) -> SpStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let unpack = |labels: *const u32,
                      offsets: *const usize,
                      what: &str|
         -> Result<Vec<Vec<usize>>, Failure> {
            if offsets.is_null() {
                return Err(null(what));
            }
            let offs = std::slice::from_raw_parts(offsets, n_samples + 1);
            if offs.windows(2).any(|w| w[0] > w[1]) || offs[0] != 0 {
                return Err(invalid(format!(
                    "{what} must start at 0 and never decrease"
                )));
            }
            let total = offs[n_samples];
            if total > 0 && labels.is_null() {
                return Err(null(what));
            }
            let flat: &[u32] = if total == 0 {
                &[]
            } else {
                std::slice::from_raw_parts(labels, total)
            };
            Ok(offs
                .windows(2)
                .map(|w| flat[w[0]..w[1]].iter().map(|&l| l as usize).collect())
                .collect())
        };
        let gt = unpack(gt_labels, gt_offsets, "gt_offsets")?;
        let pred = unpack(pred_labels, pred_offsets, "pred_offsets")?;
        let r = f1_report(&gt, &pred, n_labels).map_err(|e| invalid(e.to_string()))?;
        *out = SpMetrics {
            o_f1: r.o_f1,
            c_f1: r.c_f1,
            i_f1: r.i_f1,
            cardinality_error: r.cardinality_error,
            cardinality_ci: r.cardinality_ci,
        };
        Ok(())
    })
}

/// Number of configurations and largest per-configuration resource of a
/// Hyperband plan.
///
/// # Safety
/// Both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_hyperband_plan(
    eta: u64,
    big_r: u64,
    total_configs: *mut usize,
    max_resource: *mut u64,
) -> SpStatus {
    guard(|| {
        let p = plan(eta, big_r).map_err(|e| invalid(e.to_string()))?;
        *mut_arg(total_configs, "total_configs")? = p.total_configs();
        *mut_arg(max_resource, "max_resource")? = p.max_resource();
        Ok(())
    })
}
