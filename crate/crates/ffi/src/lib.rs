//! C ABI for `tan-gcd`.
//!
//! Conventions:
//! - Every fallible function returns a [`TgStatus`]; on anything other than
//!   `TG_STATUS_OK` a message is available from [`tg_last_error`] on the same
//!   thread until the next call.
//! - Handles ([`TgDataset`], [`TgHead`]) are opaque, created by this library
//!   and released with the matching `*_free` function. Freeing NULL is a no-op.
//! - Matrices are dense row-major `double` arrays.
//! - Configuration is passed as a JSON object with `TrainConfig` fields, or
//!   NULL for defaults.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tan_gcd::assignment;
use tan_gcd::clustering;
use tan_gcd::dataset::{self, Dataset};
use tan_gcd::evaluation::{self, MetricsReport};
use tan_gcd::prototypes::{self, PrototypeKind, PrototypeSet};
use tan_gcd::synthetic::{self, SyntheticConfig};
use tan_gcd::trainer::{self, TrainConfig};
use tan_gcd::{EncoderHead, Error};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Io = 4,
    Parse = 5,
    Shape = 6,
    NonFinite = 7,
    Checkpoint = 8,
    Panic = 9,
}

/// A loaded or generated dataset.
pub struct TgDataset {
    inner: Dataset,
}

/// An encoder head with its classifier.
pub struct TgHead {
    inner: EncoderHead,
}

/// Test-split scores in [0, 1]. Unavailable entries are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TgMetrics {
    pub h_score: f64,
    pub known_acc: f64,
    pub novel_acc: f64,
    pub overall_acc: f64,
    pub pseudo_label_acc: f64,
}

impl From<&MetricsReport> for TgMetrics {
    fn from(m: &MetricsReport) -> Self {
        Self {
            h_score: m.h_score,
            known_acc: m.known_acc.unwrap_or(f64::NAN),
            novel_acc: m.novel_acc.unwrap_or(f64::NAN),
            overall_acc: m.overall_acc,
            pseudo_label_acc: m.pseudo_label_acc.unwrap_or(f64::NAN),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TgStatus {
    match e {
        Error::Io { .. } => TgStatus::Io,
        Error::Parse { .. } | Error::Json(_) => TgStatus::Parse,
        Error::InvalidInput(_) => TgStatus::InvalidArgument,
        Error::InvalidConfig(_) => TgStatus::InvalidConfig,
        Error::Shape { .. } => TgStatus::Shape,
        Error::NonFinite(_) => TgStatus::NonFinite,
        Error::Checkpoint(_) => TgStatus::Checkpoint,
    }
}

struct Fail(TgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TgStatus::NullPointer, format!("{what} is NULL"))
}

/// Run `f`, recording its error and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TgStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(format!("internal error: {msg}"));
            TgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn config_arg(json: *const c_char) -> Result<TrainConfig, Fail> {
    if json.is_null() {
        return Ok(TrainConfig::default());
    }
    let text = str_arg(json, "config")?;
    let cfg: TrainConfig = serde_json::from_str(text)
        .map_err(|e| Fail(TgStatus::InvalidConfig, format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Vec<Vec<f64>>, Fail> {
    if rows == 0 || cols == 0 {
        return Ok(vec![Vec::new(); rows]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    let flat = std::slice::from_raw_parts(p, rows * cols);
    Ok(flat.chunks(cols).map(<[f64]>::to_vec).collect())
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn dataset_ref<'a>(ds: *const TgDataset) -> Result<&'a Dataset, Fail> {
    ds.as_ref().map(|d| &d.inner).ok_or_else(|| null("dataset"))
}

unsafe fn head_ref<'a>(h: *const TgHead) -> Result<&'a EncoderHead, Fail> {
    h.as_ref().map(|h| &h.inner).ok_or_else(|| null("head"))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn tg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a feature file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_dataset_load(path: *const c_char, out: *mut *mut TgDataset) -> TgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ds = dataset::load_feature_file(str_arg(path, "path")?)?;
        *out = boxed(TgDataset { inner: ds });
        Ok(())
    })
}

/// Draw a synthetic dataset from a named preset ("acceptance" or "banking").
/// When `truth_path` is non-NULL the true centers are written there.
///
/// # Safety
/// `preset` must be a NUL-terminated string, `truth_path` NULL or one;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_dataset_generate(
    preset: *const c_char,
    seed: u64,
    truth_path: *const c_char,
    out: *mut *mut TgDataset,
) -> TgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = SyntheticConfig::preset(str_arg(preset, "preset")?, seed)?;
        let (ds, truth) = synthetic::make_synthetic(&cfg)?;
        if !truth_path.is_null() {
            synthetic::save_truth(&truth, &ds, str_arg(truth_path, "truth_path")?)?;
        }
        *out = boxed(TgDataset { inner: ds });
        Ok(())
    })
}

/// Write a dataset as a feature file.
///
/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tg_dataset_save(ds: *const TgDataset, path: *const c_char) -> TgStatus {
    guard(|| {
        dataset::save_feature_file(dataset_ref(ds)?, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tg_dataset_free(ds: *mut TgDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of instances, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tg_dataset_len(ds: *const TgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Embedding dimension, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tg_dataset_dim(ds: *const TgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.dim())
}

/// Number of categories, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tg_dataset_num_categories(ds: *const TgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.num_categories())
}

/// Number of categories with labeled instances, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tg_dataset_num_known(ds: *const TgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.num_known())
}

/// Harmonic mean of known and novel accuracy; 0 when either is 0.
#[no_mangle]
pub extern "C" fn tg_h_score(known: f64, novel: f64) -> f64 {
    evaluation::h_score(known, novel)
}

/// Minimum-cost assignment on a `rows x cols` cost matrix. Writes, for each
/// row, its column or -1 when unassigned (only possible if rows > cols).
///
/// # Safety
/// `cost` must hold `rows * cols` doubles, `row_to_col` `rows` slots;
/// `total_cost` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn tg_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    row_to_col: *mut i64,
    total_cost: *mut f64,
) -> TgStatus {
    guard(|| {
        let m = matrix(cost, rows, cols, "cost")?;
        let a = assignment::solve(&m)?;
        if rows > 0 {
            if row_to_col.is_null() {
                return Err(null("row_to_col"));
            }
            let out = std::slice::from_raw_parts_mut(row_to_col, rows);
            for (o, c) in out.iter_mut().zip(&a.row_to_col) {
                *o = c.map_or(-1, |c| c as i64);
            }
        }
        if let Some(t) = total_cost.as_mut() {
            *t = a.total_cost;
        }
        Ok(())
    })
}

/// Clustering accuracy of `pred` against `gt` under the best one-to-one
/// cluster-to-category mapping.
///
/// # Safety
/// `pred` and `gt` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_hungarian_accuracy(pred: *const u32, gt: *const u32, n: usize, out: *mut f64) -> TgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if n > 0 && (pred.is_null() || gt.is_null()) {
            return Err(null("labels"));
        }
        let (p, g): (Vec<usize>, Vec<u32>) = if n == 0 {
            (Vec::new(), Vec::new())
        } else {
            (
                std::slice::from_raw_parts(pred, n).iter().map(|&v| v as usize).collect(),
                std::slice::from_raw_parts(gt, n).to_vec(),
            )
        };
        *out = evaluation::hungarian_accuracy(&p, &g)?.0;
        Ok(())
    })
}

/// k-means++ with restarts. `assignment` receives `n` cluster ids, `centers`
/// (may be NULL) `k * dim` values, `inertia` (may be NULL) the final inertia.
///
/// # Safety
/// Buffer sizes must match the arguments.
#[no_mangle]
pub unsafe extern "C" fn tg_kmeans(
    points: *const f64,
    n: usize,
    dim: usize,
    k: usize,
    seed: u64,
    assignment: *mut u32,
    centers: *mut f64,
    inertia: *mut f64,
) -> TgStatus {
    guard(|| {
        let pts = matrix(points, n, dim, "points")?;
        let cl = clustering::KMeans::new(k).seed(seed).fit(&pts)?;
        if n > 0 {
            if assignment.is_null() {
                return Err(null("assignment"));
            }
            let out = std::slice::from_raw_parts_mut(assignment, n);
            for (o, &a) in out.iter_mut().zip(&cl.assignment) {
                *o = a as u32;
            }
        }
        if !centers.is_null() {
            let out = std::slice::from_raw_parts_mut(centers, k * dim);
            for (chunk, c) in out.chunks_mut(dim.max(1)).zip(&cl.centers) {
                chunk.copy_from_slice(c);
            }
        }
        if let Some(i) = inertia.as_mut() {
            *i = cl.inertia;
        }
        Ok(())
    })
}

/// Calibrate `n_unlabeled` prototypes with `n_labeled` labeled ones using the
/// `k` nearest labeled prototypes and weight `alpha` on the original.
/// Writes `n_unlabeled * dim` values to `out`.
///
/// # Safety
/// Buffer sizes must match the arguments.
#[no_mangle]
pub unsafe extern "C" fn tg_calibrate(
    unlabeled: *const f64,
    n_unlabeled: usize,
    labeled: *const f64,
    n_labeled: usize,
    dim: usize,
    k: usize,
    alpha: f64,
    out: *mut f64,
) -> TgStatus {
    guard(|| {
        let pu = PrototypeSet::new(
            PrototypeKind::Unlabeled,
            (0..n_unlabeled).collect(),
            matrix(unlabeled, n_unlabeled, dim, "unlabeled")?,
        )?;
        let pl = PrototypeSet::new(
            PrototypeKind::Labeled,
            (0..n_labeled).collect(),
            matrix(labeled, n_labeled, dim, "labeled")?,
        )?;
        let (pc, _) = prototypes::calibrate(&pu, &pl, k, alpha)?;
        if n_unlabeled > 0 && dim > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            let o = std::slice::from_raw_parts_mut(out, n_unlabeled * dim);
            for (chunk, v) in o.chunks_mut(dim).zip(&pc.vectors) {
                chunk.copy_from_slice(v);
            }
        }
        Ok(())
    })
}

/// Load a head checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_head_load(path: *const c_char, out: *mut *mut TgHead) -> TgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let h = EncoderHead::load(str_arg(path, "path")?)?;
        *out = boxed(TgHead { inner: h });
        Ok(())
    })
}

/// Save a head checkpoint.
///
/// # Safety
/// `head` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tg_head_save(head: *const TgHead, path: *const c_char) -> TgStatus {
    guard(|| {
        head_ref(head)?.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `head` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tg_head_free(head: *mut TgHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// Output feature dimension, or 0 for NULL.
///
/// # Safety
/// `head` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tg_head_output_dim(head: *const TgHead) -> usize {
    head.as_ref().map_or(0, |h| h.inner.output_dim())
}

/// Eval-mode features of one input vector of length `in_dim`, written to
/// `out` (capacity `out_dim`, which must equal the head's output dimension).
///
/// # Safety
/// Buffer sizes must match the arguments.
#[no_mangle]
pub unsafe extern "C" fn tg_head_embed(
    head: *const TgHead,
    x: *const f64,
    in_dim: usize,
    out: *mut f64,
    out_dim: usize,
) -> TgStatus {
    guard(|| {
        let h = head_ref(head)?;
        if x.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        if out_dim != h.output_dim() {
            return Err(Error::Shape {
                expected: h.output_dim(),
                actual: out_dim,
            }
            .into());
        }
        let z = h.embed(std::slice::from_raw_parts(x, in_dim))?;
        std::slice::from_raw_parts_mut(out, out_dim).copy_from_slice(&z);
        Ok(())
    })
}

/// Initialize and pretrain a head on the labeled split.
///
/// # Safety
/// `ds` must be a live handle, `config_json` NULL or a NUL-terminated
/// string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_pretrain(ds: *const TgDataset, config_json: *const c_char, out: *mut *mut TgHead) -> TgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ds = dataset_ref(ds)?;
        let cfg = config_arg(config_json)?;
        let (h, _) = trainer::pretrain(trainer::init_head(ds, &cfg)?, ds, &cfg)?;
        *out = boxed(TgHead { inner: h });
        Ok(())
    })
}

/// Alignment training starting from a copy of `pretrained`. The trained head
/// goes to `out`; final-epoch test metrics to `metrics` (may be NULL).
///
/// # Safety
/// Handles must be live, `config_json` NULL or a NUL-terminated string;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_train(
    ds: *const TgDataset,
    pretrained: *const TgHead,
    config_json: *const c_char,
    out: *mut *mut TgHead,
    metrics: *mut TgMetrics,
) -> TgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ds = dataset_ref(ds)?;
        let head = head_ref(pretrained)?.clone();
        let cfg = config_arg(config_json)?;
        let res = trainer::train(head, ds, &cfg, None)?;
        if let (Some(m), Some(f)) = (metrics.as_mut(), res.final_metrics()) {
            *m = TgMetrics::from(f);
        }
        *out = boxed(TgHead { inner: res.head });
        Ok(())
    })
}

/// Cluster the test split's features into `k_clusters` groups and score them.
///
/// # Safety
/// Handles must be live; `metrics` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_evaluate(
    ds: *const TgDataset,
    head: *const TgHead,
    k_clusters: usize,
    seed: u64,
    metrics: *mut TgMetrics,
) -> TgStatus {
    guard(|| {
        let m = out_ptr(metrics, "metrics")?;
        let r = trainer::evaluate(head_ref(head)?, dataset_ref(ds)?, k_clusters, seed, false)?;
        *m = TgMetrics::from(&r);
        Ok(())
    })
}
