//! C ABI over `rapl-core`.
//!
//! Every function returns a [`RaplStatus`]. On failure the message is kept in
//! thread-local storage and can be read with [`rapl_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use rapl_core::cluster::{clustering_accuracy, hungarian, kmeans, KMeansOptions, Protocol};
use rapl_core::cra::build_grouping;
use rapl_core::numerics::Tensor;
use rapl_core::pipeline::experiment::eval_features;
use rapl_core::pipeline::{run_experiment, ExperimentConfig, RunOptions, RunOutcome};
use rapl_core::synth::{generate, Dataset, SplitTag};
use rapl_core::RaplError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RaplStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    NonFinite = 4,
    Config = 5,
    State = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Protocol codes accepted by [`rapl_experiment_accuracy`].
pub const RAPL_PROTOCOL_TASK_AGNOSTIC: u32 = 0;
pub const RAPL_PROTOCOL_TASK_AWARE: u32 = 1;

/// Split codes accepted by [`rapl_experiment_embeddings`].
pub const RAPL_SPLIT_LABELED_TRAIN: u32 = 0;
pub const RAPL_SPLIT_UNLABELED_TRAIN: u32 = 1;
pub const RAPL_SPLIT_TEST: u32 = 2;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &RaplError) -> RaplStatus {
    match err {
        RaplError::Dimension(_) => RaplStatus::Dimension,
        RaplError::Config(_) => RaplStatus::Config,
        RaplError::InvalidArgument(_) | RaplError::GradCheck { .. } => RaplStatus::InvalidArgument,
        RaplError::NonFinite(_) => RaplStatus::NonFinite,
        RaplError::State(_) => RaplStatus::State,
        RaplError::Io { .. } | RaplError::Format { .. } | RaplError::Json(_) | RaplError::Csv(_) => RaplStatus::Io,
    }
}

struct Fail(RaplStatus, String);

impl From<RaplError> for Fail {
    fn from(e: RaplError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: RaplStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

/// Runs `f`, records any error or panic and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RaplStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RaplStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            RaplStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(RaplStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(RaplStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn out_scalar<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| fail(RaplStatus::NullPointer, format!("{name} is null")))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<Tensor, Fail> {
    Ok(Tensor::new(vec![rows, cols], data.to_vec())?)
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating to `capacity`. Returns the full message
/// length without the terminator; call with `buf = NULL` to size a buffer.
///
/// # Safety
/// `buf` must be NULL or point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rapl_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rapl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Minimum-cost assignment for a row-major `n×n` cost matrix.
/// `assignment[row]` receives the chosen column.
///
/// # Safety
/// `cost` must hold `n*n` values and `assignment` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn rapl_hungarian(cost: *const f64, n: usize, assignment: *mut usize) -> RaplStatus {
    guard(|| {
        let cost = matrix(input(cost, n * n, "cost")?, n, n)?;
        let out = output(assignment, n, "assignment")?;
        out.copy_from_slice(&hungarian(&cost)?);
        Ok(())
    })
}

/// Clustering accuracy of `y_pred` against `y_true` under the best
/// cluster-to-class bijection. Ids must be below `num_classes`.
///
/// # Safety
/// `y_true` and `y_pred` must hold `n` values; `acc` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rapl_clustering_accuracy(
    y_true: *const usize,
    y_pred: *const usize,
    n: usize,
    num_classes: usize,
    acc: *mut f64,
) -> RaplStatus {
    guard(|| {
        let t = input(y_true, n, "y_true")?;
        let p = input(y_pred, n, "y_pred")?;
        let out = out_scalar(acc, "acc")?;
        *out = clustering_accuracy(t, p, num_classes)?.acc;
        Ok(())
    })
}

/// k-means with k-means++ seeding on `n` row-major points of dimension `d`.
/// `centroids` may be NULL; otherwise it receives `k*d` values.
///
/// # Safety
/// `points` must hold `n*d` values, `assignments` room for `n`, and
/// `centroids` (if not NULL) room for `k*d`.
#[no_mangle]
pub unsafe extern "C" fn rapl_kmeans(
    points: *const f64,
    n: usize,
    d: usize,
    k: usize,
    seed: u64,
    assignments: *mut usize,
    centroids: *mut f64,
) -> RaplStatus {
    guard(|| {
        let x = matrix(input(points, n * d, "points")?, n, d)?;
        let opts = KMeansOptions {
            seed,
            ..Default::default()
        };
        let res = kmeans(&x, k, &opts)?;
        output(assignments, n, "assignments")?.copy_from_slice(&res.assignments);
        if !centroids.is_null() {
            output(centroids, k * d, "centroids")?.copy_from_slice(res.centroids.data());
        }
        Ok(())
    })
}

/// Region index of each of `d` channels when split over an `h×w` grid.
///
/// # Safety
/// `group_of_channel` must have room for `d` values.
#[no_mangle]
pub unsafe extern "C" fn rapl_channel_groups(d: usize, h: usize, w: usize, group_of_channel: *mut usize) -> RaplStatus {
    guard(|| {
        let g = build_grouping(d, h, w)?;
        output(group_of_channel, d, "group_of_channel")?.copy_from_slice(&g.group_of_channel);
        Ok(())
    })
}

/// A synthetic dataset plus its experiment config and, once run, the trained
/// state.
pub struct RaplExperiment {
    config: ExperimentConfig,
    dataset: Dataset,
    outcome: Option<RunOutcome>,
}

impl RaplExperiment {
    fn outcome(&self) -> Result<&RunOutcome, Fail> {
        self.outcome
            .as_ref()
            .ok_or_else(|| fail(RaplStatus::State, "experiment has not been run"))
    }
}

fn split_tag(code: u32) -> Result<SplitTag, Fail> {
    match code {
        RAPL_SPLIT_LABELED_TRAIN => Ok(SplitTag::LabeledTrain),
        RAPL_SPLIT_UNLABELED_TRAIN => Ok(SplitTag::UnlabeledTrain),
        RAPL_SPLIT_TEST => Ok(SplitTag::Test),
        s => Err(fail(RaplStatus::InvalidArgument, format!("unknown split {s}"))),
    }
}

unsafe fn handle<'a>(h: *mut RaplExperiment) -> Result<&'a mut RaplExperiment, Fail> {
    h.as_mut()
        .ok_or_else(|| fail(RaplStatus::NullPointer, "experiment handle is null"))
}

/// Builds an experiment from TOML text (NULL or empty for defaults), applies
/// `seed` to data, initialization and training, and generates the dataset.
///
/// # Safety
/// `config_toml` must be NULL or a NUL-terminated UTF-8 string; `out` must be
/// writable. The handle must be released with [`rapl_experiment_free`].
#[no_mangle]
pub unsafe extern "C" fn rapl_experiment_new(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut RaplExperiment,
) -> RaplStatus {
    guard(|| {
        let slot = out_scalar(out, "out")?;
        *slot = ptr::null_mut();
        let config = if config_toml.is_null() {
            ExperimentConfig::default()
        } else {
            let text = CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|_| fail(RaplStatus::InvalidArgument, "config is not UTF-8"))?;
            ExperimentConfig::from_toml_str(text)?
        }
        .with_seed(seed);
        config.validate()?;
        let dataset = generate(&config.data)?;
        *slot = Box::into_raw(Box::new(RaplExperiment {
            config,
            dataset,
            outcome: None,
        }));
        Ok(())
    })
}

/// Runs pre-training, discovery and the final evaluation.
///
/// # Safety
/// `h` must come from [`rapl_experiment_new`] and not be freed.
#[no_mangle]
pub unsafe extern "C" fn rapl_experiment_run(h: *mut RaplExperiment) -> RaplStatus {
    guard(|| {
        let exp = handle(h)?;
        exp.outcome = Some(run_experiment(&exp.config, &exp.dataset, RunOptions::default())?);
        Ok(())
    })
}

/// Final accuracy under `protocol`. `acc_old` and `acc_new` receive NaN when
/// the protocol does not report them; any of the three may be NULL.
///
/// # Safety
/// `h` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn rapl_experiment_accuracy(
    h: *mut RaplExperiment,
    protocol: u32,
    acc_all: *mut f64,
    acc_old: *mut f64,
    acc_new: *mut f64,
) -> RaplStatus {
    guard(|| {
        let exp = handle(h)?;
        let protocol = match protocol {
            RAPL_PROTOCOL_TASK_AGNOSTIC => Protocol::TaskAgnostic,
            RAPL_PROTOCOL_TASK_AWARE => Protocol::TaskAware,
            p => return Err(fail(RaplStatus::InvalidArgument, format!("unknown protocol {p}"))),
        };
        let r = exp
            .outcome()?
            .final_report(protocol)
            .ok_or_else(|| fail(RaplStatus::State, "no final report for this protocol"))?;
        for (p, v) in [
            (acc_all, Some(r.acc_all)),
            (acc_old, r.acc_old),
            (acc_new, r.acc_new),
        ] {
            if let Some(slot) = p.as_mut() {
                *slot = v.unwrap_or(f64::NAN);
            }
        }
        Ok(())
    })
}

/// Writes the trained embeddings of one split, row-major, and their extents.
/// With `out = NULL` only `rows` and `cols` are filled. Fails with
/// `BUFFER_TOO_SMALL` if `capacity < rows*cols`.
///
/// # Safety
/// `h` must be a live handle; `out` must be NULL or hold `capacity` values;
/// `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rapl_experiment_embeddings(
    h: *mut RaplExperiment,
    split: u32,
    out: *mut f64,
    capacity: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> RaplStatus {
    guard(|| {
        let exp = handle(h)?;
        let tag = split_tag(split)?;
        let idx = exp.dataset.indices(tag);
        let emb = eval_features(
            &exp.outcome()?.state.encoder,
            &exp.dataset,
            &idx,
            exp.config.eval.features,
        )?;
        let (r, c) = (emb.rows(), emb.row_len());
        *out_scalar(rows, "rows")? = r;
        *out_scalar(cols, "cols")? = c;
        if out.is_null() {
            return Ok(());
        }
        if capacity < r * c {
            return Err(fail(
                RaplStatus::BufferTooSmall,
                format!("need {} values, got {capacity}", r * c),
            ));
        }
        output(out, r * c, "out")?.copy_from_slice(emb.data());
        Ok(())
    })
}

/// Class ids of one split in the row order of [`rapl_experiment_embeddings`].
///
/// # Safety
/// `h` must be a live handle; `labels` must hold `capacity` values and
/// `count` be writable.
#[no_mangle]
pub unsafe extern "C" fn rapl_experiment_labels(
    h: *mut RaplExperiment,
    split: u32,
    labels: *mut usize,
    capacity: usize,
    count: *mut usize,
) -> RaplStatus {
    guard(|| {
        let exp = handle(h)?;
        let tag = split_tag(split)?;
        let ids = exp.dataset.labels(&exp.dataset.indices(tag));
        *out_scalar(count, "count")? = ids.len();
        if labels.is_null() {
            return Ok(());
        }
        if capacity < ids.len() {
            return Err(fail(
                RaplStatus::BufferTooSmall,
                format!("need {} values, got {capacity}", ids.len()),
            ));
        }
        output(labels, ids.len(), "labels")?.copy_from_slice(&ids);
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `h` must be NULL or a handle from [`rapl_experiment_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rapl_experiment_free(h: *mut RaplExperiment) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}
