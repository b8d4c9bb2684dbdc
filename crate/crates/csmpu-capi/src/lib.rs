//! C ABI for the csmpu toolkit: opaque handles, status codes, and a
//! last-error message per thread.
//!
//! Conventions: functions return [`CsmpuStatus`]; results come back through
//! out-pointers. Matrices cross the boundary as row-major `double` buffers
//! with explicit dimensions. Handles are created and released by the
//! paired `_new`/`_free` functions; passing a handle after `_free` is
//! undefined behavior, as in any C API.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use csmpu::data::{gen_synthetic, MpuDataset};
use csmpu::model::{init_scorer, Architecture, Mode, Scorer};
use csmpu::prior::{estimate_priors, np_lower_bound, project_feasible, PipelineConfig};
use csmpu::risk::{empirical_risk, Correction, Estimator, RiskConfig};
use csmpu::surrogate::{constant_sum_check, LossFamily, SurrogateSpec, SymClip};
use csmpu::train::{evaluate, train, TrainConfig};
use ndarray::ArrayView2;

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsmpuStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    RuntimeError = 3,
    Panic = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let message = message.into();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(message).ok();
    });
}

fn fail(status: CsmpuStatus, message: impl Into<String>) -> CsmpuStatus {
    set_error(message);
    status
}

fn from_error(e: csmpu::Error) -> CsmpuStatus {
    let status = match e {
        csmpu::Error::InvalidConfig(_)
        | csmpu::Error::Domain(_)
        | csmpu::Error::ShapeMismatch(_)
        | csmpu::Error::Infeasible(_) => CsmpuStatus::InvalidArgument,
        _ => CsmpuStatus::RuntimeError,
    };
    fail(status, e.to_string())
}

fn guarded(f: impl FnOnce() -> CsmpuStatus) -> CsmpuStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(CsmpuStatus::Panic, "internal panic"),
    }
}

/// Returns the message of the most recent error on this thread as a newly
/// allocated string, or NULL when no error has occurred. Free it with
/// [`csmpu_string_free`].
#[no_mangle]
pub extern "C" fn csmpu_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(msg) => msg.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// Frees a string allocated by this library.
///
/// # Safety
/// `s` must be NULL or a pointer previously returned by a `csmpu_*`
/// string-producing function, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csmpu_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, CsmpuStatus> {
    if ptr.is_null() {
        return Err(fail(CsmpuStatus::NullPointer, format!("{name} is NULL")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(CsmpuStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

/// Opaque surrogate-loss handle.
pub struct CsmpuSurrogate(SurrogateSpec);

/// Opaque MPU dataset handle.
pub struct CsmpuDataset(MpuDataset);

/// Opaque scorer handle.
pub struct CsmpuScorer(Scorer);

/// Creates a surrogate loss. `family` is one of `unhinged`, `sigmoid_prob`,
/// `tanh_smooth`, `hinge`, `ramp`, `logistic`; `symmetrize` selects the
/// symmetrized-and-clipped variant.
///
/// # Safety
/// `family` must be a valid NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn csmpu_surrogate_new(
    family: *const c_char,
    gamma: f64,
    symmetrize: bool,
    out: *mut *mut CsmpuSurrogate,
) -> CsmpuStatus {
    guarded(|| {
        if out.is_null() {
            return fail(CsmpuStatus::NullPointer, "out is NULL");
        }
        let name = match str_arg(family, "family") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let Some(family) = LossFamily::parse(name) else {
            return fail(
                CsmpuStatus::InvalidArgument,
                format!("unknown loss family {name:?}"),
            );
        };
        let sym = if symmetrize { SymClip::Sym } else { SymClip::Raw };
        match SurrogateSpec::new(family, gamma, sym) {
            Ok(spec) => {
                *out = Box::into_raw(Box::new(CsmpuSurrogate(spec)));
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `handle` must be NULL or a live handle from `csmpu_surrogate_new`.
#[no_mangle]
pub unsafe extern "C" fn csmpu_surrogate_free(handle: *mut CsmpuSurrogate) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Evaluates the loss at margin `z`.
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn csmpu_surrogate_eval(
    handle: *const CsmpuSurrogate,
    z: f64,
    out: *mut f64,
) -> CsmpuStatus {
    guarded(|| {
        if handle.is_null() || out.is_null() {
            return fail(CsmpuStatus::NullPointer, "NULL pointer");
        }
        match (*handle).0.eval(z) {
            Ok(v) => {
                *out = v;
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Derivative `dl/dz` under the library's fixed subgradient conventions.
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn csmpu_surrogate_derivative(
    handle: *const CsmpuSurrogate,
    z: f64,
    out: *mut f64,
) -> CsmpuStatus {
    guarded(|| {
        if handle.is_null() || out.is_null() {
            return fail(CsmpuStatus::NullPointer, "NULL pointer");
        }
        match (*handle).0.derivative(z) {
            Ok(v) => {
                *out = v;
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Max and 99th-percentile residuals of `|l(z) + l(-z) - 1|` on a uniform
/// grid.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csmpu_surrogate_const_sum_check(
    handle: *const CsmpuSurrogate,
    grid_lo: f64,
    grid_hi: f64,
    n_points: usize,
    out_max: *mut f64,
    out_p99: *mut f64,
) -> CsmpuStatus {
    guarded(|| {
        if handle.is_null() || out_max.is_null() || out_p99.is_null() {
            return fail(CsmpuStatus::NullPointer, "NULL pointer");
        }
        match constant_sum_check(&(*handle).0, grid_lo, grid_hi, n_points) {
            Ok(report) => {
                *out_max = report.max_residual;
                *out_p99 = report.p99_residual;
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Generates the 2-D Gaussian synthetic MPU dataset: `k` classes on a
/// regular polygon of circumradius `separation`, labeled sets for classes
/// `0..k-1`, a pool of `n_unlabeled` mixture draws with hidden labels.
///
/// # Safety
/// `priors` must point to `n_priors` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn csmpu_dataset_synthetic(
    k: usize,
    priors: *const f64,
    n_priors: usize,
    n_labeled_per_class: usize,
    n_unlabeled: usize,
    separation: f64,
    seed: u64,
    out: *mut *mut CsmpuDataset,
) -> CsmpuStatus {
    guarded(|| {
        if priors.is_null() || out.is_null() {
            return fail(CsmpuStatus::NullPointer, "NULL pointer");
        }
        let priors = std::slice::from_raw_parts(priors, n_priors);
        match gen_synthetic(k, priors, n_labeled_per_class, n_unlabeled, separation, seed) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(CsmpuDataset(ds)));
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `handle` must be NULL or a live handle from `csmpu_dataset_synthetic`.
#[no_mangle]
pub unsafe extern "C" fn csmpu_dataset_free(handle: *mut CsmpuDataset) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Creates a scorer: `widths` spells the layer sizes from input to output,
/// He-normal initialized from `seed`, batch norm on all hidden layers when
/// `batch_norm` is set.
///
/// # Safety
/// `widths` must point to `n_widths` entries; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn csmpu_scorer_new(
    widths: *const usize,
    n_widths: usize,
    batch_norm: bool,
    seed: u64,
    out: *mut *mut CsmpuScorer,
) -> CsmpuStatus {
    guarded(|| {
        if widths.is_null() || out.is_null() {
            return fail(CsmpuStatus::NullPointer, "NULL pointer");
        }
        let widths = std::slice::from_raw_parts(widths, n_widths);
        if widths.len() < 2 {
            return fail(
                CsmpuStatus::InvalidArgument,
                "need at least input and output widths",
            );
        }
        let arch = Architecture::mlp(
            widths[0],
            &widths[1..widths.len() - 1],
            widths[widths.len() - 1],
            batch_norm,
        );
        match init_scorer(arch, seed) {
            Ok(scorer) => {
                *out = Box::into_raw(Box::new(CsmpuScorer(scorer)));
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `handle` must be NULL or a live handle from a scorer constructor.
#[no_mangle]
pub unsafe extern "C" fn csmpu_scorer_free(handle: *mut CsmpuScorer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Scores `n` rows of width `d` (row-major) in inference mode into `out`
/// (`n * k` doubles, row-major).
///
/// # Safety
/// `x` must hold `n * d` doubles and `out` must hold `n * k` doubles.
#[no_mangle]
pub unsafe extern "C" fn csmpu_scorer_forward(
    handle: *const CsmpuScorer,
    x: *const f64,
    n: usize,
    d: usize,
    out: *mut f64,
) -> CsmpuStatus {
    guarded(|| {
        if handle.is_null() || x.is_null() || out.is_null() {
            return fail(CsmpuStatus::NullPointer, "NULL pointer");
        }
        let scorer = &(*handle).0;
        let data = std::slice::from_raw_parts(x, n * d);
        let matrix = match ArrayView2::from_shape((n, d), data) {
            Ok(m) => m,
            Err(e) => return fail(CsmpuStatus::InvalidArgument, e.to_string()),
        };
        match scorer.forward(&matrix, Mode::Infer) {
            Ok(scores) => {
                let k = scorer.k();
                let out = std::slice::from_raw_parts_mut(out, n * k);
                for (dst, src) in out.iter_mut().zip(scores.iter()) {
                    *dst = *src;
                }
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Serializes the scorer checkpoint to JSON. Free with `csmpu_string_free`.
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn csmpu_scorer_to_json(
    handle: *const CsmpuScorer,
    out: *mut *mut c_char,
) -> CsmpuStatus {
    guarded(|| {
        if handle.is_null() || out.is_null() {
            return fail(CsmpuStatus::NullPointer, "NULL pointer");
        }
        match CString::new((*handle).0.to_json()) {
            Ok(s) => {
                *out = s.into_raw();
                CsmpuStatus::Ok
            }
            Err(_) => fail(CsmpuStatus::RuntimeError, "interior NUL in checkpoint"),
        }
    })
}

/// Restores a scorer from a JSON checkpoint.
///
/// # Safety
/// `json` must be a valid NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn csmpu_scorer_from_json(
    json: *const c_char,
    out: *mut *mut CsmpuScorer,
) -> CsmpuStatus {
    guarded(|| {
        if out.is_null() {
            return fail(CsmpuStatus::NullPointer, "out is NULL");
        }
        let text = match str_arg(json, "json") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match Scorer::from_json(text) {
            Ok(scorer) => {
                *out = Box::into_raw(Box::new(CsmpuScorer(scorer)));
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

fn risk_config(
    dataset: &MpuDataset,
    estimator: &str,
    correction: &str,
    surrogate: &SurrogateSpec,
) -> Result<RiskConfig, CsmpuStatus> {
    let estimator = Estimator::parse(estimator).ok_or_else(|| {
        fail(
            CsmpuStatus::InvalidArgument,
            format!("unknown estimator {estimator:?}"),
        )
    })?;
    let correction = Correction::parse(correction).ok_or_else(|| {
        fail(
            CsmpuStatus::InvalidArgument,
            format!("unknown correction {correction:?}"),
        )
    })?;
    RiskConfig::new(
        dataset.k(),
        dataset.priors().to_vec(),
        *surrogate,
        correction,
        estimator,
    )
    .map_err(from_error)
}

/// Evaluates the configured risk estimator on the full dataset in inference
/// mode, writing the total into `out_total`.
///
/// # Safety
/// All pointers must be valid; `estimator`/`correction` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn csmpu_risk(
    dataset: *const CsmpuDataset,
    scorer: *const CsmpuScorer,
    estimator: *const c_char,
    correction: *const c_char,
    surrogate: *const CsmpuSurrogate,
    out_total: *mut f64,
) -> CsmpuStatus {
    guarded(|| {
        if dataset.is_null() || scorer.is_null() || surrogate.is_null() || out_total.is_null() {
            return fail(CsmpuStatus::NullPointer, "NULL pointer");
        }
        let est = match str_arg(estimator, "estimator") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let corr = match str_arg(correction, "correction") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let cfg = match risk_config(&(*dataset).0, est, corr, &(*surrogate).0) {
            Ok(cfg) => cfg,
            Err(status) => return status,
        };
        match empirical_risk(&cfg, &(*dataset).0.view(), &(*scorer).0, Mode::Infer) {
            Ok(report) => {
                *out_total = report.total;
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Trains the scorer in place with adaptive-moment steps and writes the
/// final epoch's mean training risk into `out_final_risk`.
///
/// # Safety
/// All pointers must be valid; `estimator`/`correction` NUL-terminated.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn csmpu_train(
    scorer: *mut CsmpuScorer,
    dataset: *const CsmpuDataset,
    estimator: *const c_char,
    correction: *const c_char,
    surrogate: *const CsmpuSurrogate,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    out_final_risk: *mut f64,
) -> CsmpuStatus {
    guarded(|| {
        if scorer.is_null() || dataset.is_null() || surrogate.is_null() {
            return fail(CsmpuStatus::NullPointer, "NULL pointer");
        }
        let est = match str_arg(estimator, "estimator") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let corr = match str_arg(correction, "correction") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let risk = match risk_config(&(*dataset).0, est, corr, &(*surrogate).0) {
            Ok(cfg) => cfg,
            Err(status) => return status,
        };
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
            eval_every: usize::MAX - 1,
            risk,
        };
        match train(&cfg, &(*dataset).0, (*scorer).0.clone()) {
            Ok((trained, history)) => {
                (*scorer).0 = trained;
                if !out_final_risk.is_null() {
                    *out_final_risk = history
                        .records
                        .last()
                        .map(|r| r.train_risk)
                        .unwrap_or(f64::NAN);
                }
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Accuracy and macro-F1 of the scorer on the pool against its hidden
/// labels (synthetic/benchmark datasets only).
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csmpu_evaluate_pool(
    scorer: *const CsmpuScorer,
    dataset: *const CsmpuDataset,
    out_accuracy: *mut f64,
    out_macro_f1: *mut f64,
) -> CsmpuStatus {
    guarded(|| {
        if scorer.is_null() || dataset.is_null() || out_accuracy.is_null() || out_macro_f1.is_null()
        {
            return fail(CsmpuStatus::NullPointer, "NULL pointer");
        }
        let ds = &(*dataset).0;
        let Some(labels) = ds.hidden_labels() else {
            return fail(
                CsmpuStatus::InvalidArgument,
                "dataset carries no hidden labels",
            );
        };
        match evaluate(&(*scorer).0, &ds.unlabeled().view(), labels, ds.k()) {
            Ok(metrics) => {
                *out_accuracy = metrics.accuracy;
                *out_macro_f1 = metrics.macro_f1;
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// The NP-type class-prior lower bound
/// `clamp((pool_accept - alpha) / max(pos_accept, epsilon), 0, 1)`.
#[no_mangle]
pub extern "C" fn csmpu_np_lower_bound(
    pool_accept_rate: f64,
    pos_accept_rate: f64,
    alpha: f64,
    epsilon: f64,
) -> f64 {
    np_lower_bound(pool_accept_rate, pos_accept_rate, alpha, epsilon)
}

/// Projects `pi` onto `{pi_i >= lower_i, sum pi <= 1}` (uniform slack
/// scaling), writing `n` doubles into `out`.
///
/// # Safety
/// `pi`, `lower`, `out` must each point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn csmpu_project_feasible(
    pi: *const f64,
    lower: *const f64,
    n: usize,
    out: *mut f64,
) -> CsmpuStatus {
    guarded(|| {
        if pi.is_null() || lower.is_null() || out.is_null() {
            return fail(CsmpuStatus::NullPointer, "NULL pointer");
        }
        let pi = std::slice::from_raw_parts(pi, n);
        let lower = std::slice::from_raw_parts(lower, n);
        match project_feasible(pi, lower) {
            Ok(projected) => {
                std::slice::from_raw_parts_mut(out, n).copy_from_slice(&projected);
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Runs the margin-based prior pipeline (NP lower bounds, detectability,
/// penalized-L1 moment matching with library defaults). `pool` is row-major
/// `n_pool x m`; `pos[i]` is row-major `pos_rows[i] x m`. Writes `m` point
/// estimates and `m` lower bounds.
///
/// # Safety
/// Buffer dimensions must match the documented layout.
#[no_mangle]
pub unsafe extern "C" fn csmpu_estimate_priors(
    pool: *const f64,
    n_pool: usize,
    pos: *const *const f64,
    pos_rows: *const usize,
    m: usize,
    out_point: *mut f64,
    out_lower: *mut f64,
) -> CsmpuStatus {
    guarded(|| {
        if pool.is_null()
            || pos.is_null()
            || pos_rows.is_null()
            || out_point.is_null()
            || out_lower.is_null()
        {
            return fail(CsmpuStatus::NullPointer, "NULL pointer");
        }
        let pool_slice = std::slice::from_raw_parts(pool, n_pool * m);
        let pool_matrix = match ArrayView2::from_shape((n_pool, m), pool_slice) {
            Ok(v) => v.to_owned(),
            Err(e) => return fail(CsmpuStatus::InvalidArgument, e.to_string()),
        };
        let pos_ptrs = std::slice::from_raw_parts(pos, m);
        let pos_lens = std::slice::from_raw_parts(pos_rows, m);
        let mut pos_matrices = Vec::with_capacity(m);
        for (i, (&p, &rows)) in pos_ptrs.iter().zip(pos_lens).enumerate() {
            if p.is_null() {
                return fail(CsmpuStatus::NullPointer, format!("pos[{i}] is NULL"));
            }
            let slice = std::slice::from_raw_parts(p, rows * m);
            match ArrayView2::from_shape((rows, m), slice) {
                Ok(v) => pos_matrices.push(v.to_owned()),
                Err(e) => return fail(CsmpuStatus::InvalidArgument, e.to_string()),
            }
        }
        let config = PipelineConfig::default();
        match estimate_priors(&config, &pool_matrix.view(), &pos_matrices) {
            Ok(est) => {
                std::slice::from_raw_parts_mut(out_point, m).copy_from_slice(&est.point);
                std::slice::from_raw_parts_mut(out_lower, m).copy_from_slice(&est.lower_bounds);
                CsmpuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
