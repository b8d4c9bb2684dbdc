//! Exercises the C ABI through the exported extern "C" functions, the same
//! way a foreign binding would.

use std::ffi::{CStr, CString};
use std::ptr;

use csmpu_capi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe {
        let ptr = csmpu_last_error_message();
        assert!(!ptr.is_null(), "expected an error message");
        let msg = CStr::from_ptr(ptr).to_string_lossy().into_owned();
        csmpu_string_free(ptr);
        msg
    }
}

#[test]
fn surrogate_roundtrip_and_errors() {
    unsafe {
        let mut handle: *mut CsmpuSurrogate = ptr::null_mut();
        let status = csmpu_surrogate_new(c("sigmoid_prob").as_ptr(), 1.0, false, &mut handle);
        assert_eq!(status, CsmpuStatus::Ok);

        let mut value = 0.0;
        assert_eq!(csmpu_surrogate_eval(handle, 0.0, &mut value), CsmpuStatus::Ok);
        assert_eq!(value, 0.5);

        let mut d = 0.0;
        assert_eq!(csmpu_surrogate_derivative(handle, 0.0, &mut d), CsmpuStatus::Ok);
        assert!((d + 0.25).abs() < 1e-12);

        let (mut max, mut p99) = (0.0, 0.0);
        assert_eq!(
            csmpu_surrogate_const_sum_check(handle, -10.0, 10.0, 2001, &mut max, &mut p99),
            CsmpuStatus::Ok
        );
        assert!(max <= 1e-6);
        assert!(p99 <= max);

        assert_eq!(
            csmpu_surrogate_eval(handle, f64::NAN, &mut value),
            CsmpuStatus::InvalidArgument
        );
        assert!(last_error().contains("finite"));
        csmpu_surrogate_free(handle);

        let mut bad: *mut CsmpuSurrogate = ptr::null_mut();
        assert_eq!(
            csmpu_surrogate_new(c("nope").as_ptr(), 1.0, false, &mut bad),
            CsmpuStatus::InvalidArgument
        );
        assert!(last_error().contains("nope"));
    }
}

#[test]
fn train_and_risk_through_the_abi() {
    unsafe {
        let priors = [0.25, 0.25, 0.5];
        let mut dataset: *mut CsmpuDataset = ptr::null_mut();
        assert_eq!(
            csmpu_dataset_synthetic(3, priors.as_ptr(), 3, 30, 90, 3.0, 11, &mut dataset),
            CsmpuStatus::Ok
        );

        let widths = [2usize, 8, 3];
        let mut scorer: *mut CsmpuScorer = ptr::null_mut();
        assert_eq!(
            csmpu_scorer_new(widths.as_ptr(), 3, true, 5, &mut scorer),
            CsmpuStatus::Ok
        );

        let mut surrogate: *mut CsmpuSurrogate = ptr::null_mut();
        assert_eq!(
            csmpu_surrogate_new(c("sigmoid_prob").as_ptr(), 1.0, false, &mut surrogate),
            CsmpuStatus::Ok
        );

        let mut final_risk = f64::NAN;
        let status = csmpu_train(
            scorer,
            dataset,
            c("csmpu").as_ptr(),
            c("abs").as_ptr(),
            surrogate,
            20,
            64,
            1e-2,
            3,
            &mut final_risk,
        );
        assert_eq!(status, CsmpuStatus::Ok);
        assert!(final_risk.is_finite() && final_risk >= 0.0);

        let mut total = f64::NAN;
        assert_eq!(
            csmpu_risk(
                dataset,
                scorer,
                c("csmpu").as_ptr(),
                c("none").as_ptr(),
                surrogate,
                &mut total
            ),
            CsmpuStatus::Ok
        );
        assert!(total.is_finite());

        let (mut acc, mut f1) = (0.0, 0.0);
        assert_eq!(
            csmpu_evaluate_pool(scorer, dataset, &mut acc, &mut f1),
            CsmpuStatus::Ok
        );
        assert!(acc > 0.5, "trained scorer should beat chance: {acc}");

        // Forward scores for two points.
        let x = [3.0, 0.0, -3.0, 0.0];
        let mut scores = [0.0; 6];
        assert_eq!(
            csmpu_scorer_forward(scorer, x.as_ptr(), 2, 2, scores.as_mut_ptr()),
            CsmpuStatus::Ok
        );
        assert!(scores.iter().all(|s| s.is_finite()));

        // Checkpoint JSON roundtrip.
        let mut json: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(csmpu_scorer_to_json(scorer, &mut json), CsmpuStatus::Ok);
        let mut restored: *mut CsmpuScorer = ptr::null_mut();
        assert_eq!(csmpu_scorer_from_json(json, &mut restored), CsmpuStatus::Ok);
        let mut scores2 = [0.0; 6];
        assert_eq!(
            csmpu_scorer_forward(restored, x.as_ptr(), 2, 2, scores2.as_mut_ptr()),
            CsmpuStatus::Ok
        );
        assert_eq!(scores, scores2);
        csmpu_string_free(json);

        csmpu_scorer_free(restored);
        csmpu_scorer_free(scorer);
        csmpu_dataset_free(dataset);
        csmpu_surrogate_free(surrogate);
    }
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        let mut out = 0.0;
        assert_eq!(
            csmpu_surrogate_eval(ptr::null(), 0.0, &mut out),
            CsmpuStatus::NullPointer
        );
    }
}

#[test]
fn prior_helpers_through_the_abi() {
    unsafe {
        let b = csmpu_np_lower_bound(0.30, 0.90, 0.05, 1e-6);
        assert!((b - 0.25 / 0.9).abs() < 1e-12);

        let pi = [0.7, 0.6];
        let lower = [0.0, 0.0];
        let mut out = [0.0, 0.0];
        assert_eq!(
            csmpu_project_feasible(pi.as_ptr(), lower.as_ptr(), 2, out.as_mut_ptr()),
            CsmpuStatus::Ok
        );
        assert!((out[0] + out[1] - 1.0).abs() < 1e-12);

        // Separated one-class mixture: pool is 40% positives at +4, the
        // rest at -4; the pipeline should land near 0.4.
        let n_pool = 4000;
        let n_pos = 1500;
        let mut pool = Vec::with_capacity(n_pool);
        let mut state = 88172645463325252u64;
        let mut rand = move || {
            // xorshift, good enough for a smoke test
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..n_pool {
            let center = if rand() < 0.4 { 4.0 } else { -4.0 };
            pool.push(center + (rand() - 0.5));
        }
        let pos: Vec<f64> = (0..n_pos).map(|_| 4.0 + (rand() - 0.5)).collect();
        let pos_ptrs = [pos.as_ptr()];
        let pos_rows = [n_pos];
        let mut point = [0.0];
        let mut lower_out = [0.0];
        assert_eq!(
            csmpu_estimate_priors(
                pool.as_ptr(),
                n_pool,
                pos_ptrs.as_ptr(),
                pos_rows.as_ptr(),
                1,
                point.as_mut_ptr(),
                lower_out.as_mut_ptr()
            ),
            CsmpuStatus::Ok
        );
        assert!((point[0] - 0.4).abs() < 0.05, "point {}", point[0]);
    }
}
