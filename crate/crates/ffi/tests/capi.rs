use std::ffi::{CStr, CString};
use std::ptr;

use demoval_ffi::*;

fn last_error() -> String {
    let p = dv_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn additive(v0: f64, gamma: f64, w: &[f64]) -> *mut DvModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dv_model_new_additive(v0, gamma, w.as_ptr(), w.len(), &mut m) }, DvStatus::Ok);
    m
}

fn values(t: *const DvTable) -> Vec<(f64, u64)> {
    (0..unsafe { dv_table_len(t) })
        .map(|i| {
            let (mut v, mut c) = (0.0, 0);
            assert_eq!(unsafe { dv_table_get(t, i, &mut v, &mut c) }, DvStatus::Ok);
            (v, c)
        })
        .collect()
}

#[test]
fn score_and_exact_values() {
    let m = additive(0.5, 0.5, &[0.1, -0.05, 0.0]);
    let mut v = 0.0;
    assert_eq!(unsafe { dv_model_score(m, [0usize, 1].as_ptr(), 2, &mut v) }, DvStatus::Ok);
    assert!((v - 0.575).abs() < 1e-12);

    let mut t = ptr::null_mut();
    assert_eq!(unsafe { dv_exact_values(m, 2, 1000, &mut t) }, DvStatus::Ok);
    let got = values(t);
    let want = [0.075, -0.0375, 0.0];
    for ((v, c), w) in got.iter().zip(want) {
        assert!((v - w).abs() < 1e-12, "{v} vs {w}");
        assert_eq!(*c, 4);
    }
    unsafe {
        dv_table_free(t);
        dv_model_free(m);
    }
}

#[test]
fn sampled_values_converge_and_merge() {
    let m = additive(0.5, 1.0, &[0.1, -0.05, 0.0]);
    let (mut a, mut b, mut merged) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(dv_compute_values(m, 2, 200, 0.0, 1, &mut a), DvStatus::Ok);
        assert_eq!(dv_compute_values(m, 2, 100, 0.0, 2, &mut b), DvStatus::Ok);
        assert_eq!(dv_table_merge(a, b, &mut merged), DvStatus::Ok);
    }
    // additive with gamma = 1: every marginal is the weight itself
    for ((v, _), w) in values(merged).iter().zip([0.1, -0.05, 0.0]) {
        assert!((v - w).abs() < 1e-12);
    }
    let total: u64 = values(merged).iter().map(|r| r.1).sum();
    assert_eq!(total, 600);
    unsafe {
        for t in [a, b, merged] {
            dv_table_free(t);
        }
        dv_model_free(m);
    }
}

#[test]
fn json_model_with_interactions() {
    let spec = CString::new(
        r#"{"v0":0.5,"gamma":1.0,"weights":{"x":0.1,"y":0.0},"interactions":[{"before":"x","after":"y","value":0.05}]}"#,
    )
    .unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dv_model_from_json(spec.as_ptr(), &mut m) }, DvStatus::Ok);
    let mut v = 0.0;
    unsafe {
        assert_eq!(dv_model_score(m, [0usize, 1].as_ptr(), 2, &mut v), DvStatus::Ok);
        assert!((v - 0.65).abs() < 1e-12);
        assert_eq!(dv_model_score(m, [1usize, 0].as_ptr(), 2, &mut v), DvStatus::Ok);
        assert!((v - 0.6).abs() < 1e-12);
        dv_model_free(m);
    }
}

#[test]
fn ids_and_csv() {
    let m = additive(0.5, 1.0, &[0.0; 12]);
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(dv_compute_values(m, 1, 1, 0.0, 0, &mut t), DvStatus::Ok);
        let mut buf = [0 as std::ffi::c_char; 3];
        assert_eq!(dv_table_id(t, 11, buf.as_mut_ptr(), buf.len()), 3);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "d1");
        assert_eq!(dv_table_id(t, 12, ptr::null_mut(), 0), 0);
        let mut csv = ptr::null_mut();
        assert_eq!(dv_table_to_csv(t, &mut csv), DvStatus::Ok);
        let text = CStr::from_ptr(csv).to_str().unwrap().to_string();
        assert!(text.starts_with("demo_id,value,count\nd00,"));
        assert_eq!(text.lines().count(), 13);
        dv_string_free(csv);
        dv_table_free(t);
        dv_model_free(m);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(dv_model_new_additive(1.5, 1.0, [0.1].as_ptr(), 1, &mut m), DvStatus::InvalidArgument);
        assert!(last_error().contains("v0"));
        assert_eq!(dv_model_new_additive(0.5, 1.0, ptr::null(), 2, &mut m), DvStatus::NullPointer);
        let bad = CString::new("{").unwrap();
        assert_eq!(dv_model_from_json(bad.as_ptr(), &mut m), DvStatus::Io);

        let m = additive(0.5, 1.0, &[0.1, 0.2, 0.3, 0.4]);
        let mut v = 0.0;
        assert_eq!(dv_model_score(m, [7usize].as_ptr(), 1, &mut v), DvStatus::UnknownId);
        let mut t = ptr::null_mut();
        assert_eq!(dv_exact_values(m, 4, 10, &mut t), DvStatus::BudgetExceeded);
        assert_eq!(dv_compute_values(m, 5, 1, 0.0, 0, &mut t), DvStatus::InvalidArgument);
        assert!(t.is_null());
        assert_eq!(dv_model_score(ptr::null(), ptr::null(), 0, &mut v), DvStatus::NullPointer);
        dv_model_free(m);
    }
}

#[test]
fn running_mean_and_fairness() {
    let mut phi = 0.0;
    unsafe {
        for (t, x) in [0.2, 0.4, 0.9].into_iter().enumerate() {
            assert_eq!(dv_update_running_mean(phi, t as u64 + 1, x, &mut phi), DvStatus::Ok);
        }
        assert!((phi - 0.5).abs() < 1e-12);
        assert_eq!(dv_update_running_mean(0.0, 0, 1.0, &mut phi), DvStatus::InvalidArgument);

        let y = [1u8, 1, 0, 0, 1, 1, 0, 0];
        let f = [1u8, 1, 1, 0, 1, 0, 0, 0];
        let a = [1u8, 1, 1, 1, 0, 0, 0, 0];
        let mut out = DvFairness::default();
        assert_eq!(dv_fairness_metrics(y.as_ptr(), f.as_ptr(), a.as_ptr(), 8, &mut out), DvStatus::Ok);
        assert_eq!((out.m_dpd, out.m_tp, out.m_fp, out.m_eod), (0.5, 0.5, 0.5, 0.5));
        let mut b = 1.0;
        assert_eq!(dv_base_rate_parity(y.as_ptr(), a.as_ptr(), 8, &mut b), DvStatus::Ok);
        assert_eq!(b, 0.0);

        let ones = [1u8; 4];
        assert_eq!(dv_fairness_metrics(y.as_ptr(), f.as_ptr(), ones.as_ptr(), 4, &mut out), DvStatus::Undefined);
        assert!(last_error().contains("A=0"));
    }
}
