use std::ffi::{c_char, CStr, CString};
use std::ptr;

use sidemoe_ffi::*;

fn last_error() -> String {
    let mut needed = 0;
    unsafe {
        assert_eq!(sm_last_error(ptr::null_mut(), 0, &mut needed), SmStatus::BufferTooSmall);
        let mut buf = vec![0u8; needed];
        assert_eq!(sm_last_error(buf.as_mut_ptr().cast(), buf.len(), &mut needed), SmStatus::Ok);
        CStr::from_bytes_with_nul(&buf).unwrap().to_str().unwrap().to_owned()
    }
}

fn text(f: impl Fn(*mut c_char, usize, *mut usize) -> SmStatus) -> String {
    let mut needed = 0;
    assert_eq!(f(ptr::null_mut(), 0, &mut needed), SmStatus::BufferTooSmall);
    let mut buf = vec![0u8; needed];
    assert_eq!(f(buf.as_mut_ptr().cast(), buf.len(), &mut needed), SmStatus::Ok);
    CStr::from_bytes_with_nul(&buf).unwrap().to_str().unwrap().to_owned()
}

#[test]
fn hand_example_through_the_abi() {
    let w = [-1.0, 0.0, 2.0];
    let mut q = ptr::null_mut();
    unsafe {
        assert_eq!(sm_quantize(w.as_ptr(), 3, 8, SmRounding::Floor, &mut q), SmStatus::Ok);
        let mut p = SmQuantParams { scale: 0.0, zero_point: 0, bits: 0, r_min: 0.0, r_max: 0.0 };
        assert_eq!(sm_quantized_params(q, &mut p), SmStatus::Ok);
        assert_eq!((p.scale, p.zero_point, p.bits), (3.0 / 255.0, 85, 8));
        assert_eq!(sm_quantized_len(q), 3);

        let mut codes = [0u32; 3];
        let mut needed = 0;
        assert_eq!(sm_quantized_codes(q, codes.as_mut_ptr(), 3, &mut needed), SmStatus::Ok);
        assert_eq!(codes, [0, 85, 255]);
        assert_eq!(sm_quantized_codes(q, codes.as_mut_ptr(), 2, &mut needed), SmStatus::BufferTooSmall);
        assert_eq!(needed, 3);

        let mut deq = [f64::NAN; 3];
        assert_eq!(sm_quantized_dequantize(q, deq.as_mut_ptr(), 3, &mut needed), SmStatus::Ok);
        assert_eq!(deq, w);
        let (mut err, mut max) = (f64::NAN, f64::NAN);
        assert_eq!(sm_quantized_error(q, w.as_ptr(), 3, &mut err, &mut max), SmStatus::Ok);
        assert_eq!((err, max), (0.0, 0.0));

        assert_eq!(sm_quantized_to_blob(q, ptr::null_mut(), 0, &mut needed), SmStatus::BufferTooSmall);
        let mut blob = vec![0u8; needed];
        assert_eq!(sm_quantized_to_blob(q, blob.as_mut_ptr(), blob.len(), &mut needed), SmStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(sm_quantized_from_blob(blob.as_ptr(), blob.len(), &mut back), SmStatus::Ok);
        let mut again = [0u32; 3];
        assert_eq!(sm_quantized_codes(back, again.as_mut_ptr(), 3, &mut needed), SmStatus::Ok);
        assert_eq!(again, codes);
        sm_quantized_free(back);
        sm_quantized_free(q);
        sm_quantized_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_codes_with_messages() {
    let mut q = ptr::null_mut();
    unsafe {
        let w = [1.0, f64::NAN];
        assert_eq!(sm_quantize(w.as_ptr(), 2, 8, SmRounding::Floor, &mut q), SmStatus::Numeric);
        assert!(q.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(sm_quantize([1.0].as_ptr(), 1, 1, SmRounding::Floor, &mut q), SmStatus::Config);
        assert_eq!(sm_quantize(ptr::null(), 4, 8, SmRounding::Floor, &mut q), SmStatus::NullPointer);
        assert!(last_error().contains("weights"));
        assert_eq!(sm_quantized_from_blob(b"junk".as_ptr(), 4, &mut q), SmStatus::Format);
        let bad = CString::new("[router]\nexpertz = 2\n").unwrap();
        let mut cfg = ptr::null_mut();
        assert_eq!(sm_config_from_toml(bad.as_ptr(), &mut cfg), SmStatus::Config);
        assert!(last_error().contains("expertz"));
        assert!(cfg.is_null());
    }
}

#[test]
fn route_weights() {
    let scores = [0.1, 2.0, -1.0, 0.5];
    let corr = [0.25; 4];
    let mut w = [f64::NAN; 4];
    unsafe {
        assert_eq!(
            sm_route(scores.as_ptr(), corr.as_ptr(), 4, 2, SmPostMask::Renormalize, w.as_mut_ptr()),
            SmStatus::Ok
        );
        assert_eq!(w.iter().filter(|&&x| x > 0.0).count(), 2);
        assert!(w[1] > 0.0 && w[3] > 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(
            sm_route(scores.as_ptr(), corr.as_ptr(), 4, 5, SmPostMask::Softmax, w.as_mut_ptr()),
            SmStatus::Config
        );
    }
}

#[test]
fn config_and_memory_report() {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(sm_config_default(&mut cfg), SmStatus::Ok);
        assert_eq!(sm_config_set_seed(cfg, 7), SmStatus::Ok);
        let toml = text(|b, c, n| sm_config_to_toml(cfg, b, c, n));
        assert!(toml.starts_with("seed = 7"), "{toml}");
        let json = text(|b, c, n| sm_memory_report_json(cfg, b, c, n));
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["petl_floor"].as_f64().unwrap() > 0.0);
        assert_eq!(v["r_sweep"].as_array().unwrap().len(), 4);
        sm_config_free(cfg);
    }
}

#[test]
fn tiny_training_run() {
    let toml = CString::new(
        "[task]\ntrain_size = 16\nval_size = 8\ntest_size = 8\n[backbone]\nlayers = 1\npretrain_epochs = 1\n[train]\nepochs = 2\n",
    )
    .unwrap();
    let mut cfg = ptr::null_mut();
    let mut run = ptr::null_mut();
    unsafe {
        assert_eq!(sm_config_from_toml(toml.as_ptr(), &mut cfg), SmStatus::Ok);
        assert_eq!(sm_train(cfg, &mut run), SmStatus::Ok);
        let (mut val, mut test) = (f64::NAN, f64::NAN);
        assert_eq!(sm_run_accuracy(run, &mut val, &mut test), SmStatus::Ok);
        assert!((0.0..=1.0).contains(&val) && (0.0..=1.0).contains(&test));
        let csv = text(|b, c, n| sm_run_report_csv(run, b, c, n));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("epoch,"));
        let summary = text(|b, c, n| sm_run_summary_json(run, b, c, n));
        assert!(summary.contains("\"test_accuracy\""));
        let events = text(|b, c, n| sm_run_events_csv(run, b, c, n));
        assert!(events.is_empty());
        sm_run_free(run);
        sm_config_free(cfg);
    }
}
