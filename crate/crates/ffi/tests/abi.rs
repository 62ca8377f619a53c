use std::ffi::{CStr, CString};
use std::ptr;

use rankloss::fixture::BlobSpec;
use rankloss::formats::{model_to_json, save_dataset};
use rankloss::network::train_toy;
use rankloss_ffi::*;

fn last_error() -> String {
    let p = rl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_model() -> (tempfile::TempDir, CString, CString) {
    let dir = tempfile::tempdir().unwrap();
    let data = BlobSpec {
        classes: 3,
        samples: 120,
        dims: 4,
    }
    .generate(1)
    .unwrap();
    let net = train_toy(&[4, 16, 3], &data, 100, 0.1, 5).unwrap().network;
    let data_path = dir.path().join("data.csv");
    save_dataset(&data, &data_path).unwrap();
    let model = CString::new(model_to_json(&net)).unwrap();
    let data_c = CString::new(data_path.to_str().unwrap()).unwrap();
    (dir, model, data_c)
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(rl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn json_round_trip_through_handles() {
    let (_dir, model, _) = small_model();
    unsafe {
        let mut net = ptr::null_mut();
        assert_eq!(rl_network_from_json(model.as_ptr(), &mut net), RlStatus::Ok);
        assert!(rl_last_error().is_null());
        let (mut layers, mut params) = (0, 0);
        assert_eq!(
            rl_network_shape(net, &mut layers, &mut params),
            RlStatus::Ok
        );
        assert_eq!((layers, params), (2, 4 * 16 + 16 * 3));
        let mut text = ptr::null_mut();
        assert_eq!(rl_network_to_json(net, &mut text), RlStatus::Ok);
        assert_eq!(CStr::from_ptr(text).to_bytes(), model.as_bytes());
        rl_string_free(text);
        rl_network_free(net);
    }
}

#[test]
fn evaluate_and_compress() {
    let (_dir, model, data_path) = small_model();
    unsafe {
        let mut net = ptr::null_mut();
        let mut data = ptr::null_mut();
        assert_eq!(rl_network_from_json(model.as_ptr(), &mut net), RlStatus::Ok);
        assert_eq!(rl_dataset_load(data_path.as_ptr(), &mut data), RlStatus::Ok);
        assert_eq!(rl_dataset_len(data), 120);
        let (mut loss, mut top1) = (0.0, 0.0);
        assert_eq!(rl_evaluate(net, data, &mut loss, &mut top1), RlStatus::Ok);
        assert!(loss.is_finite() && (0.0..=1.0).contains(&top1));

        let config = CString::new(r#"{"mode": "compact", "epsilon": 0.05}"#).unwrap();
        let mut small = ptr::null_mut();
        let mut report = ptr::null_mut();
        assert_eq!(
            rl_compress(net, data, config.as_ptr(), &mut small, &mut report),
            RlStatus::Ok
        );
        let report_text = CStr::from_ptr(report).to_str().unwrap();
        let parsed = rankloss::report::report_from_json(report_text).unwrap();
        let mut after = 0.0;
        assert_eq!(
            rl_evaluate(small, data, &mut after, ptr::null_mut()),
            RlStatus::Ok
        );
        assert!((after - parsed.calibration.after.loss).abs() <= 1e-8 * after.max(1.0));
        let mut params = 0;
        rl_network_shape(small, ptr::null_mut(), &mut params);
        assert_eq!(params, parsed.totals.compressed_params);

        let bad = CString::new(r#"{"mode": "fastest"}"#).unwrap();
        let mut unused = ptr::null_mut();
        assert_eq!(
            rl_compress(net, data, bad.as_ptr(), &mut unused, ptr::null_mut()),
            RlStatus::InvalidInput
        );
        assert!(unused.is_null());
        assert!(last_error().contains("config json"));

        rl_string_free(report);
        rl_network_free(small);
        rl_network_free(net);
        rl_dataset_free(data);
    }
}

#[test]
#[allow(clippy::needless_range_loop)]
fn factorize_into_caller_buffers() {
    let w = [3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0];
    let (mut l, mut r) = ([0.0; 4], [0.0; 3]);
    let status = unsafe { rl_factorize(w.as_ptr(), 4, 3, 1, l.as_mut_ptr(), r.as_mut_ptr()) };
    assert_eq!(status, RlStatus::Ok);
    for i in 0..4 {
        for j in 0..3 {
            let want = if (i, j) == (0, 0) { 3.0 } else { 0.0 };
            assert!((l[i] * r[j] - want).abs() < 1e-12);
        }
    }
    let status = unsafe { rl_factorize(w.as_ptr(), 4, 3, 4, l.as_mut_ptr(), r.as_mut_ptr()) };
    assert_eq!(status, RlStatus::InvalidRank);
    assert!(last_error().contains("rank"));
    assert_eq!(rl_max_compressive_rank(4, 3), 1);
    assert_eq!(rl_max_compressive_rank(2, 2), 0);
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut net = ptr::null_mut();
        assert_eq!(
            rl_network_load(ptr::null(), &mut net),
            RlStatus::NullPointer
        );
        let missing = CString::new("/no/such/model.json").unwrap();
        assert_eq!(rl_network_load(missing.as_ptr(), &mut net), RlStatus::Io);
        assert!(last_error().contains("/no/such/model.json"));
        let junk = CString::new("{\"format_version\": 1}").unwrap();
        assert_eq!(
            rl_network_from_json(junk.as_ptr(), &mut net),
            RlStatus::InvalidInput
        );
        assert!(net.is_null());

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "not json").unwrap();
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        assert_eq!(rl_network_load(bad.as_ptr(), &mut net), RlStatus::Format);
        assert_eq!(
            rl_evaluate(ptr::null(), ptr::null(), ptr::null_mut(), ptr::null_mut()),
            RlStatus::NullPointer
        );
        rl_network_free(ptr::null_mut());
        rl_dataset_free(ptr::null_mut());
        rl_string_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_per_thread() {
    let mut net = ptr::null_mut();
    unsafe { rl_network_load(ptr::null(), &mut net) };
    assert!(!rl_last_error().is_null());
    std::thread::spawn(|| assert!(rl_last_error().is_null()))
        .join()
        .unwrap();
}
