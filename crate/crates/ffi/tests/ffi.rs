use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use rapl::*;

fn last_error() -> String {
    let n = unsafe { rapl_last_error_message(ptr::null_mut(), 0) };
    let mut buf = vec![0u8; n + 1];
    unsafe { rapl_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
    CStr::from_bytes_until_nul(&buf).unwrap().to_str().unwrap().to_string()
}

#[test]
fn hungarian_solves_a_small_instance() {
    let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
    let mut out = [0usize; 3];
    let st = unsafe { rapl_hungarian(cost.as_ptr(), 3, out.as_mut_ptr()) };
    assert_eq!(st, RaplStatus::Ok);
    let total: f64 = out.iter().enumerate().map(|(r, &c)| cost[r * 3 + c]).sum();
    assert_eq!(total, 5.0);
}

#[test]
fn errors_carry_a_message() {
    let cost = [f64::NAN];
    let mut out = [0usize; 1];
    let st = unsafe { rapl_hungarian(cost.as_ptr(), 1, out.as_mut_ptr()) };
    assert_ne!(st, RaplStatus::Ok);
    assert!(!last_error().is_empty());

    let st = unsafe { rapl_hungarian(ptr::null(), 2, out.as_mut_ptr()) };
    assert_eq!(st, RaplStatus::NullPointer);
    assert!(last_error().contains("cost"));
}

#[test]
fn truncated_error_message_is_terminated() {
    let st = unsafe { rapl_hungarian(ptr::null(), 2, ptr::null_mut()) };
    assert_eq!(st, RaplStatus::NullPointer);
    let mut buf = [0x7fu8; 4];
    let full = unsafe { rapl_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
    assert!(full > 3);
    assert_eq!(buf[3], 0);
}

#[test]
fn accuracy_is_permutation_invariant() {
    let t = [0usize, 0, 1, 1, 2];
    let p = [2usize, 2, 0, 0, 1];
    let mut acc = 0.0;
    let st = unsafe { rapl_clustering_accuracy(t.as_ptr(), p.as_ptr(), 5, 3, &mut acc) };
    assert_eq!(st, RaplStatus::Ok);
    assert_eq!(acc, 1.0);

    let bad = [0usize, 0, 1, 1, 7];
    let st = unsafe { rapl_clustering_accuracy(t.as_ptr(), bad.as_ptr(), 5, 3, &mut acc) };
    assert_eq!(st, RaplStatus::InvalidArgument);
}

#[test]
fn kmeans_separates_two_blobs() {
    let pts = [0.0, 0.0, 0.1, 0.0, 10.0, 10.0, 10.1, 10.0];
    let mut a = [0usize; 4];
    let mut c = [0.0; 4];
    let st = unsafe { rapl_kmeans(pts.as_ptr(), 4, 2, 2, 7, a.as_mut_ptr(), c.as_mut_ptr()) };
    assert_eq!(st, RaplStatus::Ok);
    assert_eq!(a[0], a[1]);
    assert_eq!(a[2], a[3]);
    assert_ne!(a[0], a[2]);
    let st = unsafe { rapl_kmeans(pts.as_ptr(), 4, 2, 2, 7, a.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, RaplStatus::Ok);
}

#[test]
fn channel_groups_cover_every_region() {
    let mut g = vec![0usize; 2048];
    let st = unsafe { rapl_channel_groups(2048, 14, 14, g.as_mut_ptr()) };
    assert_eq!(st, RaplStatus::Ok);
    assert_eq!(g[0], 0);
    assert_eq!(g[2047], 195);
    let st = unsafe { rapl_channel_groups(4, 3, 3, g.as_mut_ptr()) };
    assert_eq!(st, RaplStatus::Config);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(rapl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn experiment_lifecycle() {
    let cfg = CString::new(
        "[data]\nnum_old = 3\nnum_new = 2\ntrain_per_class = 4\ntest_per_class = 2\n\
         [train]\npretrain_epochs = 1\ndiscover_epochs = 1\nwarmup_epochs = 1\nbatch_size = 6\n",
    )
    .unwrap();
    let mut h: *mut RaplExperiment = ptr::null_mut();
    unsafe {
        assert_eq!(rapl_experiment_new(cfg.as_ptr(), 3, &mut h), RaplStatus::Ok, "{}", last_error());
        assert!(!h.is_null());

        let mut acc = 0.0;
        let st = rapl_experiment_accuracy(h, RAPL_PROTOCOL_TASK_AGNOSTIC, &mut acc, ptr::null_mut(), ptr::null_mut());
        assert_eq!(st, RaplStatus::State);

        assert_eq!(rapl_experiment_run(h), RaplStatus::Ok, "{}", last_error());
        let (mut old, mut new) = (0.0, 0.0);
        assert_eq!(
            rapl_experiment_accuracy(h, RAPL_PROTOCOL_TASK_AGNOSTIC, &mut acc, &mut old, &mut new),
            RaplStatus::Ok
        );
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(
            rapl_experiment_accuracy(h, RAPL_PROTOCOL_TASK_AWARE, &mut acc, &mut old, &mut new),
            RaplStatus::Ok
        );
        assert!(old.is_nan());
        assert_eq!(
            rapl_experiment_accuracy(h, 9, &mut acc, ptr::null_mut(), ptr::null_mut()),
            RaplStatus::InvalidArgument
        );

        let (mut rows, mut cols) = (0, 0);
        assert_eq!(
            rapl_experiment_embeddings(h, RAPL_SPLIT_TEST, ptr::null_mut(), 0, &mut rows, &mut cols),
            RaplStatus::Ok
        );
        assert_eq!(rows, 10);
        let mut buf = vec![0.0; rows * cols];
        assert_eq!(
            rapl_experiment_embeddings(h, RAPL_SPLIT_TEST, buf.as_mut_ptr(), 1, &mut rows, &mut cols),
            RaplStatus::BufferTooSmall
        );
        assert_eq!(
            rapl_experiment_embeddings(h, RAPL_SPLIT_TEST, buf.as_mut_ptr(), buf.len(), &mut rows, &mut cols),
            RaplStatus::Ok
        );
        assert!(buf.iter().all(|v| v.is_finite()));

        let mut count = 0;
        let mut labels = vec![0usize; rows];
        assert_eq!(
            rapl_experiment_labels(h, RAPL_SPLIT_TEST, labels.as_mut_ptr(), labels.len(), &mut count),
            RaplStatus::Ok
        );
        assert_eq!(count, rows);
        assert!(labels.iter().all(|&l| l < 5));
        rapl_experiment_free(h);
        rapl_experiment_free(ptr::null_mut());
    }
}

#[test]
fn bad_config_is_reported() {
    let cfg = CString::new("[data]\nnum_old = 0\n").unwrap();
    let mut h: *mut RaplExperiment = ptr::null_mut();
    let st = unsafe { rapl_experiment_new(cfg.as_ptr(), 0, &mut h) };
    assert_ne!(st, RaplStatus::Ok);
    assert!(h.is_null());
    assert_eq!(unsafe { rapl_experiment_run(ptr::null_mut()) }, RaplStatus::NullPointer);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/rapl.h");
    assert!(header.exists());
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    assert!(status.success());
}
