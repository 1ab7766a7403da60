use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use kqkit_ffi::*;

fn last_error() -> String {
    let p = kq_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Two classes of four points each along separate axes.
fn two_class_set(layer: u32) -> *mut KqRepresentationSet {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2u32 {
        for j in 0..4 {
            let jitter = 0.05 * j as f32;
            let row = if c == 0 {
                [1.0, jitter, 0.0]
            } else {
                [jitter, 1.0 + jitter, 0.5]
            };
            data.extend_from_slice(&row);
            labels.push(c);
        }
    }
    let mut out = ptr::null_mut();
    let status = unsafe { kq_set_new(layer, data.as_ptr(), labels.as_ptr(), 8, 3, 2, &mut out) };
    assert_eq!(status, KqStatus::Ok);
    out
}

#[test]
fn set_round_trips_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("l.rdmp").to_str().unwrap()).unwrap();
    let set = two_class_set(3);
    unsafe {
        assert_eq!(kq_set_len(set), 8);
        assert_eq!(kq_set_dim(set), 3);
        assert_eq!(kq_set_classes(set), 2);
        assert_eq!(kq_set_layer(set), 3);
        assert_eq!(kq_set_write(set, path.as_ptr()), KqStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(kq_set_read(path.as_ptr(), &mut back), KqStatus::Ok);
        assert_eq!(kq_set_len(back), 8);
        assert_eq!(kq_set_layer(back), 3);
        kq_set_free(back);
        kq_set_free(set);
    }
}

#[test]
fn analyze_matches_the_rust_api() {
    let set = two_class_set(1);
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(kq_analyze(set, 0, 0, &mut m), KqStatus::Ok);
        let mut v = KqMetricValues::default();
        assert_eq!(kq_metrics_values(m, &mut v), KqStatus::Ok);

        let mut json = ptr::null_mut();
        assert_eq!(kq_metrics_to_json(m, &mut json), KqStatus::Ok);
        let parsed: kqkit::LayerMetrics =
            serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        kq_string_free(json);

        assert_eq!(v.layer, 1);
        assert_eq!(parsed.q.to_bits(), v.q.to_bits());
        assert_eq!(parsed.s.to_bits(), v.s.to_bits());
        assert_eq!(v.q, kq_knowledge_quality(v.s, v.i, v.e));
        kq_metrics_free(m);
        kq_set_free(set);
    }
}

#[test]
fn select_topk_over_handles() {
    let sets: Vec<_> = (1..=3).map(two_class_set).collect();
    unsafe {
        let handles: Vec<*const KqLayerMetrics> = sets
            .iter()
            .map(|&s| {
                let mut m = ptr::null_mut();
                assert_eq!(kq_analyze(s, 0, 0, &mut m), KqStatus::Ok);
                m as *const _
            })
            .collect();
        let mut out = [0u32; 2];
        assert_eq!(
            kq_select_topk(handles.as_ptr(), 3, 2, out.as_mut_ptr()),
            KqStatus::Ok
        );
        assert_eq!(out, [2, 3]);
        assert_eq!(
            kq_select_topk(handles.as_ptr(), 3, 4, out.as_mut_ptr()),
            KqStatus::Selection
        );
        for h in handles {
            kq_metrics_free(h as *mut _);
        }
        for s in sets {
            kq_set_free(s);
        }
    }
}

#[test]
fn errors_report_status_and_message() {
    unsafe {
        let mut out = ptr::null_mut();
        let missing = CString::new("/nonexistent/dir/x.rdmp").unwrap();
        assert_eq!(kq_set_read(missing.as_ptr(), &mut out), KqStatus::Io);
        assert!(last_error().contains("x.rdmp"));

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.rdmp");
        std::fs::write(&bad, b"NOPE0000").unwrap();
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        assert_eq!(kq_set_read(bad.as_ptr(), &mut out), KqStatus::Format);

        let data = [0.0f32; 6];
        let labels = [0u32, 5];
        let status = kq_set_new(0, data.as_ptr(), labels.as_ptr(), 2, 3, 2, &mut out);
        assert_eq!(status, KqStatus::InvalidArgument);
        assert!(out.is_null());

        let labels = [0u32, 1];
        assert_eq!(
            kq_set_new(0, data.as_ptr(), labels.as_ptr(), 2, 3, 2, &mut out),
            KqStatus::Ok
        );
        let mut m = ptr::null_mut();
        assert_eq!(kq_analyze(out, 0, 0, &mut m), KqStatus::Degenerate);
        kq_set_free(out);

        assert_eq!(kq_analyze(ptr::null(), 0, 0, &mut m), KqStatus::NullPointer);
        kq_set_free(ptr::null_mut());
        kq_metrics_free(ptr::null_mut());
        kq_string_free(ptr::null_mut());
    }
}

#[test]
fn scalar_helpers() {
    unsafe {
        let mut r = 0.0;
        assert_eq!(kq_packing_radius(10, 1.0, 2, &mut r), KqStatus::Ok);
        assert_eq!(r, kqkit::packing_radius(10, 1.0, 2).unwrap());
        assert_eq!(kq_packing_radius(10, 1.0, 1, &mut r), KqStatus::Degenerate);

        let mut a = 0.0;
        assert_eq!(kq_ari(0.8, 0.7, 0.6, &mut a), KqStatus::Ok);
        assert_eq!(a, 1.0);
        assert_eq!(kq_ari(0.8, 0.6, 0.6, &mut a), KqStatus::UnstableAri);
    }
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/kqkit.h")).unwrap();
    let source =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(
            header.contains(&format!("{name}(")),
            "{name} missing from header"
        );
    }
    for ty in [
        "KqStatus",
        "KqRepresentationSet",
        "KqLayerMetrics",
        "KqMetricValues",
    ] {
        assert!(
            header.contains(&format!("typedef struct {ty}"))
                || header.contains(&format!("typedef enum {ty}"))
        );
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/kqkit.h"))
        .status()
    else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    assert!(status.success());
}
