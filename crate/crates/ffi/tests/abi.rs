use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use ovrec::contrastive::oracle::random_batch;
use ovrec::contrastive::{build_positive_bags, loss_in, LossConfig};
use ovrec::prompt::{write_emb, EmbTable};
use ovrec_ffi::*;

fn last_error() -> String {
    let p = ovrec_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn encode_origins(raw: &ovrec::contrastive::oracle::RawBatch) -> Vec<i64> {
    raw.origins
        .iter()
        .map(|o| match o {
            ovrec::contrastive::Origin::View => OVREC_ORIGIN_VIEW,
            ovrec::contrastive::Origin::Queue => OVREC_ORIGIN_QUEUE,
            ovrec::contrastive::Origin::Guide { anchor } => *anchor as i64,
        })
        .collect()
}

#[test]
fn loss_matches_library() {
    let raw = random_batch(3, 8, 16, 3, 2);
    let flat = raw.flat();
    let origins = encode_origins(&raw);
    let rows = raw.z.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; flat.len()];
    let status = unsafe {
        ovrec_contrastive_loss(
            flat.as_ptr(),
            rows,
            16,
            raw.verbs.as_ptr(),
            origins.as_ptr(),
            OvrecLossKind::In,
            0.07,
            0.1,
            1.0,
            OvrecDenominator::IncludeGuides,
            &mut value,
            grad.as_mut_ptr(),
        )
    };
    assert_eq!(status, OvrecStatus::Ok);
    let b = raw.to_batch();
    let want = loss_in(&b, &build_positive_bags(&b), &LossConfig::default()).unwrap();
    assert_eq!(value, want.value);
    assert_eq!(grad.as_slice(), want.grad.as_slice().unwrap());
}

#[test]
fn loss_rejects_bad_origin_and_null() {
    let raw = random_batch(4, 4, 8, 2, 0);
    let flat = raw.flat();
    let mut origins = encode_origins(&raw);
    origins[0] = -7;
    let mut value = 0.0;
    let mut grad = vec![0.0; flat.len()];
    let mut call = |origins: &[i64], value: *mut f64| unsafe {
        ovrec_contrastive_loss(
            flat.as_ptr(),
            4,
            8,
            raw.verbs.as_ptr(),
            origins.as_ptr(),
            OvrecLossKind::Out,
            0.07,
            0.1,
            1.0,
            OvrecDenominator::IncludeGuides,
            value,
            grad.as_mut_ptr(),
        )
    };
    assert_eq!(call(&origins, &mut value), OvrecStatus::InvalidArgument);
    assert!(last_error().contains("origin code -7"));
    origins[0] = OVREC_ORIGIN_VIEW;
    assert_eq!(call(&origins, ptr::null_mut()), OvrecStatus::NullPointer);
    assert!(last_error().contains("value"));
}

#[test]
fn clip_ops_round_trip() {
    let (t, h, w, c) = (3, 2, 2, 1);
    let a: Vec<f32> = (0..12).map(|i| (i % 5) as f32 / 4.0).collect();
    let b: Vec<f32> = (0..12).map(|i| ((i * 7) % 3) as f32 / 2.0).collect();
    let mut g = vec![0.0f32; 12];
    assert_eq!(
        unsafe { ovrec_temporal_gradient(a.as_ptr(), t, h, w, c, g.as_mut_ptr()) },
        OvrecStatus::Ok
    );
    assert!(g[..4].iter().all(|&v| v == 0.0));
    assert_eq!(g.iter().cloned().fold(0.0, f32::max), 1.0);

    let mut one = vec![0.0f32; 12];
    assert_eq!(
        unsafe { ovrec_object_mix(a.as_ptr(), b.as_ptr(), t, h, w, c, 1.0, one.as_mut_ptr()) },
        OvrecStatus::Ok
    );
    for i in 0..12 {
        assert_eq!(one[i], g[i] * a[i]);
    }
    let status =
        unsafe { ovrec_object_mix(a.as_ptr(), b.as_ptr(), t, h, w, c, 1.5, one.as_mut_ptr()) };
    assert_eq!(status, OvrecStatus::InvalidArgument);

    let bad = [2.0f32; 12];
    let status = unsafe { ovrec_temporal_gradient(bad.as_ptr(), t, h, w, c, g.as_mut_ptr()) };
    assert_eq!(status, OvrecStatus::InvalidArgument);
    assert!(last_error().contains("outside [0, 1]"));
}

#[test]
fn hm_and_ensemble() {
    assert!((ovrec_hm(47.8, 22.6) - 30.69).abs() < 0.01);
    assert_eq!(ovrec_hm(0.0, 0.0), 0.0);
    let pb = [0.6, 0.3, 0.1];
    let pn = [0.2, 0.2, 0.6];
    let novel = [false, false, true];
    let mut out = [0.0; 3];
    let status = unsafe {
        ovrec_ensemble(
            pb.as_ptr(),
            pn.as_ptr(),
            novel.as_ptr(),
            3,
            0.5,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, OvrecStatus::Ok);
    for i in 0..3 {
        assert!((out[i] - (pb[i] + pn[i]) / 2.0).abs() < 1e-15);
    }
    let status = unsafe {
        ovrec_ensemble(
            pb.as_ptr(),
            pn.as_ptr(),
            novel.as_ptr(),
            3,
            1.5,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, OvrecStatus::InvalidArgument);
}

#[test]
fn queue_handle_lifecycle() {
    let q = ovrec_queue_new(3);
    let z = [1.0, 0.0, 0.0, 1.0, 0.6, 0.8];
    let verbs = [0usize, 1, 2];
    let origins = [OVREC_ORIGIN_VIEW, 0, OVREC_ORIGIN_VIEW];
    let mut accepted = 0;
    unsafe {
        let status = ovrec_queue_update(
            q,
            z.as_ptr(),
            3,
            2,
            verbs.as_ptr(),
            origins.as_ptr(),
            &mut accepted,
        );
        assert_eq!(status, OvrecStatus::Ok);
        assert_eq!(accepted, 2);
        assert_eq!(ovrec_queue_len(q), 2);
        let mut row = [0.0; 2];
        let mut verb = 9;
        assert_eq!(
            ovrec_queue_get(q, 1, row.as_mut_ptr(), 2, &mut verb),
            OvrecStatus::Ok
        );
        assert_eq!((row, verb), ([0.6, 0.8], 2));
        assert_eq!(
            ovrec_queue_get(q, 5, row.as_mut_ptr(), 2, &mut verb),
            OvrecStatus::NotFound
        );

        let not_unit = [2.0, 0.0];
        let status = ovrec_queue_update(
            q,
            not_unit.as_ptr(),
            1,
            2,
            verbs.as_ptr(),
            origins.as_ptr(),
            ptr::null_mut(),
        );
        assert_eq!(status, OvrecStatus::InvalidArgument);
        assert_eq!(ovrec_queue_len(q), 2);
        ovrec_queue_free(q);
        ovrec_queue_free(ptr::null_mut());
        assert_eq!(ovrec_queue_len(ptr::null()), 0);
    }
}

#[test]
fn emb_table_handle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tokens.emb");
    let mut table = EmbTable::new(2);
    table.push("cup", vec![0.5, -1.0]).unwrap();
    table.push("knife", vec![2.0, 0.25]).unwrap();
    write_emb(&path, &table).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(
            ovrec_emb_open(c_path.as_ptr(), &mut handle),
            OvrecStatus::Ok
        );
        assert_eq!((ovrec_emb_dim(handle), ovrec_emb_len(handle)), (2, 2));
        let mut v = [0.0f32; 2];
        let name = CString::new("knife").unwrap();
        assert_eq!(
            ovrec_emb_get(handle, name.as_ptr(), v.as_mut_ptr(), 2),
            OvrecStatus::Ok
        );
        assert_eq!(v, [2.0, 0.25]);
        let missing = CString::new("spoon").unwrap();
        assert_eq!(
            ovrec_emb_get(handle, missing.as_ptr(), v.as_mut_ptr(), 2),
            OvrecStatus::NotFound
        );
        assert_eq!(
            ovrec_emb_get(handle, name.as_ptr(), v.as_mut_ptr(), 3),
            OvrecStatus::ShapeMismatch
        );
        ovrec_emb_free(handle);

        let nowhere = CString::new(dir.path().join("absent.emb").to_str().unwrap()).unwrap();
        assert_eq!(
            ovrec_emb_open(nowhere.as_ptr(), &mut handle),
            OvrecStatus::Io
        );
        std::fs::write(&path, b"EMB2").unwrap();
        assert_eq!(
            ovrec_emb_open(c_path.as_ptr(), &mut handle),
            OvrecStatus::Format
        );
        assert!(last_error().contains("magic"));
    }
}

/// Compiles a C program against the generated header and the static
/// library built alongside this test.
#[test]
fn c_program_links_against_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(
        header_dir.join("ovrec.h").exists(),
        "header is generated by build.rs"
    );
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libovrec_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!(
            "skipping: no C compiler or static library at {}",
            lib.display()
        );
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "ovrec.h"
int main(void) {
    double p_base[2] = {0.75, 0.25}, p_novel[2] = {0.25, 0.75}, out[2];
    bool novel[2] = {false, true};
    if (ovrec_ensemble(p_base, p_novel, novel, 2, 0.5, out) != OVREC_STATUS_OK) return 1;
    if (out[0] != 0.5 || out[1] != 0.5) return 2;
    if (ovrec_ensemble(p_base, p_novel, novel, 2, 2.0, out) != OVREC_STATUS_INVALID_ARGUMENT) return 3;
    if (ovrec_last_error() == NULL) return 4;
    OvrecQueue *q = ovrec_queue_new(4);
    ovrec_queue_free(q);
    printf("%.4f\n", ovrec_hm(39.9, 7.3));
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C program compiles and links");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "12.3419");
}
