use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use flatlab::datasets::{Label, LabeledSet, Space};
use flatlab::flatness::relative_flatness;
use flatlab::hessian::HeadHessianMode;
use flatlab::net::{checkpoint_to_string, split_at, Activation, CheckpointMeta, HeadLoss, Mlp};
use flatlab::numkit::{haar_orthogonal, Matrix, Rng};
use flatlab_ffi::*;

fn model() -> Mlp {
    let mut rng = Rng::new(5, 0);
    Mlp::glorot(
        &[3, 6, 4, 2],
        &[Activation::Tanh, Activation::Tanh, Activation::Identity],
        HeadLoss::SoftmaxCrossEntropy,
        &mut rng,
    )
    .unwrap()
}

fn data() -> (Vec<f64>, Vec<u64>) {
    let mut rng = Rng::new(6, 0);
    let x = rng.normal_vec(20 * 3);
    let y = (0..20).map(|i| (i % 2) as u64).collect();
    (x, y)
}

fn last_error() -> String {
    let p = flatlab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

struct Handles {
    m: *mut FlatlabModel,
    d: *mut FlatlabDataset,
}

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            flatlab_model_free(self.m);
            flatlab_dataset_free(self.d);
        }
    }
}

fn handles() -> Handles {
    let json = CString::new(checkpoint_to_string(&model(), &CheckpointMeta::default())).unwrap();
    let (x, y) = data();
    let mut m = ptr::null_mut();
    let mut d = ptr::null_mut();
    unsafe {
        assert_eq!(flatlab_model_from_json(json.as_ptr(), &mut m), FlatlabStatus::Ok);
        assert_eq!(flatlab_dataset_from_classes(x.as_ptr(), 20, 3, y.as_ptr(), &mut d), FlatlabStatus::Ok);
    }
    Handles { m, d }
}

#[test]
fn forward_matches_library() {
    let h = handles();
    let (x, _) = data();
    let mut out = vec![0.0; 40];
    let mut len = 0;
    let s = unsafe { flatlab_model_forward(h.m, x.as_ptr(), 20, 3, out.as_mut_ptr(), out.len(), &mut len) };
    assert_eq!(s, FlatlabStatus::Ok);
    assert_eq!(len, 40);
    let want = model().predict_batch(&Matrix::new(20, 3, x).unwrap()).unwrap();
    assert_eq!(out, want.as_slice());
    let (mut depth, mut i, mut o) = (0, 0, 0);
    assert_eq!(unsafe { flatlab_model_shape(h.m, &mut depth, &mut i, &mut o) }, FlatlabStatus::Ok);
    assert_eq!((depth, i, o), (3, 3, 2));
}

#[test]
fn flatness_matches_library() {
    let h = handles();
    let (mut ktr, mut kmax) = (0.0, 0.0);
    assert_eq!(unsafe { flatlab_relative_flatness(h.m, h.d, 2, &mut ktr, &mut kmax) }, FlatlabStatus::Ok);
    let (x, y) = data();
    let labels = y.iter().map(|&c| Label::Class(c as usize)).collect();
    let set = LabeledSet::new(Matrix::new(20, 3, x).unwrap(), labels, Space::Input).unwrap();
    let m = model();
    let s = split_at(&m, 2).unwrap();
    let want = relative_flatness(&s, &set, HeadHessianMode::best_for(&s), 1).unwrap();
    assert_eq!((ktr, kmax), (want.kappa_tr, want.kappa_max));

    let mut t = vec![0.0; 16];
    let mut len = 0;
    let st = unsafe { flatlab_trace_matrix(h.m, h.d, 2, t.as_mut_ptr(), t.len(), &mut len) };
    assert_eq!(st, FlatlabStatus::Ok);
    assert_eq!(len, 16);
    assert_eq!(t, want.summary.trace_matrix.as_slice());
}

#[test]
fn small_buffer_reports_needed_length() {
    let h = handles();
    let mut t = vec![0.0; 3];
    let mut len = 0;
    let s = unsafe { flatlab_trace_matrix(h.m, h.d, 2, t.as_mut_ptr(), t.len(), &mut len) };
    assert_eq!(s, FlatlabStatus::BufferTooSmall);
    assert_eq!(len, 16);
    let s = unsafe { flatlab_trace_matrix(h.m, h.d, 0, ptr::null_mut(), 0, &mut len) };
    assert_eq!(s, FlatlabStatus::BufferTooSmall);
    assert_eq!(len, 4);
    assert!(last_error().contains("for 4 values"));
}

#[test]
fn haar_sample_is_seeded_orthogonal() {
    let mut a = vec![0.0; 16];
    let mut len = 0;
    assert_eq!(unsafe { flatlab_haar_sample(4, 9, a.as_mut_ptr(), 16, &mut len) }, FlatlabStatus::Ok);
    let want = haar_orthogonal(4, &mut Rng::new(9, 0)).unwrap();
    assert_eq!(a, want.as_slice());
    let o = Matrix::new(4, 4, a).unwrap();
    let g = o.t_matmul(&o).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert!((g.as_slice()[i * 4 + j] - f64::from(u8::from(i == j))).abs() < 1e-12);
        }
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(flatlab_model_from_json(ptr::null(), &mut m), FlatlabStatus::NullPointer);
        let bad = CString::new("{not json").unwrap();
        assert_eq!(flatlab_model_from_json(bad.as_ptr(), &mut m), FlatlabStatus::Validation);
        assert!(m.is_null());
        let missing = CString::new("/nonexistent/model.json").unwrap();
        assert_eq!(flatlab_model_load(missing.as_ptr(), &mut m), FlatlabStatus::Io);
        assert!(last_error().contains("nonexistent"));
        let mut k = (0.0, 0.0);
        assert_eq!(
            flatlab_relative_flatness(ptr::null(), ptr::null(), 1, &mut k.0, &mut k.1),
            FlatlabStatus::NullPointer
        );
    }
    let h = handles();
    let (x, _) = data();
    let mut out = [0.0; 4];
    let s = unsafe { flatlab_model_forward(h.m, x.as_ptr(), 2, 5, out.as_mut_ptr(), 4, ptr::null_mut()) };
    assert_eq!(s, FlatlabStatus::Validation);
    let mut k = (0.0, 0.0);
    assert_eq!(unsafe { flatlab_relative_flatness(h.m, h.d, 7, &mut k.0, &mut k.1) }, FlatlabStatus::Validation);
    assert_eq!(unsafe { flatlab_haar_sample(0, 1, out.as_mut_ptr(), 4, ptr::null_mut()) }, FlatlabStatus::Validation);
}

#[test]
fn success_clears_last_error() {
    let mut m = ptr::null_mut();
    unsafe { flatlab_model_from_json(ptr::null(), &mut m) };
    assert!(!flatlab_last_error().is_null());
    let mut a = [0.0; 1];
    assert_eq!(unsafe { flatlab_haar_sample(1, 0, a.as_mut_ptr(), 1, ptr::null_mut()) }, FlatlabStatus::Ok);
    assert!(flatlab_last_error().is_null());
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(flatlab_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_valid_c_and_cxx() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/flatlab.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in [
        "flatlab_model_load",
        "flatlab_model_forward",
        "flatlab_relative_flatness",
        "flatlab_trace_matrix",
        "flatlab_haar_sample",
        "flatlab_last_error",
        "FLATLAB_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    for (cc, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(cc).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, header]).output() else {
            eprintln!("{cc} not available; skipping");
            continue;
        };
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
