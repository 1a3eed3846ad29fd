use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use nlroi::gradcheck::random_problem;
use nlroi::{nlroi_backward, nlroi_forward, NlRoiConfig, NlRoiParams, Tensor};
use nlroi_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(nlroi_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn status_name(s: NlroiStatus) -> String {
    unsafe { CStr::from_ptr(nlroi_status_name(s as i32)) }
        .to_string_lossy()
        .into_owned()
}

/// Operator handle whose parameters are copied from `params`.
unsafe fn operator_with(config: &NlRoiConfig, params: &NlRoiParams) -> *mut NlroiOperator {
    let c: NlroiConfig = (*config).into();
    let mut op = ptr::null_mut();
    assert_eq!(nlroi_operator_new(&c, 0, &mut op), NlroiStatus::Ok);
    for (name, t) in params.tensors() {
        let name = CString::new(name).unwrap();
        assert_eq!(
            nlroi_operator_set_param(op, name.as_ptr(), t.data().as_ptr(), t.len()),
            NlroiStatus::Ok
        );
    }
    op
}

#[test]
fn forward_and_backward_match_the_library() {
    let mut config = NlRoiConfig::new(6, 2, 2);
    config.attend_to_self = false;
    let n = 4;
    let (x, params) = random_problem(&config, n, 3);
    let (expected, cache) = nlroi_forward(&x, &params, &config).unwrap();
    let upstream = Tensor::from_fn(expected.shape(), |k| (k as f64 * 0.1).cos());
    let (dx_expected, grads_expected) =
        nlroi_backward(&cache, &params, &config, &upstream).unwrap();

    unsafe {
        let op = operator_with(&config, &params);
        let out_len = nlroi_operator_output_len(op, n);
        assert_eq!(out_len, expected.len());

        let mut out = vec![0.0; out_len];
        let mut cache_handle = ptr::null_mut();
        let s = nlroi_operator_forward(
            op,
            x.data().as_ptr(),
            x.len(),
            n,
            out.as_mut_ptr(),
            out_len,
            &mut cache_handle,
        );
        assert_eq!(s, NlroiStatus::Ok, "{}", last_error());
        assert!(out
            .iter()
            .zip(expected.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut reference = vec![0.0; out_len];
        let s = nlroi_operator_reference(
            op,
            x.data().as_ptr(),
            x.len(),
            n,
            reference.as_mut_ptr(),
            out_len,
        );
        assert_eq!(s, NlroiStatus::Ok);
        let diff = out
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9);

        let mut grads = ptr::null_mut();
        let s = nlroi_operator_backward(
            op,
            cache_handle,
            upstream.data().as_ptr(),
            upstream.len(),
            &mut grads,
        );
        assert_eq!(s, NlroiStatus::Ok, "{}", last_error());
        let mut dx = vec![0.0; x.len()];
        assert_eq!(
            nlroi_grads_input(grads, dx.as_mut_ptr(), dx.len()),
            NlroiStatus::Ok
        );
        assert_eq!(dx, dx_expected.data());
        for (name, t) in grads_expected.tensors() {
            let cname = CString::new(name).unwrap();
            let mut buf = vec![0.0; t.len()];
            assert_eq!(
                nlroi_grads_param(grads, cname.as_ptr(), buf.as_mut_ptr(), buf.len()),
                NlroiStatus::Ok
            );
            assert_eq!(buf, t.data(), "{name}");
        }

        nlroi_grads_free(grads);
        nlroi_cache_free(cache_handle);
        nlroi_operator_free(op);
    }
}

#[test]
fn error_codes_and_messages() {
    unsafe {
        let mut config = nlroi_config_default(8, 3, 3);
        let mut op = ptr::null_mut();
        assert_eq!(
            nlroi_operator_new(ptr::null(), 0, &mut op),
            NlroiStatus::NullPointer
        );
        assert!(last_error().contains("config"));

        config.scaling = 7;
        assert_eq!(
            nlroi_operator_new(&config, 0, &mut op),
            NlroiStatus::InvalidArgument
        );
        config.scaling = NLROI_SCALING_FULL_FLATTEN;
        config.d_f = 9;
        assert_eq!(nlroi_operator_new(&config, 0, &mut op), NlroiStatus::Config);
        config.d_f = 2;
        config.attend_to_self = false;
        assert_eq!(nlroi_operator_new(&config, 0, &mut op), NlroiStatus::Ok);
        assert_eq!(last_error(), "");

        let x = vec![0.5; 8 * 9];
        let mut out = vec![0.0; nlroi_operator_output_len(op, 1)];
        let s = nlroi_operator_forward(
            op,
            x.as_ptr(),
            x.len(),
            1,
            out.as_mut_ptr(),
            out.len(),
            ptr::null_mut(),
        );
        assert_eq!(s, NlroiStatus::DegenerateAttention);
        assert_eq!(status_name(s), "NLROI_STATUS_DEGENERATE_ATTENTION");

        let s = nlroi_operator_forward(
            op,
            x.as_ptr(),
            x.len() - 1,
            1,
            out.as_mut_ptr(),
            out.len(),
            ptr::null_mut(),
        );
        assert_eq!(s, NlroiStatus::Dimension);

        let x2 = vec![0.5; 2 * 8 * 9];
        let s = nlroi_operator_forward(
            op,
            x2.as_ptr(),
            x2.len(),
            2,
            out.as_mut_ptr(),
            out.len(),
            ptr::null_mut(),
        );
        assert_eq!(s, NlroiStatus::InvalidArgument, "output buffer too small");

        let bogus = CString::new("w_nope").unwrap();
        let mut len = 0;
        assert_eq!(
            nlroi_operator_param_len(op, bogus.as_ptr(), &mut len),
            NlroiStatus::InvalidArgument
        );
        assert_eq!(status_name(NlroiStatus::Ok), "NLROI_STATUS_OK");
        assert_eq!(
            CStr::from_ptr(nlroi_status_name(99)).to_str().unwrap(),
            "NLROI_STATUS_UNKNOWN"
        );
        nlroi_operator_free(op);
        nlroi_operator_free(ptr::null_mut());
    }
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("op.bin").to_str().unwrap()).unwrap();
    unsafe {
        let config = nlroi_config_default(12, 2, 2);
        let mut op = ptr::null_mut();
        assert_eq!(nlroi_operator_new(&config, 77, &mut op), NlroiStatus::Ok);
        assert_eq!(nlroi_operator_save(op, path.as_ptr()), NlroiStatus::Ok);

        let mut back = ptr::null_mut();
        assert_eq!(
            nlroi_operator_load(&config, path.as_ptr(), &mut back),
            NlroiStatus::Ok
        );
        for name in NlRoiParams::NAMES {
            let cname = CString::new(name).unwrap();
            let mut len = 0;
            assert_eq!(
                nlroi_operator_param_len(op, cname.as_ptr(), &mut len),
                NlroiStatus::Ok
            );
            let (mut a, mut b) = (vec![0.0; len], vec![0.0; len]);
            nlroi_operator_get_param(op, cname.as_ptr(), a.as_mut_ptr(), len);
            nlroi_operator_get_param(back, cname.as_ptr(), b.as_mut_ptr(), len);
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        nlroi_operator_free(back);

        std::fs::write(dir.path().join("op.bin"), b"XXXXXXXX\0\0\0\0").unwrap();
        let mut bad = ptr::null_mut();
        assert_eq!(
            nlroi_operator_load(&config, path.as_ptr(), &mut bad),
            NlroiStatus::Format
        );
        std::fs::write(dir.path().join("op.bin"), b"NLROIW01\x01\0").unwrap();
        assert_eq!(
            nlroi_operator_load(&config, path.as_ptr(), &mut bad),
            NlroiStatus::Corruption
        );
        let missing = CString::new(dir.path().join("none.bin").to_str().unwrap()).unwrap();
        assert_eq!(
            nlroi_operator_load(&config, missing.as_ptr(), &mut bad),
            NlroiStatus::Io
        );
        assert!(bad.is_null());
        nlroi_operator_free(op);
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

/// `target/<profile>`, where cargo also places the static library.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_is_valid_c_and_cxx() {
    let h = header().join("nlroi.h");
    for (compiler, std) in [("cc", "-std=c99"), ("c++", "-std=c++11")] {
        let status = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Wextra", "-Werror", std, "-x"])
            .arg(if compiler == "cc" { "c" } else { "c++" })
            .arg(&h)
            .status()
            .unwrap_or_else(|e| panic!("failed to run {compiler}: {e}"));
        assert!(status.success(), "{compiler} rejected the header");
    }
}

#[test]
fn c_program_links_and_runs() {
    let lib = artifact_dir().join("libnlroi_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/c/smoke.c");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-I"])
        .arg(header())
        .arg(&src)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "compiling the C smoke test failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "C smoke test failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
