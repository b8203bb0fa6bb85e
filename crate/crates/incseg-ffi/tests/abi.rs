//! Exercises the C entry points the way a foreign caller would: through
//! raw pointers and status codes, never through the Rust API they wrap.

use std::ffi::{c_char, c_void, CStr, CString};
use std::path::Path;

use incseg::model::checkpoint::save_to_path;
use incseg::model::{DomainInfo, InitWt, Model, ModelConfig};
use incseg::tensor::ops::{argmax_channels, BnMode};
use incseg::tensor::rng::RngState;
use incseg::tensor::{no_grad, Tensor};
use incseg_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn last_error() -> String {
    CStr::from_ptr(incseg_last_error()).to_string_lossy().into_owned()
}

fn tiny_model() -> (Model<f32>, RngState) {
    let mut rng = RngState::new(77);
    let cfg = ModelConfig {
        widths: vec![4, 8],
        stage_strides: vec![2, 2],
        units_per_stage: 1,
        decoder_widths: [4, 4],
        ..ModelConfig::default()
    };
    let info = DomainInfo::new("first", vec!["background".into(), "thing".into()]).unwrap();
    let mut model = Model::build(cfg, info, &mut rng).unwrap();
    let second = DomainInfo::new("second", vec!["background".into(), "other".into()]).unwrap();
    model.add_domain(second, InitWt::FromPrevious, &mut rng).unwrap();
    (model, rng)
}

fn save_tiny(dir: &Path) -> (Model<f32>, RngState, CString) {
    let (model, rng) = tiny_model();
    let path = dir.join("model.mdil");
    save_to_path(&model, &path).unwrap();
    (model, rng, cstr(path.to_str().unwrap()))
}

#[test]
fn version_is_a_readable_string() {
    let v = unsafe { CStr::from_ptr(incseg_version()) }.to_str().unwrap();
    assert!(v.split('.').count() >= 2, "{v}");
}

#[test]
fn load_reports_null_and_missing_paths() {
    unsafe {
        let mut handle: *mut IncsegModel = std::ptr::null_mut();
        assert_eq!(
            incseg_model_load(std::ptr::null(), &mut handle),
            IncsegStatus::Pointer
        );
        assert!(last_error().contains("null"));

        let path = cstr("/nonexistent/model.mdil");
        assert_eq!(incseg_model_load(path.as_ptr(), &mut handle), IncsegStatus::Data);
        assert!(handle.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(
            incseg_model_load(path.as_ptr(), std::ptr::null_mut()),
            IncsegStatus::Pointer
        );
    }
}

#[test]
fn metadata_accessors_mirror_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _, path) = save_tiny(dir.path());
    unsafe {
        let mut handle: *mut IncsegModel = std::ptr::null_mut();
        assert_eq!(incseg_model_load(path.as_ptr(), &mut handle), IncsegStatus::Ok);

        let mut n = 0usize;
        assert_eq!(incseg_model_domain_count(handle, &mut n), IncsegStatus::Ok);
        assert_eq!(n, 2);

        let name = CStr::from_ptr(incseg_model_domain_name(handle, 1)).to_str().unwrap();
        assert_eq!(name, "second");
        assert!(incseg_model_domain_name(handle, 7).is_null());
        assert!(last_error().contains("out of range"));

        let mut classes = 0usize;
        assert_eq!(incseg_model_class_count(handle, 0, &mut classes), IncsegStatus::Ok);
        assert_eq!(classes, 2);
        let cls = CStr::from_ptr(incseg_model_class_name(handle, 1, 1)).to_str().unwrap();
        assert_eq!(cls, "other");
        assert!(incseg_model_class_name(handle, 0, 9).is_null());

        let mut ratio = 0.0f64;
        assert_eq!(incseg_model_sharing_ratio(handle, &mut ratio), IncsegStatus::Ok);
        assert_eq!(ratio, model.sharing_ratio());

        incseg_model_free(handle);
        incseg_model_free(std::ptr::null_mut());
    }
}

#[test]
fn predict_matches_the_in_process_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    let (model, mut rng, path) = save_tiny(dir.path());
    let (h, w) = (16usize, 16usize);
    let mut data = vec![0.0f32; 3 * h * w];
    rng.fill_normal(&mut data, 0.3);
    for v in &mut data {
        *v = v.abs().min(1.0);
    }
    let x = Tensor::new(&[1, 3, h, w], data.clone()).unwrap();
    let want = no_grad(|| {
        let logits = model.forward(&x, 1, BnMode::Infer)?;
        argmax_channels(&logits)
    })
    .unwrap();

    unsafe {
        let mut handle: *mut IncsegModel = std::ptr::null_mut();
        assert_eq!(incseg_model_load(path.as_ptr(), &mut handle), IncsegStatus::Ok);
        let mut got = vec![0u8; h * w];
        assert_eq!(
            incseg_model_predict(handle, 1, data.as_ptr(), h, w, got.as_mut_ptr()),
            IncsegStatus::Ok
        );
        assert_eq!(got, want);

        assert_eq!(
            incseg_model_predict(handle, 5, data.as_ptr(), h, w, got.as_mut_ptr()),
            IncsegStatus::Data
        );
        assert_eq!(
            incseg_model_predict(handle, 0, data.as_ptr(), 10, 16, got.as_mut_ptr()),
            IncsegStatus::Config
        );
        assert!(last_error().contains("divisible by 4"));
        incseg_model_free(handle);
    }
}

#[test]
fn delta_m_reproduces_the_reference_numbers() {
    let scores = [40.05f64, 52.74];
    let reference = [72.55f64, 54.1];
    let mut out = 0.0f64;
    unsafe {
        assert_eq!(
            incseg_delta_m(scores.as_ptr(), reference.as_ptr(), 2, &mut out),
            IncsegStatus::Ok
        );
        assert!((out - 23.66).abs() <= 0.01, "{out}");

        assert_eq!(
            incseg_delta_m(scores.as_ptr(), reference.as_ptr(), 0, &mut out),
            IncsegStatus::Config
        );
        assert_eq!(
            incseg_delta_m(std::ptr::null(), reference.as_ptr(), 2, &mut out),
            IncsegStatus::Pointer
        );
    }
}

#[test]
fn generate_run_eval_work_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lab");
    let conf_text = format!(
        "out_dir = {}\nsequence = alpha,beta\nseed = 5\nepochs = 1\nbatch_size = 4\n\
         domain.alpha.seed = 101\ndomain.alpha.height = 16\ndomain.alpha.width = 16\n\
         domain.alpha.train_count = 6\ndomain.alpha.val_count = 3\ndomain.alpha.density = 1\n\
         domain.beta.seed = 202\ndomain.beta.height = 16\ndomain.beta.width = 16\n\
         domain.beta.train_count = 6\ndomain.beta.val_count = 3\ndomain.beta.density = 1\n",
        out.display()
    );
    let conf_path = dir.path().join("exp.conf");
    std::fs::write(&conf_path, conf_text).unwrap();
    let conf = cstr(conf_path.to_str().unwrap());

    unsafe {
        assert_eq!(incseg_generate(conf.as_ptr()), IncsegStatus::Ok);
        assert_eq!(incseg_run(conf.as_ptr()), IncsegStatus::Ok);

        let ckpt = cstr(out.join("runs/ours/step_1.mdil").to_str().unwrap());
        let root = cstr(out.join("data").to_str().unwrap());
        let alpha = cstr("alpha");
        let mut miou = -1.0f64;
        assert_eq!(
            incseg_eval(ckpt.as_ptr(), root.as_ptr(), alpha.as_ptr(), &mut miou),
            IncsegStatus::Ok
        );
        assert!((0.0..=100.0).contains(&miou), "{miou}");

        let missing = cstr("gamma");
        assert_eq!(
            incseg_eval(ckpt.as_ptr(), root.as_ptr(), missing.as_ptr(), &mut miou),
            IncsegStatus::Data
        );
        assert!(last_error().contains("gamma"));

        let bad_conf = dir.path().join("bad.conf");
        std::fs::write(&bad_conf, "nonsense\n").unwrap();
        let bad = cstr(bad_conf.to_str().unwrap());
        assert_eq!(incseg_run(bad.as_ptr()), IncsegStatus::Config);
    }
}

unsafe extern "C" fn collect_line(line: *const c_char, user: *mut c_void) {
    let lines = &mut *(user as *mut Vec<String>);
    lines.push(CStr::from_ptr(line).to_string_lossy().into_owned());
}

#[test]
fn selftest_streams_its_verdict_lines() {
    let mut lines: Vec<String> = Vec::new();
    let status = unsafe {
        incseg_selftest(Some(collect_line), &mut lines as *mut Vec<String> as *mut c_void)
    };
    assert_eq!(status, IncsegStatus::Ok, "{lines:?}");
    assert!(lines.iter().any(|l| l == "PASS metrics.published_vectors"), "{lines:?}");
    assert!(lines.iter().all(|l| l.starts_with("PASS ")), "{lines:?}");

    // A null callback still runs the checks, it just discards the log.
    assert_eq!(unsafe { incseg_selftest(None, std::ptr::null_mut()) }, IncsegStatus::Ok);
}
