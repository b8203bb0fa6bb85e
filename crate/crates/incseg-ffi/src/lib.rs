//! C ABI over the incseg laboratory.
//!
//! Conventions: fallible calls return [`IncsegStatus`] and write results
//! through out-pointers; `INCSEG_STATUS_OK` is zero. On failure a
//! thread-local message becomes readable via [`incseg_last_error`] until
//! the next failure on the same thread. Pointer-returning calls yield
//! null on failure. Handles are opaque; every `*_load` has a `*_free`
//! and handles must not be shared across threads without external
//! locking. Panics never unwind across the boundary; they surface as
//! `INCSEG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use incseg::commands;
use incseg::error::Error;
use incseg::eval::delta_m;
use incseg::model::checkpoint::load_from_path;
use incseg::model::Model;
use incseg::tensor::ops::{argmax_channels, BnMode};
use incseg::tensor::{no_grad, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum IncsegStatus {
    /// Success.
    Ok = 0,
    /// Invalid configuration or argument values.
    Config = 1,
    /// Missing or malformed data, checkpoints, or domains.
    Data = 2,
    /// A verification check failed.
    Check = 3,
    /// Null pointer, non-UTF-8 string, or out-of-range index at the
    /// boundary itself.
    Pointer = 4,
    /// An internal panic was caught; state may be inconsistent.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: IncsegStatus, msg: &str) -> IncsegStatus {
    set_error(msg);
    status
}

fn err_status(e: &Error) -> IncsegStatus {
    match e.exit_code() {
        1 => IncsegStatus::Config,
        3 => IncsegStatus::Check,
        _ => IncsegStatus::Data,
    }
}

fn report(e: Error) -> IncsegStatus {
    fail(err_status(&e), &e.to_string())
}

fn guarded(f: impl FnOnce() -> IncsegStatus) -> IncsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(IncsegStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, IncsegStatus> {
    if ptr.is_null() {
        return Err(fail(IncsegStatus::Pointer, &format!("{what} is null")));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(fail(IncsegStatus::Pointer, &format!("{what} is not valid UTF-8"))),
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, IncsegStatus> {
    if ptr.is_null() {
        return Err(fail(IncsegStatus::Pointer, &format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(IncsegStatus::Pointer, &format!("{what} is not valid UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn incseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent failure on this thread; empty string if
/// none. Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn incseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loaded model plus cached C strings for its names.
pub struct IncsegModel {
    model: Model<f32>,
    domain_names: Vec<CString>,
    class_names: Vec<Vec<CString>>,
}

impl IncsegModel {
    fn new(model: Model<f32>) -> Self {
        let domain_names =
            model.domains().iter().map(|d| CString::new(d.name.as_str()).unwrap()).collect();
        let class_names = model
            .domains()
            .iter()
            .map(|d| d.class_names.iter().map(|c| CString::new(c.as_str()).unwrap()).collect())
            .collect();
        IncsegModel { model, domain_names, class_names }
    }
}

/// Load a model checkpoint from `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer; on
/// success `*out` owns the handle until [`incseg_model_free`].
#[no_mangle]
pub unsafe extern "C" fn incseg_model_load(
    path: *const c_char,
    out: *mut *mut IncsegModel,
) -> IncsegStatus {
    guarded(|| {
        if out.is_null() {
            return fail(IncsegStatus::Pointer, "out handle is null");
        }
        let path = match path_arg(path, "checkpoint path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_from_path::<f32>(path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(IncsegModel::new(m)));
                IncsegStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// Release a handle obtained from [`incseg_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must be a live handle from this library or null; it is dead
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn incseg_model_free(model: *mut IncsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of domains the model was trained over.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn incseg_model_domain_count(
    model: *const IncsegModel,
    out: *mut usize,
) -> IncsegStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(IncsegStatus::Pointer, "null model or out pointer");
        }
        *out = (&*model).model.domain_count();
        IncsegStatus::Ok
    })
}

/// Name of domain `t`, or null if out of range. The pointer stays valid
/// while the handle lives.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn incseg_model_domain_name(
    model: *const IncsegModel,
    t: usize,
) -> *const c_char {
    if model.is_null() {
        set_error("null model");
        return std::ptr::null();
    }
    match (&*model).domain_names.get(t) {
        Some(name) => name.as_ptr(),
        None => {
            set_error(&format!("domain index {t} out of range"));
            std::ptr::null()
        }
    }
}

/// Number of classes in domain `t`'s label space.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn incseg_model_class_count(
    model: *const IncsegModel,
    t: usize,
    out: *mut usize,
) -> IncsegStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(IncsegStatus::Pointer, "null model or out pointer");
        }
        match (&*model).class_names.get(t) {
            Some(classes) => {
                *out = classes.len();
                IncsegStatus::Ok
            }
            None => fail(IncsegStatus::Data, &format!("domain index {t} out of range")),
        }
    })
}

/// Name of class `c` in domain `t`'s label space, or null if out of
/// range. The pointer stays valid while the handle lives.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn incseg_model_class_name(
    model: *const IncsegModel,
    t: usize,
    c: usize,
) -> *const c_char {
    if model.is_null() {
        set_error("null model");
        return std::ptr::null();
    }
    match (&*model).class_names.get(t).and_then(|cs| cs.get(c)) {
        Some(name) => name.as_ptr(),
        None => {
            set_error(&format!("class index ({t}, {c}) out of range"));
            std::ptr::null()
        }
    }
}

/// Fraction of parameters shared across domains, in [0, 1].
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn incseg_model_sharing_ratio(
    model: *const IncsegModel,
    out: *mut f64,
) -> IncsegStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(IncsegStatus::Pointer, "null model or out pointer");
        }
        *out = (&*model).model.sharing_ratio();
        IncsegStatus::Ok
    })
}

/// Segment one image along domain `t`'s path.
///
/// `image` holds 3*height*width floats in [0, 1], channel-major (all of
/// red, then green, then blue, each row-major). `out_labels` receives
/// height*width class ids. Extents must be at least 8 and divisible by 4
/// so the decoder reproduces the input grid.
///
/// # Safety
/// `model` must be a live handle; `image` and `out_labels` must point to
/// buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn incseg_model_predict(
    model: *const IncsegModel,
    t: usize,
    image: *const f32,
    height: usize,
    width: usize,
    out_labels: *mut u8,
) -> IncsegStatus {
    guarded(|| {
        if model.is_null() || image.is_null() || out_labels.is_null() {
            return fail(IncsegStatus::Pointer, "null model, image, or out pointer");
        }
        let handle = &*model;
        if t >= handle.model.domain_count() {
            return fail(IncsegStatus::Data, &format!("domain index {t} out of range"));
        }
        if height < 8 || width < 8 || height % 4 != 0 || width % 4 != 0 {
            return fail(
                IncsegStatus::Config,
                &format!("image extents must be >= 8 and divisible by 4, got {height}x{width}"),
            );
        }
        let data = std::slice::from_raw_parts(image, 3 * height * width).to_vec();
        let x = match Tensor::new(&[1, 3, height, width], data) {
            Ok(x) => x,
            Err(e) => return report(e),
        };
        let labels = no_grad(|| {
            let logits = handle.model.forward(&x, t, BnMode::Infer)?;
            argmax_channels(&logits)
        });
        match labels {
            Ok(l) => {
                std::ptr::copy_nonoverlapping(l.as_ptr(), out_labels, height * width);
                IncsegStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// Average per-domain mIoU drop of `scores` against `reference`, in
/// percentage points; both arrays hold `len` mIoU values in percent.
///
/// # Safety
/// `scores` and `reference` must point to `len` doubles each; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn incseg_delta_m(
    scores: *const f64,
    reference: *const f64,
    len: usize,
    out: *mut f64,
) -> IncsegStatus {
    guarded(|| {
        if scores.is_null() || reference.is_null() || out.is_null() {
            return fail(IncsegStatus::Pointer, "null scores, reference, or out pointer");
        }
        let s = std::slice::from_raw_parts(scores, len);
        let r = std::slice::from_raw_parts(reference, len);
        match delta_m(s, r) {
            Ok(v) => {
                *out = v;
                IncsegStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// Render the synthetic datasets described by the experiment file at
/// `config_path` (same format as `incseg gen-domains`).
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn incseg_generate(config_path: *const c_char) -> IncsegStatus {
    guarded(|| {
        let path = match path_arg(config_path, "config path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match commands::load_config(path).and_then(|cfg| commands::cmd_gen_domains(&cfg)) {
            Ok(_) => IncsegStatus::Ok,
            Err(e) => report(e),
        }
    })
}

/// Train the experiment described by the file at `config_path`, writing
/// checkpoints and reports under its out_dir (same as `incseg run`).
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn incseg_run(config_path: *const c_char) -> IncsegStatus {
    guarded(|| {
        let path = match path_arg(config_path, "config path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match commands::load_config(path).and_then(|cfg| commands::cmd_run(&cfg)) {
            Ok(_) => IncsegStatus::Ok,
            Err(e) => report(e),
        }
    })
}

/// Score the checkpoint at `checkpoint` on `domain`'s validation split
/// under `data_root`, writing the domain mIoU (percent) to `out_miou`.
///
/// # Safety
/// The three strings must be NUL-terminated; `out_miou` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn incseg_eval(
    checkpoint: *const c_char,
    data_root: *const c_char,
    domain: *const c_char,
    out_miou: *mut f64,
) -> IncsegStatus {
    guarded(|| {
        if out_miou.is_null() {
            return fail(IncsegStatus::Pointer, "null out pointer");
        }
        let (ckpt, root, dom) = match (
            path_arg(checkpoint, "checkpoint path"),
            path_arg(data_root, "data root"),
            str_arg(domain, "domain"),
        ) {
            (Ok(c), Ok(r), Ok(d)) => (c, r, d),
            (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
        };
        match commands::eval_checkpoint(ckpt, root, dom) {
            Ok(b) => {
                *out_miou = b.outcome.miou;
                IncsegStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

struct LineSink {
    callback: Option<unsafe extern "C" fn(*const c_char, *mut c_void)>,
    user: *mut c_void,
    pending: Vec<u8>,
}

impl LineSink {
    fn emit(&mut self) {
        if let Some(cb) = self.callback {
            let line = CString::new(std::mem::take(&mut self.pending)).unwrap_or_default();
            unsafe { cb(line.as_ptr(), self.user) };
        } else {
            self.pending.clear();
        }
    }
}

impl std::io::Write for LineSink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        for &b in buf {
            if b == b'\n' {
                self.emit();
            } else {
                self.pending.push(b);
            }
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        if !self.pending.is_empty() {
            self.emit();
        }
        Ok(())
    }
}

/// Run the built-in verification suite. Each PASS/FAIL line is passed to
/// `callback` (if non-null) together with `user`; returns
/// `INCSEG_STATUS_CHECK` if any check fails.
///
/// # Safety
/// `callback`, when non-null, must not unwind and must treat the line
/// pointer as valid only for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn incseg_selftest(
    callback: Option<unsafe extern "C" fn(*const c_char, *mut c_void)>,
    user: *mut c_void,
) -> IncsegStatus {
    guarded(|| {
        let mut sink = LineSink { callback, user, pending: Vec::new() };
        let result = commands::cmd_selftest(&mut sink);
        let _ = std::io::Write::flush(&mut sink);
        match result {
            Ok(()) => IncsegStatus::Ok,
            Err(e) => report(e),
        }
    })
}
