//! C ABI over `lrp-core`.
//!
//! Every entry point returns an [`LrpStatus`]; on failure the message is kept
//! per thread and read back with [`lrp_last_error`]. Handles are opaque and
//! must be released with the matching `*_free` function. Panics never cross
//! the boundary, they surface as `LRP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lrp_core::attrfile::write_attr;
use lrp_core::lrp::{pool_channels, Analyzer, AttributionMap, CompositeConfig, FlatDepth, LrpError};
use lrp_core::metrics::{localization_score, BoundingBox};
use lrp_core::model::{load_model, Model, ModelError};
use lrp_core::numerics::Tensor;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Model = 4,
    Config = 5,
    ShapeMismatch = 6,
    UnknownClass = 7,
    BufferTooSmall = 8,
    Attribution = 9,
    Panic = 99,
}

/// Loaded network.
pub struct LrpModel {
    inner: Model,
}

/// Composite rule configuration.
pub struct LrpConfig {
    inner: CompositeConfig,
}

/// Input relevance for one class.
pub struct LrpAttribution {
    inner: AttributionMap,
    digest: CString,
}

/// Pixel box, inclusive minimum and exclusive maximum.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LrpBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

/// Localization of one heatmap against a set of boxes.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LrpScore {
    pub mu: f64,
    pub mu_w: f64,
    pub r_in: f64,
    pub r_tot: f64,
    pub s_in: usize,
    pub s_tot: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(LrpStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(LrpStatus::NullPointer, format!("{what} is null"))
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::MissingFile(_) | ModelError::Io { .. } => LrpStatus::Io,
            ModelError::ShapeMismatch(_) => LrpStatus::ShapeMismatch,
            _ => LrpStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

impl From<LrpError> for Failure {
    fn from(e: LrpError) -> Self {
        let status = match e {
            LrpError::ShapeMismatch(_) => LrpStatus::ShapeMismatch,
            LrpError::IndexOutOfRange { .. } => LrpStatus::UnknownClass,
            LrpError::NonPositiveEpsilon(_)
            | LrpError::InvalidAlpha(_)
            | LrpError::InvalidAssignment { .. }
            | LrpError::InvalidConfig(_)
            | LrpError::UnsupportedLayer { .. }
            | LrpError::NotFirstLayer(_) => LrpStatus::Config,
            LrpError::Model(ModelError::ShapeMismatch(_)) => LrpStatus::ShapeMismatch,
            _ => LrpStatus::Attribution,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LrpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LrpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            LrpStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(LrpStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lrp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model manifest and its weight blob.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lrp_model_load(path: *const c_char, out: *mut *mut LrpModel) -> LrpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(string(path, "path")?);
        let model = load_model(path)?;
        *out = Box::into_raw(Box::new(LrpModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`lrp_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lrp_model_free(model: *mut LrpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the `(C, H, W)` input shape into `shape[0..3]`.
///
/// # Safety
/// `model` must be a live handle and `shape` point to three writable values.
#[no_mangle]
pub unsafe extern "C" fn lrp_model_input_shape(model: *const LrpModel, shape: *mut usize) -> LrpStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        if shape.is_null() {
            return Err(Failure::null("shape"));
        }
        let s = model.inner.input_shape();
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&s);
        Ok(())
    })
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrp_model_num_classes(model: *const LrpModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_classes())
}

/// Copies the label of class `index` into `buf` as a NUL-terminated string.
/// `needed` receives the buffer size required, terminator included, so a
/// first call with `buf_len == 0` can size the buffer.
///
/// # Safety
/// `buf` must hold `buf_len` writable bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn lrp_model_class_label(
    model: *const LrpModel,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> LrpStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let labels = model.inner.class_labels();
        let label = labels.get(index).ok_or_else(|| {
            Failure(
                LrpStatus::UnknownClass,
                format!("class index {index} out of range for {} classes", labels.len()),
            )
        })?;
        let bytes = label.as_bytes();
        if let Some(n) = needed.as_mut() {
            *n = bytes.len() + 1;
        }
        if buf_len < bytes.len() + 1 {
            return Err(Failure(
                LrpStatus::BufferTooSmall,
                format!("label needs {} bytes, buffer has {buf_len}", bytes.len() + 1),
            ));
        }
        if buf.is_null() {
            return Err(Failure::null("buf"));
        }
        let dst = std::slice::from_raw_parts_mut(buf as *mut u8, bytes.len() + 1);
        dst[..bytes.len()].copy_from_slice(bytes);
        dst[bytes.len()] = 0;
        Ok(())
    })
}

/// Looks up a class label.
///
/// # Safety
/// `label` must be NUL-terminated and `index` writable.
#[no_mangle]
pub unsafe extern "C" fn lrp_model_class_index(
    model: *const LrpModel,
    label: *const c_char,
    index: *mut usize,
) -> LrpStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let label = string(label, "label")?;
        let index = out_ptr(index, "index")?;
        *index = model.inner.class_index(label).ok_or_else(|| {
            Failure(
                LrpStatus::UnknownClass,
                format!("unknown class `{label}`; valid: {}", model.inner.class_labels().join(", ")),
            )
        })?;
        Ok(())
    })
}

fn input_tensor(model: &Model, data: &[f64]) -> Result<Tensor, Failure> {
    let shape = model.input_shape();
    Tensor::new(shape.to_vec(), data.to_vec()).map_err(|_| {
        Failure(
            LrpStatus::ShapeMismatch,
            format!("input has {} values, model expects {shape:?}", data.len()),
        )
    })
}

/// Runs the network on a `(C, H, W)` row-major input and writes the logits.
///
/// # Safety
/// `input` must hold `input_len` values and `logits` `logits_len` slots.
#[no_mangle]
pub unsafe extern "C" fn lrp_model_forward(
    model: *const LrpModel,
    input: *const f64,
    input_len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> LrpStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let x = input_tensor(&model.inner, slice(input, input_len, "input")?)?;
        let n = model.inner.num_classes();
        if logits.is_null() {
            return Err(Failure::null("logits"));
        }
        if logits_len < n {
            return Err(Failure(
                LrpStatus::BufferTooSmall,
                format!("{n} logits, buffer has {logits_len}"),
            ));
        }
        let trace = model.inner.forward(&x)?;
        std::slice::from_raw_parts_mut(logits, n).copy_from_slice(trace.logits());
        Ok(())
    })
}

fn boxed_config(out: *mut *mut LrpConfig, f: impl FnOnce() -> Result<CompositeConfig, Failure>) -> LrpStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out")? };
        *out = ptr::null_mut();
        *out = Box::into_raw(Box::new(LrpConfig { inner: f()? }));
        Ok(())
    })
}

fn config_failure(e: LrpError) -> Failure {
    Failure(LrpStatus::Config, e.to_string())
}

/// Parses a composite configuration from JSON text.
///
/// # Safety
/// `json` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lrp_config_from_json(json: *const c_char, out: *mut *mut LrpConfig) -> LrpStatus {
    boxed_config(out, || CompositeConfig::from_json(string(json, "json")?).map_err(config_failure))
}

/// Reads a composite configuration file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lrp_config_load(path: *const c_char, out: *mut *mut LrpConfig) -> LrpStatus {
    boxed_config(out, || {
        let path = string(path, "path")?;
        let text = std::fs::read_to_string(path).map_err(|e| Failure(LrpStatus::Io, format!("{path}: {e}")))?;
        CompositeConfig::from_json(&text).map_err(config_failure)
    })
}

/// The `cmp` preset: epsilon on dense layers, alpha-beta on the conv stack
/// and flat on its first `flat_n` layers.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrp_config_cmp(alpha: f64, flat_n: usize, out: *mut *mut LrpConfig) -> LrpStatus {
    boxed_config(out, || CompositeConfig::cmp(alpha, FlatDepth::Layers(flat_n)).map_err(config_failure))
}

/// Plain z rule everywhere.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrp_config_uniform_z(out: *mut *mut LrpConfig) -> LrpStatus {
    boxed_config(out, || Ok(CompositeConfig::uniform_z()))
}

/// # Safety
/// `config` must come from one of the `lrp_config_*` constructors.
#[no_mangle]
pub unsafe extern "C" fn lrp_config_free(config: *mut LrpConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Explains `class_index` for one input.
///
/// # Safety
/// `input` must hold `input_len` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn lrp_attribute(
    model: *const LrpModel,
    config: *const LrpConfig,
    input: *const f64,
    input_len: usize,
    class_index: usize,
    out: *mut *mut LrpAttribution,
) -> LrpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let model = borrow(model, "model")?;
        let config = borrow(config, "config")?;
        let x = input_tensor(&model.inner, slice(input, input_len, "input")?)?;
        let map = Analyzer::new(&model.inner, &config.inner)?.attribute(&x, class_index)?;
        let digest = CString::new(map.config_digest.clone()).unwrap_or_default();
        *out = Box::into_raw(Box::new(LrpAttribution { inner: map, digest }));
        Ok(())
    })
}

/// # Safety
/// `attr` must come from [`lrp_attribute`].
#[no_mangle]
pub unsafe extern "C" fn lrp_attribution_free(attr: *mut LrpAttribution) {
    if !attr.is_null() {
        drop(Box::from_raw(attr));
    }
}

/// Number of relevance values, or 0 for a null handle.
///
/// # Safety
/// `attr` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrp_attribution_len(attr: *const LrpAttribution) -> usize {
    attr.as_ref().map_or(0, |a| a.inner.relevance.len())
}

/// Borrowed view of the `(C, H, W)` relevance values, valid while `attr` lives.
///
/// # Safety
/// `attr` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrp_attribution_values(attr: *const LrpAttribution) -> *const f64 {
    attr.as_ref().map_or(ptr::null(), |a| a.inner.relevance.data().as_ptr())
}

/// Writes the relevance shape into `shape[0..3]`.
///
/// # Safety
/// `shape` must point to three writable values.
#[no_mangle]
pub unsafe extern "C" fn lrp_attribution_shape(attr: *const LrpAttribution, shape: *mut usize) -> LrpStatus {
    guard(|| {
        let attr = borrow(attr, "attr")?;
        if shape.is_null() {
            return Err(Failure::null("shape"));
        }
        let s = attr.inner.relevance.shape();
        if s.len() != 3 {
            return Err(Failure(LrpStatus::ShapeMismatch, format!("relevance has shape {s:?}")));
        }
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(s);
        Ok(())
    })
}

/// Logit of the explained class.
///
/// # Safety
/// `attr` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrp_attribution_logit(attr: *const LrpAttribution) -> f64 {
    attr.as_ref().map_or(f64::NAN, |a| a.inner.output_logit)
}

/// Hex SHA-256 of the resolved rules, valid while `attr` lives.
///
/// # Safety
/// `attr` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lrp_attribution_digest(attr: *const LrpAttribution) -> *const c_char {
    attr.as_ref().map_or(ptr::null(), |a| a.digest.as_ptr())
}

/// Saves the map in the binary `.attr` format.
///
/// # Safety
/// `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lrp_attribution_write(attr: *const LrpAttribution, path: *const c_char) -> LrpStatus {
    guard(|| {
        let attr = borrow(attr, "attr")?;
        let path = PathBuf::from(string(path, "path")?);
        write_attr(&path, &attr.inner).map_err(|e| Failure(LrpStatus::Io, e.to_string()))
    })
}

/// Pools the map over channels and scores it against the union of `boxes`.
///
/// # Safety
/// `boxes` must hold `n_boxes` entries and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn lrp_localization_score(
    attr: *const LrpAttribution,
    boxes: *const LrpBox,
    n_boxes: usize,
    out: *mut LrpScore,
) -> LrpStatus {
    guard(|| {
        let attr = borrow(attr, "attr")?;
        let out = out_ptr(out, "out")?;
        let boxes = slice(boxes, n_boxes, "boxes")?;
        if boxes.is_empty() {
            return Err(Failure(LrpStatus::InvalidArgument, "no boxes given".into()));
        }
        let target = "target";
        let boxes = boxes
            .iter()
            .map(|b| {
                BoundingBox::new(target, b.x_min, b.y_min, b.x_max, b.y_max)
                    .map_err(|e| Failure(LrpStatus::InvalidArgument, e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if attr.inner.relevance.rank() != 3 {
            return Err(Failure(LrpStatus::ShapeMismatch, "relevance is not (C, H, W)".into()));
        }
        let heatmap = pool_channels(&attr.inner);
        let s = localization_score(&heatmap, &boxes, target, "")
            .map_err(|e| Failure(LrpStatus::ShapeMismatch, e.to_string()))?;
        *out = LrpScore {
            mu: s.mu,
            mu_w: s.mu_w,
            r_in: s.r_in,
            r_tot: s.r_tot,
            s_in: s.s_in,
            s_tot: s.s_tot,
        };
        Ok(())
    })
}
