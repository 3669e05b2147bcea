//! C ABI for the segmentation pipeline.
//!
//! Conventions:
//! - Every fallible call returns a `PCC_*` status code; `PCC_OK` is 0.
//! - On failure, a thread-local message is readable via [`pcc_last_error`]
//!   until the next failing call on the same thread.
//! - Handles (`PccClusterMap`, `PccModel`) are opaque; create them through
//!   their `_load` constructors and release them with their `_free`
//!   functions. A `_free` accepts NULL.
//! - Strings are NUL-terminated UTF-8. Image pixels are row-major RGB
//!   interleaved doubles in [0, 1]. Label buffers are one byte per pixel.
//!
//! The build script regenerates `include/pcc.h` with cbindgen on every
//! build, so the header always matches this file.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::{c_char, c_double, c_int};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pcc::cluster::{cluster_vector, ClusterAssignment};
use pcc::checkpoint::Checkpoint;
use pcc::crf::crf_refine;
use pcc::head::predict_patches;
use pcc::miou::compute_miou;
use pcc::pipeline::run_pipeline;
use pcc::pseudo::{argmax_labels, upsample_predictions, PseudoLabelMap};
use pcc::data::ImageSample;
use pcc::fusion::FusionMode;
use pcc::PccError;

pub const PCC_OK: c_int = 0;
pub const PCC_ERR_NULL_ARGUMENT: c_int = 1;
pub const PCC_ERR_UTF8: c_int = 2;
pub const PCC_ERR_CONFIG: c_int = 3;
pub const PCC_ERR_PARSE: c_int = 4;
pub const PCC_ERR_SHAPE: c_int = 5;
pub const PCC_ERR_FORMAT: c_int = 6;
pub const PCC_ERR_IO: c_int = 7;
pub const PCC_ERR_NETWORK: c_int = 8;
pub const PCC_ERR_DIVERGENCE: c_int = 9;
pub const PCC_ERR_BUFFER_TOO_SMALL: c_int = 10;
pub const PCC_ERR_PANIC: c_int = 11;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn code_of(err: &PccError) -> c_int {
    match err {
        PccError::Network { .. } | PccError::EmptyResponse | PccError::ScriptExhausted { .. } => {
            PCC_ERR_NETWORK
        }
        PccError::Parse(_) => PCC_ERR_PARSE,
        PccError::Shape(_) => PCC_ERR_SHAPE,
        PccError::Format(_) => PCC_ERR_FORMAT,
        PccError::Config(_) => PCC_ERR_CONFIG,
        PccError::Divergence(_) => PCC_ERR_DIVERGENCE,
        PccError::Io(_) => PCC_ERR_IO,
        PccError::Json(_) => PCC_ERR_PARSE,
    }
}

fn fail(err: &PccError) -> c_int {
    set_error(&err.to_string());
    code_of(err)
}

fn fail_null(what: &str) -> c_int {
    set_error(&format!("{what} must not be NULL"));
    PCC_ERR_NULL_ARGUMENT
}

/// Run a closure behind the unwind barrier every entry point needs.
fn guarded(body: impl FnOnce() -> c_int) -> c_int {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(&format!("internal panic: {msg}"));
            PCC_ERR_PANIC
        }
    }
}

/// # Safety: `ptr` must be NULL or a NUL-terminated string.
unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, c_int> {
    if ptr.is_null() {
        return Err(fail_null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        PCC_ERR_UTF8
    })
}

fn parse_labels(csv: &str) -> Vec<String> {
    csv.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Message describing the most recent failure on this thread. Never NULL;
/// empty before any failure. The pointer stays valid until the next failing
/// call from the same thread.
#[no_mangle]
pub extern "C" fn pcc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

// ===========================================================================
// Cluster map handle
// ===========================================================================

/// Opaque handle over a category→tags cluster assignment.
pub struct PccClusterMap {
    inner: ClusterAssignment,
}

/// Load a cluster map from the JSON file the `pcc cluster` command writes.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to writable
/// storage for one pointer. On success `*out` owns the map and must be
/// released with [`pcc_cluster_map_free`].
#[no_mangle]
pub unsafe extern "C" fn pcc_cluster_map_load(
    path: *const c_char,
    out: *mut *mut PccClusterMap,
) -> c_int {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(code) => return code,
        };
        match ClusterAssignment::load(Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(PccClusterMap { inner }));
                PCC_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a cluster map. NULL is a no-op.
///
/// # Safety
/// `map` must come from [`pcc_cluster_map_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pcc_cluster_map_free(map: *mut PccClusterMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Number of distinct cluster tags (the width of cluster vectors).
///
/// # Safety
/// `map` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pcc_cluster_map_num_clusters(
    map: *const PccClusterMap,
    out: *mut usize,
) -> c_int {
    guarded(|| {
        if map.is_null() {
            return fail_null("map");
        }
        if out.is_null() {
            return fail_null("out");
        }
        *out = (*map).inner.num_clusters();
        PCC_OK
    })
}

/// Project a comma-separated list of category names onto the cluster
/// vocabulary as a multi-hot byte vector (one byte per tag, 0 or 1).
/// `out_len` must equal the map's cluster count.
///
/// # Safety
/// `map` must be a live handle; `labels_csv` a NUL-terminated string;
/// `out_bits` writable for `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pcc_cluster_map_vector(
    map: *const PccClusterMap,
    labels_csv: *const c_char,
    out_bits: *mut u8,
    out_len: usize,
) -> c_int {
    guarded(|| {
        if map.is_null() {
            return fail_null("map");
        }
        if out_bits.is_null() {
            return fail_null("out_bits");
        }
        let labels = match utf8_arg(labels_csv, "labels_csv") {
            Ok(csv) => parse_labels(csv),
            Err(code) => return code,
        };
        let assignment = &(*map).inner;
        if out_len != assignment.num_clusters() {
            set_error(&format!(
                "out_len is {out_len} but the map has {} clusters",
                assignment.num_clusters()
            ));
            return PCC_ERR_BUFFER_TOO_SMALL;
        }
        match cluster_vector(&labels, assignment) {
            Ok(u) => {
                std::ptr::copy_nonoverlapping(u.bits().as_ptr(), out_bits, out_len);
                PCC_OK
            }
            Err(e) => fail(&e),
        }
    })
}

// ===========================================================================
// Model handle
// ===========================================================================

/// Opaque handle over a trained checkpoint, ready for inference.
pub struct PccModel {
    ckpt: Checkpoint,
}

impl PccModel {
    fn spec(&self) -> pcc::head::ModelSpec {
        self.ckpt
            .config
            .model_spec(self.ckpt.num_clusters, self.ckpt.classes.len() + 1)
    }
}

/// Load a trained checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable for one pointer.
/// On success `*out` owns the model and must be released with
/// [`pcc_model_free`].
#[no_mangle]
pub unsafe extern "C" fn pcc_model_load(path: *const c_char, out: *mut *mut PccModel) -> c_int {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(code) => return code,
        };
        match Checkpoint::load(Path::new(path)) {
            Ok(ckpt) => {
                *out = Box::into_raw(Box::new(PccModel { ckpt }));
                PCC_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a model. NULL is a no-op.
///
/// # Safety
/// `model` must come from [`pcc_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pcc_model_free(model: *mut PccModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total classes the model predicts, background included.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pcc_model_num_classes(model: *const PccModel, out: *mut usize) -> c_int {
    guarded(|| {
        if model.is_null() {
            return fail_null("model");
        }
        if out.is_null() {
            return fail_null("out");
        }
        *out = (*model).ckpt.classes.len() + 1;
        PCC_OK
    })
}

/// Side length of the square input images the model was trained on.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pcc_model_image_side(model: *const PccModel, out: *mut usize) -> c_int {
    guarded(|| {
        if model.is_null() {
            return fail_null("model");
        }
        if out.is_null() {
            return fail_null("out");
        }
        *out = (*model).ckpt.config.encoder.image_side;
        PCC_OK
    })
}

/// Copy the name of class `index` (0 is always "background") into `buf` as a
/// NUL-terminated string. Fails with `PCC_ERR_BUFFER_TOO_SMALL` if `buf_len`
/// cannot hold the name plus terminator.
///
/// # Safety
/// `model` must be a live handle; `buf` writable for `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pcc_model_class_name(
    model: *const PccModel,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
) -> c_int {
    guarded(|| {
        if model.is_null() {
            return fail_null("model");
        }
        if buf.is_null() {
            return fail_null("buf");
        }
        let classes = &(*model).ckpt.classes;
        let name = if index == 0 {
            "background"
        } else if let Some(n) = classes.get(index - 1) {
            n.as_str()
        } else {
            set_error(&format!(
                "class index {index} out of range for {} classes",
                classes.len() + 1
            ));
            return PCC_ERR_SHAPE;
        };
        if buf_len < name.len() + 1 {
            set_error(&format!(
                "buffer of {buf_len} bytes cannot hold {} bytes plus terminator",
                name.len()
            ));
            return PCC_ERR_BUFFER_TOO_SMALL;
        }
        std::ptr::copy_nonoverlapping(name.as_ptr() as *const c_char, buf, name.len());
        *buf.add(name.len()) = 0;
        PCC_OK
    })
}

/// Run single-image inference: patch predictions, bilinear upsampling,
/// optional CRF refinement against the image itself, and per-pixel argmax.
///
/// `pixels` holds `height * width * 3` doubles in [0, 1], row-major RGB.
/// `out_labels` receives `height * width` class indices.
///
/// For a model trained with cluster-token fusion, `map` and `labels_csv`
/// (the image-level category names) are required; otherwise both may be
/// NULL.
///
/// # Safety
/// All pointers must satisfy the sizes above; `model`/`map` must be live
/// handles from this library.
#[no_mangle]
pub unsafe extern "C" fn pcc_model_predict_mask(
    model: *const PccModel,
    map: *const PccClusterMap,
    labels_csv: *const c_char,
    pixels: *const c_double,
    height: usize,
    width: usize,
    apply_crf: c_int,
    out_labels: *mut u8,
) -> c_int {
    guarded(|| {
        if model.is_null() {
            return fail_null("model");
        }
        if pixels.is_null() {
            return fail_null("pixels");
        }
        if out_labels.is_null() {
            return fail_null("out_labels");
        }
        let model = &*model;
        let spec = model.spec();

        let labels = if labels_csv.is_null() {
            Vec::new()
        } else {
            match utf8_arg(labels_csv, "labels_csv") {
                Ok(csv) => parse_labels(csv),
                Err(code) => return code,
            }
        };

        let pixel_vec = std::slice::from_raw_parts(pixels, height * width * 3).to_vec();
        let image = match ImageSample::new("ffi-input", width, height, pixel_vec, labels) {
            Ok(img) => img,
            Err(e) => return fail(&e),
        };

        let u = match spec.fusion_mode {
            FusionMode::ClusterToken => {
                if map.is_null() {
                    set_error("this model fuses cluster tokens; a cluster map is required");
                    return PCC_ERR_CONFIG;
                }
                match cluster_vector(&image.labels, &(*map).inner) {
                    Ok(u) => Some(u),
                    Err(e) => return fail(&e),
                }
            }
            _ => None,
        };

        let z = match predict_patches(&image, u.as_ref(), &spec, &model.ckpt.params) {
            Ok(z) => z,
            Err(e) => return fail(&e),
        };
        let mut dense =
            match upsample_predictions(&z, spec.encoder.grid_side(), image.height, image.width) {
                Ok(d) => d,
                Err(e) => return fail(&e),
            };
        if apply_crf != 0 {
            let rgb: Vec<u8> = image
                .pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            dense = match crf_refine(&dense, &rgb, &model.ckpt.config.crf) {
                Ok(d) => d,
                Err(e) => return fail(&e),
            };
        }
        let mask = argmax_labels(&dense, "ffi-input");
        std::ptr::copy_nonoverlapping(mask.labels().as_ptr(), out_labels, height * width);
        PCC_OK
    })
}

// ===========================================================================
// Flat-buffer utilities
// ===========================================================================

/// Mean intersection-over-union between two label buffers of `len` pixels.
/// `ignore_label` < 0 scores every pixel; otherwise ground-truth pixels with
/// that value are skipped.
///
/// # Safety
/// `pred` and `gt` must hold `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pcc_mean_iou(
    pred: *const u8,
    gt: *const u8,
    len: usize,
    num_classes: usize,
    ignore_label: c_int,
    out: *mut c_double,
) -> c_int {
    guarded(|| {
        if pred.is_null() {
            return fail_null("pred");
        }
        if gt.is_null() {
            return fail_null("gt");
        }
        if out.is_null() {
            return fail_null("out");
        }
        let pred_map = match PseudoLabelMap::new(
            1,
            len,
            std::slice::from_raw_parts(pred, len).to_vec(),
            "pred",
        ) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let gt_map = match PseudoLabelMap::new(
            1,
            len,
            std::slice::from_raw_parts(gt, len).to_vec(),
            "gt",
        ) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let ignore = if ignore_label < 0 {
            None
        } else if ignore_label <= u8::MAX as c_int {
            Some(ignore_label as u8)
        } else {
            set_error("ignore_label must be < 256");
            return PCC_ERR_CONFIG;
        };
        match compute_miou(&pred_map, &gt_map, num_classes, ignore) {
            Ok(report) => {
                *out = report.mean_iou;
                PCC_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Execute the whole pipeline (cluster map load, training, pseudo-label
/// generation, evaluation) from a run-config file, exactly like
/// `pcc run --config <path>`. On success writes reports under the config's
/// outputs directory and stores the final mean IoU in `out_mean_iou`
/// (pass NULL to discard it).
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pcc_run_pipeline(
    config_path: *const c_char,
    out_mean_iou: *mut c_double,
) -> c_int {
    guarded(|| {
        let path = match utf8_arg(config_path, "config_path") {
            Ok(p) => p,
            Err(code) => return code,
        };
        let cfg = match pcc::config::RunConfig::load(Path::new(path)) {
            Ok(cfg) => cfg,
            Err(e) => return fail(&e),
        };
        match run_pipeline(&cfg) {
            Ok(outcome) => {
                if !out_mean_iou.is_null() {
                    *out_mean_iou = outcome.report.mean_iou;
                }
                PCC_OK
            }
            Err(e) => fail(&e),
        }
    })
}
