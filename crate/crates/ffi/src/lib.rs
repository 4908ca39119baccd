// SPDX-License-Identifier: Apache-2.0

//! C ABI over `hdseg-core`.
//!
//! Models are opaque heap handles. Every function returns an [`HdsegStatus`];
//! on failure the message is kept per thread and read with
//! [`hdseg_last_error`]. Panics are caught at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use hdseg_core::knn::{refine_labels, KnnParams};
use hdseg_core::model::{Model, ModelConfig};
use hdseg_core::pipeline::{load_model, save_model};
use hdseg_core::pointcloud::{ClassId, Point, PointCloud};
use hdseg_core::projection::{project, unproject_labels, ProjectionConfig};
use hdseg_core::topology::{connection_count, predecessors, Rule};
use hdseg_core::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HdsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Input = 6,
    BufferTooSmall = 7,
    Internal = 8,
    Panic = 9,
}

/// Trained or freshly initialised segmentation network.
pub struct HdsegModel {
    model: Model,
}

/// Cylindrical projection settings. Angles in degrees; `fov_down_deg` is a
/// positive magnitude below the horizon.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct HdsegProjection {
    pub height: usize,
    pub width: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
}

/// Neighbour refinement settings.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct HdsegKnn {
    pub window: usize,
    pub k: usize,
    pub sigma: f64,
    pub cutoff: f64,
}

/// Connection rule for block topologies.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HdsegRule {
    Hd = 0,
    LiteHd = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(HdsegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => HdsegStatus::Io,
            Error::Checkpoint(_) => HdsegStatus::Checkpoint,
            Error::Config(_) | Error::ClassCount { .. } | Error::Indivisible { .. } => HdsegStatus::Config,
            Error::EmptyScan(_) | Error::Framing { .. } | Error::LabelMismatch { .. } | Error::Domain(_) => {
                HdsegStatus::Input
            }
            _ => HdsegStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: HdsegStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HdsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HdsegStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            HdsegStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        return fail(HdsegStatus::NullPointer, format!("{name} is null"));
    }
    Ok(())
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    non_null(p, name)?;
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(HdsegStatus::InvalidArgument, format!("{name} is not valid UTF-8")),
    }
}

unsafe fn model_ref<'a>(m: *const HdsegModel) -> Result<&'a Model, Failure> {
    non_null(m, "model")?;
    Ok(&(*m).model)
}

/// Builds a cloud from `n` rows of `[x, y, z, remission]`.
unsafe fn cloud_arg(points: *const f32, n: usize) -> Result<PointCloud, Failure> {
    if n == 0 {
        return fail(HdsegStatus::Input, "point count is zero");
    }
    non_null(points, "points")?;
    let raw = std::slice::from_raw_parts(points, n * 4);
    let pts = raw.chunks_exact(4).map(|c| Point::new(c[0], c[1], c[2], c[3])).collect();
    Ok(PointCloud::new(pts)?)
}

fn projection_arg(p: &HdsegProjection) -> Result<ProjectionConfig, Failure> {
    let cfg = ProjectionConfig {
        height: p.height,
        width: p.width,
        fov_up_deg: p.fov_up_deg,
        fov_down_deg: p.fov_down_deg,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Message for the last failed call on this thread, or an empty string.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hdseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hdseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `hdseg train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hdseg_model_load(path: *const c_char, out: *mut *mut HdsegModel) -> HdsegStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = path_arg(path, "path")?;
        let model = load_model(&path)?;
        *out = Box::into_raw(Box::new(HdsegModel { model }));
        Ok(())
    })
}

/// Creates an untrained small network with `class_count` classes.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hdseg_model_new_toy(class_count: usize, seed: u64, out: *mut *mut HdsegModel) -> HdsegStatus {
    guard(|| {
        non_null(out, "out")?;
        if class_count < 2 {
            return fail(HdsegStatus::InvalidArgument, "class_count must be >= 2");
        }
        let model = Model::new(ModelConfig::toy(class_count), seed)?;
        *out = Box::into_raw(Box::new(HdsegModel { model }));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hdseg_model_save(model: *const HdsegModel, path: *const c_char) -> HdsegStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = path_arg(path, "path")?;
        save_model(&path, m, 0)?;
        Ok(())
    })
}

/// Releases a model. Null is accepted.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hdseg_model_free(model: *mut HdsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes.
///
/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hdseg_model_class_count(model: *const HdsegModel, out: *mut usize) -> HdsegStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        *out = m.class_count();
        Ok(())
    })
}

/// Labels `n` points given as rows of `[x, y, z, remission]`. Writes one
/// class per point to `labels`. Points outside the field of view get
/// `ignore`. With a non-null `knn` the labels are refined by range-aware
/// neighbour voting.
///
/// # Safety
/// `points` must hold `4 * n` floats and `labels` room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn hdseg_segment_points(
    model: *const HdsegModel,
    points: *const f32,
    n: usize,
    projection: *const HdsegProjection,
    knn: *const HdsegKnn,
    ignore: u32,
    labels: *mut u32,
) -> HdsegStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(projection, "projection")?;
        non_null(labels, "labels")?;
        let cfg = projection_arg(&*projection)?;
        let cloud = cloud_arg(points, n)?;
        let k = m.class_count();
        if ignore as usize >= k {
            return fail(HdsegStatus::InvalidArgument, format!("ignore {ignore} is not below class count {k}"));
        }
        let img = project(&cloud, &cfg)?;
        let pred = m.predict_labels(&m.input_tensor(&img))?;
        let out = match knn.as_ref() {
            Some(p) => {
                let params = KnnParams {
                    window: p.window,
                    k: p.k,
                    sigma: p.sigma,
                    cutoff: p.cutoff,
                };
                params.validate()?;
                refine_labels(&cloud, &img, &pred, &params, ignore as ClassId, k)?
            }
            None => unproject_labels(&pred, &img, &cloud, ignore as ClassId, k)?,
        };
        std::slice::from_raw_parts_mut(labels, n).copy_from_slice(out.labels());
        Ok(())
    })
}

/// Projects `n` points to a `[5, H, W]` range image (channels x, y, z,
/// remission, range; empty pixels are zero). `image` must hold
/// `5 * H * W` floats. `pixel_of_point` may be null; otherwise it receives
/// `n` row-major pixel indices `v * W + u`, with `-1` for points outside
/// the field of view. Points hidden by a closer one keep their pixel.
///
/// # Safety
/// Buffers must have the sizes stated above.
#[no_mangle]
pub unsafe extern "C" fn hdseg_project(
    points: *const f32,
    n: usize,
    projection: *const HdsegProjection,
    image: *mut f32,
    image_len: usize,
    pixel_of_point: *mut i64,
) -> HdsegStatus {
    guard(|| {
        non_null(projection, "projection")?;
        non_null(image, "image")?;
        let cfg = projection_arg(&*projection)?;
        let need = 5 * cfg.height * cfg.width;
        if image_len < need {
            return fail(HdsegStatus::BufferTooSmall, format!("image needs {need} floats, got {image_len}"));
        }
        let cloud = cloud_arg(points, n)?;
        let img = project(&cloud, &cfg)?;
        std::slice::from_raw_parts_mut(image, need).copy_from_slice(img.data());
        if !pixel_of_point.is_null() {
            let dst = std::slice::from_raw_parts_mut(pixel_of_point, n);
            for (d, p) in dst.iter_mut().zip(img.point_to_pixel()?) {
                *d = p.map_or(-1, |(u, v)| (v * cfg.width + u) as i64);
            }
        }
        Ok(())
    })
}

/// Predecessors of layer `layer` (1-based) under `rule`, ascending. The set
/// size goes to `count`; at most `capacity` values are written.
///
/// # Safety
/// `out` must have room for `capacity` values; `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hdseg_topology_predecessors(
    layer: usize,
    rule: HdsegRule,
    out: *mut usize,
    capacity: usize,
    count: *mut usize,
) -> HdsegStatus {
    guard(|| {
        non_null(count, "count")?;
        if layer == 0 {
            return fail(HdsegStatus::InvalidArgument, "layer must be >= 1");
        }
        let preds: Vec<usize> = predecessors(layer, rule.into()).into_iter().collect();
        *count = preds.len();
        if preds.len() > capacity {
            return fail(HdsegStatus::BufferTooSmall, format!("{} predecessors, capacity {capacity}", preds.len()));
        }
        if !preds.is_empty() {
            non_null(out, "out")?;
            std::slice::from_raw_parts_mut(out, preds.len()).copy_from_slice(&preds);
        }
        Ok(())
    })
}

/// Total connections in a block of `layers` layers.
///
/// # Safety
/// `total` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hdseg_topology_connections(layers: usize, rule: HdsegRule, total: *mut usize) -> HdsegStatus {
    guard(|| {
        non_null(total, "total")?;
        if layers == 0 {
            return fail(HdsegStatus::InvalidArgument, "layers must be >= 1");
        }
        *total = connection_count(layers, rule.into()).total;
        Ok(())
    })
}

impl From<HdsegRule> for Rule {
    fn from(r: HdsegRule) -> Self {
        match r {
            HdsegRule::Hd => Rule::Hd,
            HdsegRule::LiteHd => Rule::LiteHd,
        }
    }
}
