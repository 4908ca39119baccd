// SPDX-License-Identifier: Apache-2.0

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AugmentConfig, DataConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pointcloud::{
    generate_synthetic_scene, load_kitti_labels, load_kitti_scan, ClassId, ClassMap, LabelArray, Point, PointCloud,
};
use crate::projection::{project, ProjectionConfig, RangeImage};
use crate::tensor::Tensor;

const SYNTHETIC_NAMES: [&str; 5] = ["unlabeled", "ground", "box", "pole", "wall"];

#[derive(Clone, Debug)]
pub struct Frame {
    pub name: String,
    pub cloud: PointCloud,
    pub labels: LabelArray,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Frame>,
    pub val: Vec<Frame>,
    pub ignore: ClassId,
    pub class_names: Vec<String>,
}

pub fn load_frames(cfg: &DataConfig) -> Result<Dataset> {
    match cfg {
        DataConfig::Synthetic {
            scene,
            train_frames,
            val_frames,
        } => {
            let frame = |i: usize| -> Result<Frame> {
                let mut spec = scene.clone();
                spec.rng_seed = scene.rng_seed.wrapping_add(i as u64);
                let s = generate_synthetic_scene(&spec)?;
                Ok(Frame {
                    name: format!("synthetic-{}", spec.rng_seed),
                    cloud: s.cloud,
                    labels: s.labels,
                })
            };
            let train = (0..*train_frames).map(frame).collect::<Result<_>>()?;
            let val = (*train_frames..train_frames + val_frames).map(frame).collect::<Result<_>>()?;
            let class_names = (0..scene.class_count)
                .map(|c| SYNTHETIC_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string()))
                .collect();
            Ok(Dataset {
                train,
                val,
                ignore: 0,
                class_names,
            })
        }
        DataConfig::Kitti { train, val, class_map } => {
            let map = match class_map {
                Some(p) => ClassMap::load(p)?,
                None => ClassMap::semantic_kitti(),
            };
            let load = |pairs: &[super::ScanPair]| -> Result<Vec<Frame>> {
                pairs
                    .iter()
                    .map(|p| {
                        let scan = load_kitti_scan(&p.scan)?;
                        let raw = load_kitti_labels(&p.labels, &map)?;
                        Ok(Frame {
                            name: p.scan.display().to_string(),
                            labels: scan.attach_labels(&raw)?,
                            cloud: scan.cloud,
                        })
                    })
                    .collect()
            };
            Ok(Dataset {
                train: load(train)?,
                val: load(val)?,
                ignore: map.ignore(),
                class_names: map.names().to_vec(),
            })
        }
    }
}

/// Random yaw, per-axis translation and y mirroring. Points pushed onto the
/// sensor origin are dropped together with their labels.
pub fn augment(frame: &Frame, aug: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Frame> {
    if !aug.enabled {
        return Ok(frame.clone());
    }
    let yaw = if aug.rotate { rng.random_range(-PI..PI) } else { 0.0 };
    let t = aug.translate;
    let shift: [f64; 3] = if t > 0.0 {
        [rng.random_range(-t..t), rng.random_range(-t..t), rng.random_range(-t..t)]
    } else {
        [0.0; 3]
    };
    let flip = rng.random_bool(aug.flip_y);
    let (s, c) = yaw.sin_cos();
    let mut points = Vec::with_capacity(frame.cloud.len());
    let mut labels = Vec::with_capacity(frame.cloud.len());
    for (p, &l) in frame.cloud.points().iter().zip(frame.labels.labels()) {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let mut q = [c * x - s * y + shift[0], s * x + c * y + shift[1], z + shift[2]];
        if flip {
            q[1] = -q[1];
        }
        let p = Point::new(q[0] as f32, q[1] as f32, q[2] as f32, p.rem);
        if p.is_usable() {
            points.push(p);
            labels.push(l);
        }
    }
    Ok(Frame {
        name: frame.name.clone(),
        cloud: PointCloud::new(points)?,
        labels: LabelArray::new(labels, frame.labels.class_count())?,
    })
}

/// Per-pixel label of the point that won each pixel; `ignore` elsewhere.
pub fn label_image(img: &RangeImage, labels: &LabelArray, ignore: ClassId) -> Result<Vec<ClassId>> {
    Ok(img
        .pixel_to_point()?
        .iter()
        .map(|p| p.map_or(ignore, |i| labels.labels()[i]))
        .collect())
}

/// Network input and target for one frame.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: Tensor,
    pub target: Vec<ClassId>,
}

pub fn prepare(frame: &Frame, proj: &ProjectionConfig, model: &ModelConfig, ignore: ClassId) -> Result<(Sample, RangeImage)> {
    frame.labels.check_paired(&frame.cloud)?;
    if frame.labels.class_count() != model.class_count {
        return Err(Error::ClassCount {
            model: model.class_count,
            data: frame.labels.class_count(),
        });
    }
    let img = project(&frame.cloud, proj)?;
    let sample = Sample {
        input: img.to_input(&model.input_mean, &model.input_std),
        target: label_image(&img, &frame.labels, ignore)?,
    };
    Ok((sample, img))
}
