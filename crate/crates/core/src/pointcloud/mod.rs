// SPDX-License-Identifier: Apache-2.0

//! Point clouds, per-point labels, KITTI-format I/O and synthetic scenes.

mod class_map;
mod kitti;
pub mod synthetic;

pub use class_map::ClassMap;
pub use kitti::{load_kitti_labels, load_kitti_scan, write_kitti_labels, write_kitti_scan, LoadedScan};
pub use synthetic::{generate_synthetic_scene, SyntheticScene, SyntheticSceneSpec};

use crate::error::{Error, Result};

/// Training-label id.
pub type ClassId = u32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub rem: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, rem: f32) -> Self {
        Point { x, y, z, rem }
    }

    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }

    /// Finite coordinates and a non-zero range.
    pub fn is_usable(&self) -> bool {
        [self.x, self.y, self.z, self.rem].iter().all(|v| v.is_finite()) && self.range() > 0.0
    }
}

/// A non-empty scan whose points are all finite with positive range.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("point cloud must hold at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_usable()) {
            return Err(Error::Domain(format!(
                "point {i} is non-finite or at the origin: {:?}",
                points[i]
            )));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies `f` to every point. Fails if a transformed point becomes
    /// unusable.
    pub fn map(&self, f: impl Fn(Point) -> Point) -> Result<Self> {
        PointCloud::new(self.points.iter().map(|&p| f(p)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelArray {
    labels: Vec<ClassId>,
    class_count: usize,
}

impl LabelArray {
    pub fn new(labels: Vec<ClassId>, class_count: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabelArray {
            labels,
            class_count,
        })
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Errors unless there is exactly one label per point.
    pub fn check_paired(&self, cloud: &PointCloud) -> Result<()> {
        if self.len() != cloud.len() {
            return Err(Error::LabelMismatch {
                labels: self.len(),
                points: cloud.len(),
            });
        }
        Ok(())
    }

    /// Number of points carrying each class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}
