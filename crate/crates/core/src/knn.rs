// SPDX-License-Identifier: Apache-2.0

//! Sliding-window nearest-neighbour label refinement over a range image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{ClassId, LabelArray, PointCloud};
use crate::projection::RangeImage;

/// Index of the range channel in a [`RangeImage`].
const RANGE_CHANNEL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnParams {
    /// Odd window side in pixels.
    pub window: usize,
    pub k: usize,
    /// Gaussian bandwidth in metres.
    pub sigma: f64,
    /// Neighbours farther than this in range are dropped (metres).
    pub cutoff: f64,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams {
            window: 5,
            k: 5,
            sigma: 1.0,
            cutoff: 1.0,
        }
    }
}

impl KnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("knn window must be odd and >= 1, got {}", self.window)));
        }
        if self.k == 0 {
            return Err(Error::Config("knn k must be >= 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("knn sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.cutoff > 0.0) {
            return Err(Error::Config(format!("knn cutoff must be > 0, got {}", self.cutoff)));
        }
        Ok(())
    }
}

/// Relabels every point of `cloud` by a Gaussian-weighted vote of the `k`
/// window pixels closest in range to it. Windows are clipped at the image
/// border. Votes tie toward the smaller class id. A point with no neighbour
/// inside the cutoff keeps the label of its own pixel; points outside the
/// field of view get `ignore`.
pub fn refine_labels(
    cloud: &PointCloud,
    img: &RangeImage,
    label_image: &[ClassId],
    params: &KnnParams,
    ignore: ClassId,
    class_count: usize,
) -> Result<LabelArray> {
    params.validate()?;
    let (h, w) = (img.height(), img.width());
    if label_image.len() != h * w {
        return Err(Error::shape(
            "refine_labels",
            format!("label image has {} cells, range image is {h}x{w}", label_image.len()),
        ));
    }
    img.pixel_to_point()?;
    let p2px = img.point_to_pixel()?;
    if p2px.len() != cloud.len() {
        return Err(Error::LabelMismatch {
            labels: p2px.len(),
            points: cloud.len(),
        });
    }
    if let Some(&bad) = label_image.iter().find(|&&l| l as usize >= class_count) {
        return Err(Error::shape("refine_labels", format!("label {bad} >= {class_count} classes")));
    }
    let range = img.plane(RANGE_CHANNEL);
    let half = params.window / 2;
    let inv = 1.0 / (2.0 * params.sigma * params.sigma);
    let mut neighbours: Vec<(f64, usize)> = Vec::with_capacity(params.window * params.window);
    let mut votes = vec![0.0f64; class_count];
    let labels = cloud
        .points()
        .iter()
        .zip(p2px)
        .map(|(p, px)| {
            let Some((u, v)) = *px else {
                return ignore;
            };
            let r = p.range();
            neighbours.clear();
            for vv in v.saturating_sub(half)..=(v + half).min(h - 1) {
                for uu in u.saturating_sub(half)..=(u + half).min(w - 1) {
                    let idx = vv * w + uu;
                    if !img.valid()[idx] {
                        continue;
                    }
                    let d = (r - range[idx] as f64).abs();
                    if d <= params.cutoff {
                        neighbours.push((d, idx));
                    }
                }
            }
            if neighbours.is_empty() {
                return label_image[v * w + u];
            }
            neighbours.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            votes.iter_mut().for_each(|x| *x = 0.0);
            for &(d, idx) in neighbours.iter().take(params.k) {
                votes[label_image[idx] as usize] += (-d * d * inv).exp();
            }
            let mut best = 0;
            for c in 1..class_count {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best as ClassId
        })
        .collect();
    LabelArray::new(labels, class_count)
}
