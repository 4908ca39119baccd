// SPDX-License-Identifier: Apache-2.0

//! Spherical projection of point clouds onto H×W range images.
//!
//! ```text
//! u = ½·(1 − atan2(y, x)/π)·W
//! v = (1 − (asin(z/r) + f_down)/f)·H        f = f_up + f_down
//! ```
//!
//! The top row looks `f_up` above the horizon and the bottom row `f_down`
//! below it. Points outside that band are left unprojected.

mod file;

pub use file::{read_range_image, write_range_image};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{ClassId, LabelArray, PointCloud};
use crate::tensor::Tensor;

pub const CHANNELS: [&str; 5] = ["x", "y", "z", "rem", "r"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub width: usize,
    pub height: usize,
    /// Field of view above the horizon, degrees.
    pub fov_up_deg: f64,
    /// Field of view below the horizon (positive magnitude), degrees.
    pub fov_down_deg: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            width: 2048,
            height: 64,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
        }
    }
}

impl ProjectionConfig {
    pub fn new(height: usize, width: usize) -> Self {
        ProjectionConfig {
            width,
            height,
            ..Default::default()
        }
    }

    pub fn f_up(&self) -> f64 {
        self.fov_up_deg.to_radians()
    }

    pub fn f_down(&self) -> f64 {
        self.fov_down_deg.to_radians()
    }

    pub fn fov(&self) -> f64 {
        self.f_up() + self.f_down()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be at least 1x1",
                self.height, self.width
            )));
        }
        if !(self.fov() > 0.0) || !self.fov().is_finite() {
            return Err(Error::Config(format!(
                "vertical field of view {}+{} deg must be positive",
                self.fov_up_deg, self.fov_down_deg
            )));
        }
        Ok(())
    }
}

/// Continuous image coordinates of a point, before flooring and clamping.
pub fn pixel_of_point(x: f64, y: f64, z: f64, cfg: &ProjectionConfig) -> Result<(f64, f64)> {
    let r = (x * x + y * y + z * z).sqrt();
    if !(r > 0.0) {
        return Err(Error::Domain(format!(
            "point ({x}, {y}, {z}) has no direction (r = {r})"
        )));
    }
    let u = 0.5 * (1.0 - y.atan2(x) / PI) * cfg.width as f64;
    let v = (1.0 - ((z / r).asin() + cfg.f_down()) / cfg.fov()) * cfg.height as f64;
    Ok((u, v))
}

/// Integer pixel of a point, or `None` when its elevation lies outside the
/// field of view.
pub fn pixel_index(x: f64, y: f64, z: f64, cfg: &ProjectionConfig) -> Result<Option<(usize, usize)>> {
    let r = (x * x + y * y + z * z).sqrt();
    let (u, v) = pixel_of_point(x, y, z, cfg)?;
    let elev = (z / r).asin();
    if elev > cfg.f_up() || elev < -cfg.f_down() {
        return Ok(None);
    }
    let (w, h) = (cfg.width, cfg.height);
    let ui = (u.floor() as i64).rem_euclid(w as i64) as usize;
    let vi = (v.floor().max(0.0) as usize).min(h - 1);
    Ok(Some((ui.min(w - 1), vi)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    height: usize,
    width: usize,
    /// Channel planes (x, y, z, rem, r), each H×W row-major.
    data: Vec<f32>,
    valid: Vec<bool>,
    pixel_to_point: Option<Vec<Option<usize>>>,
    point_to_pixel: Option<Vec<Option<(usize, usize)>>>,
}

impl RangeImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Channel `c` (0..5) at row `v`, column `u`.
    pub fn at(&self, c: usize, v: usize, u: usize) -> f32 {
        self.data[(c * self.height + v) * self.width + u]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, v: usize, u: usize) -> bool {
        self.valid[v * self.width + u]
    }

    pub fn occupancy(&self) -> f64 {
        self.valid.iter().filter(|&&b| b).count() as f64 / self.pixels() as f64
    }

    pub fn pixel_to_point(&self) -> Result<&[Option<usize>]> {
        self.pixel_to_point
            .as_deref()
            .ok_or(Error::MissingIndexMap("pixel_to_point"))
    }

    /// Per-point `(u, v)`; `None` for points outside the field of view.
    pub fn point_to_pixel(&self) -> Result<&[Option<(usize, usize)>]> {
        self.point_to_pixel
            .as_deref()
            .ok_or(Error::MissingIndexMap("point_to_pixel"))
    }

    /// Same image without the index maps.
    pub fn without_index_maps(&self) -> Self {
        RangeImage {
            pixel_to_point: None,
            point_to_pixel: None,
            ..self.clone()
        }
    }

    /// Network input `[1, 5, H, W]`: each channel standardised with
    /// `(value − mean)/std` at valid pixels and 0 elsewhere.
    pub fn to_input(&self, mean: &[f64; 5], std: &[f64; 5]) -> Tensor {
        let n = self.pixels();
        let mut out = vec![0.0; 5 * n];
        for c in 0..5 {
            for i in 0..n {
                if self.valid[i] {
                    out[c * n + i] = (self.data[c * n + i] as f64 - mean[c]) / std[c];
                }
            }
        }
        Tensor::new(&[1, 5, self.height, self.width], out).expect("5 planes")
    }

    pub(crate) fn from_parts(
        height: usize,
        width: usize,
        data: Vec<f32>,
        valid: Vec<bool>,
        pixel_to_point: Option<Vec<Option<usize>>>,
        point_to_pixel: Option<Vec<Option<(usize, usize)>>>,
    ) -> Result<Self> {
        let n = height * width;
        if data.len() != 5 * n || valid.len() != n {
            return Err(Error::shape(
                "range_image",
                format!("{} values / {} mask bits for {height}x{width}", data.len(), valid.len()),
            ));
        }
        if let Some(p2p) = &pixel_to_point {
            if p2p.len() != n || p2p.iter().zip(&valid).any(|(p, &v)| p.is_some() != v) {
                return Err(Error::shape("range_image", "pixel_to_point disagrees with mask"));
            }
        }
        Ok(RangeImage {
            height,
            width,
            data,
            valid,
            pixel_to_point,
            point_to_pixel,
        })
    }
}

/// Projects `cloud`. On pixel collisions the nearest point wins; equal
/// ranges go to the lower point index. Losing points keep their pixel in
/// `point_to_pixel`.
pub fn project(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<RangeImage> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let mut winner: Vec<Option<usize>> = vec![None; n];
    let mut best_r = vec![f64::INFINITY; n];
    let mut p2px = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points().iter().enumerate() {
        let px = pixel_index(p.x as f64, p.y as f64, p.z as f64, cfg)?;
        if let Some((u, v)) = px {
            let k = v * w + u;
            let r = p.range();
            if r < best_r[k] {
                best_r[k] = r;
                winner[k] = Some(i);
            }
        }
        p2px.push(px);
    }
    let mut data = vec![0.0f32; 5 * n];
    for (k, wi) in winner.iter().enumerate() {
        if let Some(i) = *wi {
            let p = cloud.points()[i];
            let vals = [p.x, p.y, p.z, p.rem, p.range() as f32];
            for (c, v) in vals.into_iter().enumerate() {
                data[c * n + k] = v;
            }
        }
    }
    let valid = winner.iter().map(Option::is_some).collect();
    RangeImage::from_parts(h, w, data, valid, Some(winner), Some(p2px))
}

/// Reads each point's label from its recorded pixel. Points outside the
/// field of view get `ignore`.
pub fn unproject_labels(
    label_image: &[ClassId],
    img: &RangeImage,
    cloud: &PointCloud,
    ignore: ClassId,
    class_count: usize,
) -> Result<LabelArray> {
    if label_image.len() != img.pixels() {
        return Err(Error::shape(
            "unproject_labels",
            format!(
                "label image has {} cells, range image is {}x{}",
                label_image.len(),
                img.height,
                img.width
            ),
        ));
    }
    let p2px = img.point_to_pixel()?;
    if p2px.len() != cloud.len() {
        return Err(Error::LabelMismatch {
            labels: p2px.len(),
            points: cloud.len(),
        });
    }
    let labels = p2px
        .iter()
        .map(|px| px.map_or(ignore, |(u, v)| label_image[v * img.width + u]))
        .collect();
    LabelArray::new(labels, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Point;

    fn cfg() -> ProjectionConfig {
        ProjectionConfig::new(64, 2048)
    }

    #[test]
    fn forward_axis() {
        let c = cfg();
        let (u, v) = pixel_of_point(10.0, 0.0, 0.0, &c).unwrap();
        assert_eq!(u, 1024.0);
        assert!((v - (1.0 - c.f_down() / c.fov()) * 64.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_azimuth() {
        let (u, _) = pixel_of_point(1.0, 1.0, 0.0, &cfg()).unwrap();
        assert!((u - 768.0).abs() < 1e-9);
    }

    #[test]
    fn origin_is_domain_error() {
        assert!(matches!(
            pixel_of_point(0.0, 0.0, 0.0, &cfg()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn azimuth_minus_pi_wraps() {
        let c = ProjectionConfig::new(4, 8);
        let (u, _) = pixel_of_point(-1.0, -0.0, 0.0, &c).unwrap();
        assert_eq!(u, 8.0);
        assert_eq!(pixel_index(-1.0, -0.0, 0.0, &c).unwrap().unwrap().0, 0);
    }

    #[test]
    fn out_of_fov_unprojected() {
        let c = cfg();
        assert_eq!(pixel_index(1.0, 0.0, 1.0, &c).unwrap(), None);
        assert_eq!(pixel_index(1.0, 0.0, -1.0, &c).unwrap(), None);
        let edge = -c.f_down();
        let px = pixel_index(edge.cos(), 0.0, edge.sin(), &c).unwrap().unwrap();
        assert_eq!(px.1, 63);
    }

    #[test]
    fn nearest_wins_and_ties_go_low() {
        let c = cfg();
        let cloud = PointCloud::new(vec![
            Point::new(9.0, 0.0, 0.0, 0.9),
            Point::new(5.0, 0.0, 0.0, 0.5),
            Point::new(5.0, 0.0, 0.0, 0.1),
        ])
        .unwrap();
        let img = project(&cloud, &c).unwrap();
        let p2p = img.pixel_to_point().unwrap();
        assert_eq!(p2p.iter().flatten().collect::<Vec<_>>(), vec![&1]);
        let px = img.point_to_pixel().unwrap();
        assert!(px.iter().all(|p| *p == px[0] && p.is_some()));
        let (u, v) = px[0].unwrap();
        assert_eq!(img.at(4, v, u), 5.0);
        assert_eq!(img.at(3, v, u), 0.5);
    }
}
