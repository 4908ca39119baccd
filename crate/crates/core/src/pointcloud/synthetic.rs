// SPDX-License-Identifier: Apache-2.0

//! Labelled synthetic scenes.
//!
//! A virtual rotating sensor at the origin casts one ray per cell of a
//! rows × cols azimuth/elevation grid against a handful of primitives
//! (ground plane, yawed boxes, poles, walls). Each hit becomes a point
//! labelled with the class of the primitive it struck. Ray directions sit at
//! cell centres of the matching range-image grid, so projecting the scene
//! with the same field of view recovers one point per hit cell.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassId, LabelArray, Point, PointCloud};
use crate::error::{Error, Result};

pub const GROUND: ClassId = 1;
pub const BOX: ClassId = 2;
pub const POLE: ClassId = 3;
pub const WALL: ClassId = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub class_count: usize,
    /// Half side of the square scene footprint, meters.
    pub extent: f64,
    pub ground: bool,
    pub boxes: usize,
    pub poles: usize,
    pub walls: usize,
    /// Standard deviation of radial range noise, meters.
    pub noise_sigma: f64,
    pub rng_seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub sensor_height: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            class_count: 5,
            extent: 40.0,
            ground: true,
            boxes: 4,
            poles: 4,
            walls: 2,
            noise_sigma: 0.02,
            rng_seed: 0,
            rows: 64,
            cols: 512,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
            sensor_height: 1.73,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.class_count < 2 {
            return bad(format!("class_count {} < 2", self.class_count));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !(self.extent > 6.0) {
            return bad(format!("extent {} must exceed 6 m", self.extent));
        }
        if self.rows == 0 || self.cols == 0 {
            return bad("ray grid must be at least 1x1".into());
        }
        if !(self.fov_up_deg + self.fov_down_deg > 0.0) {
            return bad("vertical field of view must be positive".into());
        }
        if !self.ground && self.boxes + self.poles + self.walls == 0 {
            return bad("scene has no primitives".into());
        }
        Ok(())
    }

    /// Unit direction of the ray through grid cell (`row`, `col`).
    pub fn ray(&self, row: usize, col: usize) -> [f64; 3] {
        let up = self.fov_up_deg.to_radians();
        let f = up + self.fov_down_deg.to_radians();
        let elev = up - (row as f64 + 0.5) / self.rows as f64 * f;
        let azim = PI * (1.0 - 2.0 * (col as f64 + 0.5) / self.cols as f64);
        [elev.cos() * azim.cos(), elev.cos() * azim.sin(), elev.sin()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Horizontal plane, limited to the scene square.
    Ground { z: f64, extent: f64 },
    /// Box with vertical axis, yawed about its centre.
    Box {
        center: [f64; 2],
        half: [f64; 2],
        yaw: f64,
        z: [f64; 2],
        class: ClassId,
    },
    /// Open vertical cylinder.
    Pole {
        center: [f64; 2],
        radius: f64,
        z: [f64; 2],
    },
}

impl Primitive {
    pub fn class(&self) -> ClassId {
        match self {
            Primitive::Ground { .. } => GROUND,
            Primitive::Box { class, .. } => *class,
            Primitive::Pole { .. } => POLE,
        }
    }

    /// Distance along the unit ray `d` from the origin to the first hit.
    pub fn intersect(&self, d: [f64; 3]) -> Option<f64> {
        match *self {
            Primitive::Ground { z, extent } => {
                if d[2] * z <= 0.0 {
                    return None;
                }
                let t = z / d[2];
                (t * d[0].abs() <= extent && t * d[1].abs() <= extent).then_some(t)
            }
            Primitive::Box {
                center,
                half,
                yaw,
                z,
                ..
            } => {
                let (s, c) = yaw.sin_cos();
                // Ray in the box frame.
                let o = [-center[0], -center[1]];
                let ol = [c * o[0] + s * o[1], -s * o[0] + c * o[1], 0.0];
                let dl = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
                let lo = [-half[0], -half[1], z[0]];
                let hi = [half[0], half[1], z[1]];
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if dl[k].abs() < 1e-15 {
                        if ol[k] < lo[k] || ol[k] > hi[k] {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((lo[k] - ol[k]) / dl[k], (hi[k] - ol[k]) / dl[k]);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
            Primitive::Pole { center, radius, z } => {
                let a = d[0] * d[0] + d[1] * d[1];
                if a < 1e-15 {
                    return None;
                }
                let b = -2.0 * (d[0] * center[0] + d[1] * center[1]);
                let cc = center[0] * center[0] + center[1] * center[1] - radius * radius;
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                let hz = t * d[2];
                (t > 0.0 && hz >= z[0] && hz <= z[1]).then_some(t)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    pub labels: LabelArray,
    pub primitives: Vec<Primitive>,
    /// Grid cell (row, col) of the ray that produced each point.
    pub cells: Vec<(usize, usize)>,
    /// Total rays cast (rows × cols).
    pub rays: usize,
}

impl SyntheticScene {
    pub fn hit_fraction(&self) -> f64 {
        self.cells.len() as f64 / self.rays as f64
    }
}

fn place(rng: &mut ChaCha8Rng, r_lo: f64, r_hi: f64) -> ([f64; 2], f64) {
    let r = rng.random_range(r_lo..r_hi);
    let a = rng.random_range(-PI..PI);
    ([r * a.cos(), r * a.sin()], a)
}

fn layout(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let ground = -spec.sensor_height;
    let e = spec.extent;
    let mut prims = Vec::new();
    if spec.ground {
        prims.push(Primitive::Ground { z: ground, extent: e });
    }
    for _ in 0..spec.boxes {
        let (center, _) = place(rng, 5.0, e - 3.0);
        let half = [rng.random_range(1.5..2.5), rng.random_range(0.8..1.1)];
        let yaw = rng.random_range(0.0..PI);
        let h = rng.random_range(1.4..2.0);
        prims.push(Primitive::Box {
            center,
            half,
            yaw,
            z: [ground, ground + h],
            class: BOX,
        });
    }
    for _ in 0..spec.poles {
        let (center, _) = place(rng, 4.0, e - 1.0);
        let radius = rng.random_range(0.1..0.25);
        let h = rng.random_range(3.0..6.0);
        prims.push(Primitive::Pole {
            center,
            radius,
            z: [ground, ground + h],
        });
    }
    for _ in 0..spec.walls {
        let (center, a) = place(rng, 0.6 * e, 0.9 * e);
        let half = [rng.random_range(4.0..10.0), 0.15];
        let yaw = a + PI / 2.0 + rng.random_range(-0.3..0.3);
        let h = rng.random_range(2.5..4.0);
        prims.push(Primitive::Box {
            center,
            half,
            yaw,
            z: [ground, ground + h],
            class: WALL,
        });
    }
    prims
}

/// Remission range for one object of a class.
fn remission_band(class: ClassId) -> (f64, f64) {
    match class {
        GROUND => (0.15, 0.35),
        BOX => (0.2, 0.8),
        POLE => (0.3, 0.6),
        _ => (0.2, 0.5),
    }
}

/// Casts the ray grid against `prims`; returns (primitive index, distance)
/// per cell in row-major order.
pub fn cast(spec: &SyntheticSceneSpec, prims: &[Primitive]) -> Vec<Option<(usize, f64)>> {
    let mut out = Vec::with_capacity(spec.rows * spec.cols);
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let d = spec.ray(row, col);
            let mut best: Option<(usize, f64)> = None;
            for (k, p) in prims.iter().enumerate() {
                if let Some(t) = p.intersect(d) {
                    if best.is_none_or(|(_, bt)| t < bt) {
                        best = Some((k, t));
                    }
                }
            }
            out.push(best);
        }
    }
    out
}

pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let prims = layout(spec, &mut rng);
    let base_rem: Vec<f64> = prims
        .iter()
        .map(|p| {
            let (lo, hi) = remission_band(p.class());
            rng.random_range(lo..hi)
        })
        .collect();
    let range_noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let rem_noise = Normal::new(0.0, 0.03).expect("constant sigma");
    let top = spec.class_count as ClassId - 1;

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut cells = Vec::new();
    for (cell, hit) in cast(spec, &prims).into_iter().enumerate() {
        let Some((k, t)) = hit else { continue };
        let (row, col) = (cell / spec.cols, cell % spec.cols);
        let d = spec.ray(row, col);
        let r = (t + range_noise.sample(&mut rng)).max(1e-2);
        let rem = (base_rem[k] + rem_noise.sample(&mut rng)).clamp(0.0, 1.0);
        points.push(Point::new(
            (r * d[0]) as f32,
            (r * d[1]) as f32,
            (r * d[2]) as f32,
            rem as f32,
        ));
        labels.push(prims[k].class().min(top));
        cells.push((row, col));
    }
    if points.is_empty() {
        return Err(Error::Config("synthetic scene produced no ray hits".into()));
    }
    Ok(SyntheticScene {
        cloud: PointCloud::new(points)?,
        labels: LabelArray::new(labels, spec.class_count)?,
        primitives: prims,
        cells,
        rays: spec.rows * spec.cols,
    })
}
