// SPDX-License-Identifier: Apache-2.0

use hdseg_core::knn::{refine_labels, KnnParams};
use hdseg_core::pointcloud::{Point, PointCloud};
use hdseg_core::projection::{project, ProjectionConfig, RangeImage};
use hdseg_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IGNORE: u32 = 0;
const K: usize = 5;

fn point_at(elev_deg: f64, azim_deg: f64, r: f64) -> Point {
    let (e, a) = (elev_deg.to_radians(), azim_deg.to_radians());
    Point::new(
        (r * e.cos() * a.cos()) as f32,
        (r * e.cos() * a.sin()) as f32,
        (r * e.sin()) as f32,
        0.5,
    )
}

/// Random points inside the field of view of a 16×32 image, ranges in
/// `[r0, r1]`, plus a few outside it.
fn random_scene(r: &mut ChaCha8Rng, n: usize, r0: f64, r1: f64) -> (PointCloud, RangeImage) {
    let cfg = ProjectionConfig::new(16, 32);
    let mut pts: Vec<Point> = (0..n)
        .map(|_| point_at(r.random_range(-24.9..2.9), r.random_range(-180.0..180.0), r.random_range(r0..r1)))
        .collect();
    pts.push(point_at(30.0, 10.0, 4.0));
    pts.push(point_at(-40.0, -70.0, 4.0));
    let cloud = PointCloud::new(pts).unwrap();
    let img = project(&cloud, &cfg).unwrap();
    (cloud, img)
}

fn random_labels(r: &mut ChaCha8Rng, img: &RangeImage) -> Vec<u32> {
    (0..img.pixels()).map(|_| r.random_range(0..K as u32)).collect()
}

/// Full-image scan: collect every valid pixel inside the window and the
/// cutoff, sort by (distance, row, column), vote over the first k.
fn oracle(cloud: &PointCloud, img: &RangeImage, labels: &[u32], p: &KnnParams) -> Vec<u32> {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let half = (p.window / 2) as i64;
    let mut out = Vec::new();
    for (i, pt) in cloud.points().iter().enumerate() {
        let Some((u0, v0)) = img.point_to_pixel().unwrap()[i] else {
            out.push(IGNORE);
            continue;
        };
        let r = pt.range();
        let mut cands: Vec<(f64, i64, i64)> = Vec::new();
        for v in 0..h {
            for u in 0..w {
                if (v - v0 as i64).abs() > half || (u - u0 as i64).abs() > half {
                    continue;
                }
                if !img.is_valid(v as usize, u as usize) {
                    continue;
                }
                let d = (r - img.at(4, v as usize, u as usize) as f64).abs();
                if d <= p.cutoff {
                    cands.push((d, v, u));
                }
            }
        }
        if cands.is_empty() {
            out.push(labels[v0 * w as usize + u0]);
            continue;
        }
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut score = [0.0f64; K];
        for &(d, v, u) in cands.iter().take(p.k) {
            score[labels[(v * w + u) as usize] as usize] += (-(d * d) / (2.0 * p.sigma * p.sigma)).exp();
        }
        let top = score.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.push(score.iter().position(|&s| s == top).unwrap() as u32);
    }
    out
}

fn refine(cloud: &PointCloud, img: &RangeImage, labels: &[u32], p: &KnnParams) -> Vec<u32> {
    refine_labels(cloud, img, labels, p, IGNORE, K).unwrap().labels().to_vec()
}

#[test]
fn matches_brute_force_vote() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let params = KnnParams::default();
    for _ in 0..50 {
        let (cloud, img) = random_scene(&mut r, 700, 2.0, 6.0);
        let labels = random_labels(&mut r, &img);
        assert_eq!(refine(&cloud, &img, &labels, &params), oracle(&cloud, &img, &labels, &params));
    }
    for params in [
        KnnParams { window: 3, k: 2, sigma: 0.3, cutoff: 0.5 },
        KnnParams { window: 7, k: 9, sigma: 2.0, cutoff: 3.0 },
        KnnParams { window: 1, k: 1, sigma: 1.0, cutoff: 1.0 },
    ] {
        let (cloud, img) = random_scene(&mut r, 500, 2.0, 6.0);
        let labels = random_labels(&mut r, &img);
        assert_eq!(refine(&cloud, &img, &labels, &params), oracle(&cloud, &img, &labels, &params));
    }
}

#[test]
fn unanimous_window_keeps_label() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let (cloud, img) = random_scene(&mut r, 600, 2.0, 6.0);
    let labels = vec![3; img.pixels()];
    let out = refine(&cloud, &img, &labels, &KnnParams::default());
    let p2px = img.point_to_pixel().unwrap();
    for (l, px) in out.iter().zip(p2px) {
        assert_eq!(*l, if px.is_some() { 3 } else { IGNORE });
    }
}

#[test]
fn all_neighbours_beyond_cutoff_fall_back_to_own_pixel() {
    let cfg = ProjectionConfig::new(16, 32);
    // The far point loses its pixel to the near one; nothing else is in range.
    let cloud = PointCloud::new(vec![point_at(-10.0, 40.0, 5.0), point_at(-10.0, 40.0, 20.0)]).unwrap();
    let img = project(&cloud, &cfg).unwrap();
    let (u, v) = img.point_to_pixel().unwrap()[1].unwrap();
    let mut labels = vec![1; img.pixels()];
    labels[v * 32 + u] = 4;
    let out = refine(&cloud, &img, &labels, &KnnParams::default());
    assert_eq!(out, vec![4, 4]);
}

#[test]
fn points_outside_field_of_view_get_ignore() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (cloud, img) = random_scene(&mut r, 100, 2.0, 6.0);
    let labels = random_labels(&mut r, &img);
    let out = refine(&cloud, &img, &labels, &KnnParams::default());
    assert_eq!(&out[out.len() - 2..], &[IGNORE, IGNORE]);
}

/// Label image built from point labels through the winning point of each pixel.
fn image_from_points(img: &RangeImage, point_labels: &[u32]) -> Vec<u32> {
    img.pixel_to_point()
        .unwrap()
        .iter()
        .map(|p| p.map_or(IGNORE, |i| point_labels[i]))
        .collect()
}

#[test]
fn idempotent_on_unanimous_neighbourhoods() {
    // Range bands 5 m apart, labelled by band: every neighbour inside the
    // cutoff shares the point's label.
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let cfg = ProjectionConfig::new(16, 32);
    let pts: Vec<Point> = (0..800)
        .map(|_| {
            let band = r.random_range(1..5);
            point_at(r.random_range(-24.9..2.9), r.random_range(-180.0..180.0), 5.0 * band as f64 + r.random_range(0.0..0.5))
        })
        .collect();
    let truth: Vec<u32> = pts.iter().map(|p| (p.range() / 5.0).floor() as u32).collect();
    let cloud = PointCloud::new(pts).unwrap();
    let img = project(&cloud, &cfg).unwrap();
    let labels = image_from_points(&img, &truth);
    let params = KnnParams::default();
    let once = refine(&cloud, &img, &labels, &params);
    let twice = refine(&cloud, &img, &image_from_points(&img, &once), &params);
    assert_eq!(once, twice);
}

#[test]
fn k1_wide_kernel_picks_nearest_in_range() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let params = KnnParams { window: 5, k: 1, sigma: 1e9, cutoff: 1.0 };
    for _ in 0..10 {
        let (cloud, img) = random_scene(&mut r, 600, 2.0, 6.0);
        let labels = random_labels(&mut r, &img);
        let out = refine(&cloud, &img, &labels, &params);
        for (i, pt) in cloud.points().iter().enumerate() {
            let Some((u0, v0)) = img.point_to_pixel().unwrap()[i] else {
                continue;
            };
            let mut best: Option<(f64, usize)> = None;
            for v in v0.saturating_sub(2)..=(v0 + 2).min(15) {
                for u in u0.saturating_sub(2)..=(u0 + 2).min(31) {
                    if img.is_valid(v, u) {
                        let d = (pt.range() - img.at(4, v, u) as f64).abs();
                        if d <= 1.0 && best.is_none_or(|b| d < b.0) {
                            best = Some((d, v * 32 + u));
                        }
                    }
                }
            }
            let want = best.map_or(labels[v0 * 32 + u0], |b| labels[b.1]);
            assert_eq!(out[i], want, "point {i}");
        }
    }
}

#[test]
fn error_paths() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let (cloud, img) = random_scene(&mut r, 50, 2.0, 6.0);
    let labels = random_labels(&mut r, &img);
    let p = KnnParams::default();
    assert!(matches!(
        refine_labels(&cloud, &img.without_index_maps(), &labels, &p, IGNORE, K),
        Err(Error::MissingIndexMap(_))
    ));
    assert!(matches!(refine_labels(&cloud, &img, &labels[1..], &p, IGNORE, K), Err(Error::Shape { .. })));
    let bad = KnnParams { window: 2, ..p };
    assert!(matches!(refine_labels(&cloud, &img, &labels, &bad, IGNORE, K), Err(Error::Config(_))));
    let other = PointCloud::new(cloud.points()[1..].to_vec()).unwrap();
    assert!(refine_labels(&other, &img, &labels, &p, IGNORE, K).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn output_labels_come_from_the_image(seed in 0u64..10_000, window in prop::sample::select(vec![1usize, 3, 5, 7]), k in 1usize..8) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (cloud, img) = random_scene(&mut r, 300, 2.0, 8.0);
        let labels: Vec<u32> = (0..img.pixels()).map(|_| r.random_range(1..3)).collect();
        let params = KnnParams { window, k, ..Default::default() };
        let out = refine(&cloud, &img, &labels, &params);
        let p2px = img.point_to_pixel().unwrap();
        for (l, px) in out.iter().zip(p2px) {
            if px.is_some() {
                prop_assert!(*l == 1 || *l == 2);
            } else {
                prop_assert_eq!(*l, IGNORE);
            }
        }
    }
}
