// SPDX-License-Identifier: Apache-2.0

//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 2`.

use std::time::{Duration, Instant};

use hdseg_core::knn::{refine_labels, KnnParams};
use hdseg_core::losses::{boundary_map, class_weights, one_hot, BoundaryParams, LossSpec, LossWeights};
use hdseg_core::mcspn::refine;
use hdseg_core::metrics::miou;
use hdseg_core::model::{Fusion, Mode, Model, ModelConfig};
use hdseg_core::pipeline::{
    evaluate, load_frames, train, AugmentConfig, DataConfig, Dataset, EvalReport, OptimizerConfig, RunConfig,
};
use hdseg_core::pointcloud::{Point, PointCloud, SyntheticSceneSpec};
use hdseg_core::projection::{pixel_of_point, project, ProjectionConfig, RangeImage};
use hdseg_core::tensor::gradcheck::{compare_param_gradient, finite_diff_check, sample_param_coords};
use hdseg_core::tensor::{softmax_channels, ConvSpec, Graph, ParamStore, PoolSpec, Tensor, Var};
use hdseg_core::topology::{hd_predecessors, lhd_predecessors};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// 1. Projection.

/// Elevation from atan2 of the vertical and horizontal components, azimuth
/// from atan of the ratio with explicit quadrant handling.
fn projection_oracle(x: f64, y: f64, z: f64, cfg: &ProjectionConfig) -> (f64, f64) {
    use std::f64::consts::PI;
    let az = if x > 0.0 {
        (y / x).atan()
    } else if x < 0.0 {
        (y / x).atan() + if y >= 0.0 { PI } else { -PI }
    } else {
        y.signum() * PI / 2.0
    };
    let elev = z.atan2(x.hypot(y));
    let (up, down) = (cfg.fov_up_deg.to_radians(), cfg.fov_down_deg.to_radians());
    let u = 0.5 * (1.0 - az / PI) * cfg.width as f64;
    let v = (1.0 - (elev + down) / (up + down)) * cfg.height as f64;
    (u, v)
}

fn c1_projection() -> Check {
    let cfg = ProjectionConfig::new(64, 2048);
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 100_000 {
        let (x, y, z): (f64, f64, f64) = (r.random_range(-80.0..80.0), r.random_range(-80.0..80.0), r.random_range(-10.0..4.0));
        if x.hypot(y) < 0.5 {
            continue;
        }
        let (u, v) = pixel_of_point(x, y, z, &cfg).map_err(e)?;
        let (uo, vo) = projection_oracle(x, y, z, &cfg);
        for (a, b) in [(u, uo), (v, vo)] {
            let rel = if b == 0.0 { a.abs() } else { ((a - b) / b).abs() };
            worst = worst.max(rel);
        }
        checked += 1;
    }
    ensure(worst <= 1e-9, || format!("max relative error {worst:e} > 1e-9"))?;
    Ok(format!("{checked} points, max relative error {worst:.2e}"))
}

// 2. Topology.

fn c2_topology() -> Check {
    let (mut lite, mut hd) = (0usize, 0usize);
    let (mut slack_ln, mut slack_log2) = (f64::INFINITY, f64::INFINITY);
    for l in 1..=10_000usize {
        lite += lhd_predecessors(l).len();
        hd += hd_predecessors(l).len();
        let lf = l as f64;
        let (b_ln, b_log2) = (lf + 0.2 * lf * lf.ln(), lf + 0.2 * lf * lf.log2());
        ensure(lite as f64 <= b_ln, || format!("L={l}: total {lite} exceeds ln bound {b_ln:.3}"))?;
        ensure(lite as f64 <= b_log2, || format!("L={l}: total {lite} exceeds log2 bound {b_log2:.3}"))?;
        ensure(l < 3 || lite < hd, || format!("L={l}: lite total {lite} not below HD total {hd}"))?;
        slack_ln = slack_ln.min(b_ln - lite as f64);
        slack_log2 = slack_log2.min(b_log2 - lite as f64);
    }
    Ok(format!(
        "L<=10000: ln and log2 bounds hold (min slack {slack_ln:.3} / {slack_log2:.3}); L=10000 totals lite {lite} vs HD {hd}"
    ))
}

// 3. Gradients.

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Weighted sum so that gradients differ per element.
fn probe_sum(g: &mut Graph, y: Var, seed: u64) -> hdseg_core::Result<Var> {
    let shape = g.shape(y).to_vec();
    let p = g.input(rand_t(&shape, seed));
    let yp = g.mul(y, p)?;
    Ok(g.sum(yp))
}

type Op = Box<dyn Fn(&mut Graph, Var) -> hdseg_core::Result<Var>>;

fn op_suite() -> Vec<(&'static str, Tensor, f64, Op)> {
    let x = rand_t(&[2, 3, 6, 6], 24);
    let spec = ConvSpec::same(3, 4, 3, 2);
    let (w, b) = (rand_t(&spec.weight_shape(), 9), rand_t(&[4], 10));
    let (w1, b1, x1, x2) = (w.clone(), b.clone(), x.clone(), x.clone());
    let gamma = rand_t(&[3], 16).map(|v| v + 1.5);
    let (rm, rv) = (rand_t(&[3], 21), rand_t(&[3], 22).map(|v| v + 1.5));
    let mut r = rng(4);
    let t: Vec<u32> = (0..2 * 25).map(|_| r.random_range(0..4)).collect();
    let logits = Tensor::uniform(&[2, 4, 5, 5], -2.0, 2.0, &mut r);
    let probs = softmax_channels(&Tensor::uniform(&[2, 4, 5, 5], -2.0, 2.0, &mut r)).unwrap();
    let (t1, t2, t3, t4) = (t.clone(), t.clone(), t.clone(), t);
    let mx = Tensor::uniform(&[1, 2, 4, 5], -1.0, 1.0, &mut r);
    let mraw = Tensor::uniform(&[1, 24, 4, 5], -0.8, 0.8, &mut r);
    let (mx1, mraw1) = (mx.clone(), mraw.clone());
    let g1 = gamma.clone();
    vec![
        ("conv2d/x", x.clone(), 1e-5, Box::new(move |g, x| {
            let (w, b) = (g.input(w.clone()), g.input(b.clone()));
            let y = g.conv2d(x, w, Some(b), &spec)?;
            probe_sum(g, y, 1)
        })),
        ("conv2d/w", w1.clone(), 1e-5, Box::new(move |g, w| {
            let (x, b) = (g.input(x1.clone()), g.input(b1.clone()));
            let y = g.conv2d(x, w, Some(b), &spec)?;
            let s = g.square(y);
            Ok(g.sum(s))
        })),
        ("conv2d/b", rand_t(&[4], 12), 1e-5, Box::new(move |g, b| {
            let (x, w) = (g.input(x2.clone()), g.input(w1.clone()));
            let y = g.conv2d(x, w, Some(b), &spec)?;
            let s = g.square(y);
            Ok(g.sum(s))
        })),
        ("batch_norm_train/x", x.clone(), 1e-4, Box::new(move |g, x| {
            let (ga, be) = (g.input(gamma.clone()), g.input(Tensor::zeros(&[3])));
            let (y, _) = g.batch_norm_train(x, ga, be)?;
            let y = g.square(y);
            probe_sum(g, y, 2)
        })),
        ("batch_norm_train/gamma", g1.clone(), 1e-5, Box::new(move |g, ga| {
            let xv = g.input(rand_t(&[2, 3, 6, 6], 24));
            let be = g.input(Tensor::zeros(&[3]));
            let (y, _) = g.batch_norm_train(xv, ga, be)?;
            probe_sum(g, y, 3)
        })),
        ("batch_norm_eval", x.clone(), 1e-5, Box::new(move |g, x| {
            let (ga, be) = (g.input(g1.clone()), g.input(Tensor::zeros(&[3])));
            let y = g.batch_norm_eval(x, ga, be, &rm, &rv)?;
            let s = g.square(y);
            Ok(g.sum(s))
        })),
        ("leaky_relu", x.clone(), 1e-4, Box::new(|g, x| { let y = g.leaky_relu(x, 0.01); probe_sum(g, y, 4) })),
        ("sigmoid", x.clone(), 1e-4, Box::new(|g, x| { let y = g.sigmoid(x); probe_sum(g, y, 5) })),
        ("square", x.clone(), 1e-4, Box::new(|g, x| { let y = g.square(x); probe_sum(g, y, 6) })),
        ("affine", x.clone(), 1e-4, Box::new(|g, x| { let y = g.affine(x, -2.0, 0.3); probe_sum(g, y, 7) })),
        ("sqrt", x.clone(), 1e-4, Box::new(|g, x| { let s = g.square(x); let s = g.affine(s, 1.0, 0.5); let y = g.sqrt(s); probe_sum(g, y, 8) })),
        ("div", x.clone(), 1e-4, Box::new(|g, x| { let s = g.square(x); let d = g.affine(s, 1.0, 3.0); let y = g.div(x, d)?; probe_sum(g, y, 9) })),
        ("sub", x.clone(), 1e-4, Box::new(|g, x| { let s = g.square(x); let y = g.sub(s, x)?; probe_sum(g, y, 10) })),
        ("mul", x.clone(), 1e-4, Box::new(|g, x| { let s = g.sigmoid(x); let y = g.mul(s, x)?; probe_sum(g, y, 11) })),
        ("mean", x.clone(), 1e-4, Box::new(|g, x| { let s = g.square(x); Ok(g.mean(s)) })),
        ("avg_pool/same", x.clone(), 1e-4, Box::new(|g, x| { let y = g.avg_pool2d(x, PoolSpec::same(3))?; probe_sum(g, y, 12) })),
        ("avg_pool/down", x.clone(), 1e-4, Box::new(|g, x| { let y = g.avg_pool2d(x, PoolSpec::down(2))?; probe_sum(g, y, 13) })),
        ("max_pool", x.clone(), 1e-7, Box::new(|g, x| { let y = g.max_pool2d(x, PoolSpec::same(3))?; probe_sum(g, y, 14) })),
        ("upsample", x.clone(), 1e-4, Box::new(|g, x| { let y = g.upsample_nearest(x, 2)?; probe_sum(g, y, 15) })),
        ("softmax", x.clone(), 1e-4, Box::new(|g, x| { let y = g.softmax(x)?; probe_sum(g, y, 16) })),
        ("concat", x.clone(), 1e-4, Box::new(|g, x| { let s = g.square(x); let y = g.concat(&[x, s])?; probe_sum(g, y, 17) })),
        ("slice_channels", x.clone(), 1e-4, Box::new(|g, x| { let y = g.slice_channels(x, 1, 2)?; probe_sum(g, y, 18) })),
        ("dropout", x.clone(), 1e-4, Box::new(|g, x| { let y = g.dropout(x, 0.3, &mut rng(99))?; probe_sum(g, y, 19) })),
        ("mul_const", x.clone(), 1e-4, Box::new(|g, x| { let m = rand_t(&[2, 3, 6, 6], 20); let y = g.mul_const(x, &m)?; probe_sum(g, y, 21) })),
        ("weighted_sum", x, 1e-4, Box::new(|g, x| { let a = g.sum(x); let s = g.square(x); let b = g.sum(s); g.weighted_sum(&[(a, 0.5), (b, 2.0)]) })),
        ("mcspn/x", mx, 1e-5, Box::new(move |g, xv| {
            let r = g.input(mraw.clone());
            let y = g.mcspn(xv, r, Fusion::Max, 2)?;
            probe_sum(g, y, 22)
        })),
        ("mcspn/affinity", mraw1, 1e-5, Box::new(move |g, rv| {
            let xv = g.input(mx1.clone());
            let y = g.mcspn(xv, rv, Fusion::Mean, 2)?;
            probe_sum(g, y, 23)
        })),
        ("loss/weighted_cross_entropy", logits.clone(), 1e-5, Box::new(move |g, v| {
            g.weighted_cross_entropy(v, &t1, &[0.0, 1.3, 0.7, 2.0], 0)
        })),
        ("loss/lovasz_softmax", probs.clone(), 1e-7, Box::new(move |g, v| g.lovasz_softmax(v, &t2, 0))),
        ("loss/boundary", probs, 1e-7, Box::new(move |g, v| g.boundary_loss(v, &t3, 0, BoundaryParams::default()))),
        ("loss/softmax+lovasz+boundary", logits, 1e-4, Box::new(move |g, v| {
            let p = g.softmax(v)?;
            let a = g.lovasz_softmax(p, &t4, 0)?;
            let b = g.boundary_loss(p, &t4, 0, BoundaryParams::default())?;
            g.weighted_sum(&[(a, 1.0), (b, 1.0)])
        })),
    ]
}

fn small_model_config() -> ModelConfig {
    let mut c = ModelConfig::toy(4);
    c.channels = [5, 4, 3, 6, 6, 6, 8, 8, 10, 10, 8, 6, 6, 5];
    for s in c.encoder.iter_mut() {
        s.depth = 2;
        s.growth = 3;
    }
    c.dropout = 0.0;
    c
}

/// Relative error over sampled parameters of the full toy model.
fn model_param_check(
    m: &Model,
    samples: usize,
    eps: f64,
    loss: impl Fn(&Model, &mut Graph, Var) -> Var,
    x: &Tensor,
) -> Result<(f64, usize), String> {
    let eval = |s: &ParamStore| {
        let mut model = m.clone();
        model.params = s.clone();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = model.forward(&mut g, xv, Mode::Train, &mut rng(0)).unwrap();
        let l = loss(&model, &mut g, out.logits);
        (g, l)
    };
    let mut store = m.params.clone();
    store.zero_grads();
    let (mut g, l) = eval(&store);
    g.backward(l).map_err(e)?;
    g.accumulate_into(&mut store);
    let coords = sample_param_coords(&store, samples, 7);
    let rep = compare_param_gradient(&mut store, &coords, eps, |s| {
        let (g, l) = eval(s);
        Ok(g.value(l).item())
    })
    .map_err(e)?;
    Ok((rep.max_rel_error, rep.checked))
}

fn c3_gradients() -> Check {
    let mut worst_op = (0.0f64, "");
    let suite = op_suite();
    let n_ops = suite.len();
    for (name, x, eps, f) in suite {
        let err = finite_diff_check(|g, v| f(g, v), &x, eps).map_err(e)?;
        ensure(err <= 1e-6, || format!("{name}: relative error {err:e} > 1e-6"))?;
        if err >= worst_op.0 {
            worst_op = (err, name);
        }
    }

    let x = rand_t(&[2, 5, 32, 32], 19);
    let m = Model::new(small_model_config(), 21).map_err(e)?;
    let probe = rand_t(&[2, 4, 32, 32], 20);
    let (probe_err, n1) = model_param_check(
        &m,
        240,
        3e-8,
        |_, g, logits| {
            let p = g.input(probe.clone());
            let y = g.mul(logits, p).unwrap();
            g.mean(y)
        },
        &x,
    )?;
    let m = Model::new(small_model_config(), 3).map_err(e)?;
    let x = rand_t(&[2, 5, 32, 32], 5);
    let t: Vec<u32> = (0..2 * 32 * 32)
        .map(|i| {
            let (row, col) = ((i % 1024) / 32, i % 32);
            if row < 3 {
                0
            } else {
                1 + ((row / 8 + col / 8) % 3) as u32
            }
        })
        .collect();
    let spec = LossSpec {
        weights: LossWeights::default(),
        class_weights: class_weights(&[0, 3, 2, 1], 0),
        ignore: 0,
        boundary: BoundaryParams::default(),
    };
    let (loss_err, n2) = model_param_check(
        &m,
        200,
        3e-7,
        |model, g, logits| g.total_loss(logits, &t, &model.params, &spec).unwrap().total,
        &x,
    )?;
    ensure(n1 >= 200 && n2 >= 200, || format!("only {n1}/{n2} parameters sampled"))?;
    ensure(probe_err <= 1e-4, || format!("full model (linear probe): {probe_err:e} > 1e-4"))?;
    ensure(loss_err <= 1e-4, || format!("full model (total loss): {loss_err:e} > 1e-4"))?;
    Ok(format!(
        "{n_ops} op/loss checks, worst {:.2e} ({}); full model {n1} params {probe_err:.2e}, total loss {n2} params {loss_err:.2e}",
        worst_op.0, worst_op.1
    ))
}

// 4. MCSPN invariants.

fn c4_mcspn() -> Check {
    let mut r = rng(1);
    let x = Tensor::uniform(&[2, 3, 6, 9], -5.0, 5.0, &mut r);
    for fusion in [Fusion::Max, Fusion::Mean] {
        let y = refine(&x, &Tensor::zeros(&[2, 36, 6, 9]), fusion, 2).map_err(e)?;
        ensure(y == x, || format!("{fusion:?}: zero affinity is not the identity"))?;
    }
    let mut r = rng(11);
    for trial in 0..1000 {
        let (k, h, w) = (r.random_range(1..4), r.random_range(1..7), r.random_range(1..7));
        let x = Tensor::uniform(&[1, k, h, w], -10.0, 10.0, &mut r);
        let raw = Tensor::uniform(&[1, 12 * k, h, w], 0.0, r.random_range(0.1..2.0), &mut r);
        let fusion = if trial % 2 == 0 { Fusion::Max } else { Fusion::Mean };
        let y = refine(&x, &raw, fusion, r.random_range(1..3)).map_err(e)?;
        let hw = h * w;
        for c in 0..k {
            let plane = &x.data()[c * hw..(c + 1) * hw];
            let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in &y.data()[c * hw..(c + 1) * hw] {
                ensure(v >= lo - 1e-9 && v <= hi + 1e-9, || format!("trial {trial}: {v} outside [{lo}, {hi}]"))?;
            }
        }
    }
    let mut r = rng(4);
    let (k, h, w) = (4, 5, 6);
    let hw = h * w;
    let x = Tensor::uniform(&[1, k, h, w], -1.0, 1.0, &mut r);
    let raw = Tensor::uniform(&[1, 12 * k, h, w], -1.0, 1.0, &mut r);
    let base = refine(&x, &raw, Fusion::Max, 1).map_err(e)?;
    for c in 0..k {
        let mut xp = x.clone();
        for v in &mut xp.data_mut()[c * hw..(c + 1) * hw] {
            *v += r.random_range(-5.0..5.0);
        }
        let y = refine(&xp, &raw, Fusion::Max, 1).map_err(e)?;
        for c2 in (0..k).filter(|&c2| c2 != c) {
            ensure(y.data()[c2 * hw..(c2 + 1) * hw] == base.data()[c2 * hw..(c2 + 1) * hw], || {
                format!("perturbing class {c} changed class {c2}")
            })?;
        }
    }
    Ok("identity bit-exact; 1000 convex-bound fields; per-class independence".into())
}

// 5. Boundary map and loss.

fn brute_boundary(y: &[Vec<u8>], theta: usize) -> Vec<Vec<u8>> {
    let (h, w) = (y.len(), y[0].len());
    let r = (theta / 2) as i64;
    let mut out = vec![vec![0; w]; h];
    for i in 0..h {
        for j in 0..w {
            let mut m = 0;
            for di in -r..=r {
                for dj in -r..=r {
                    let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                    let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                    m = m.max(1 - y[ii][jj]);
                }
            }
            out[i][j] = m - (1 - y[i][j]);
        }
    }
    out
}

fn mask_tensor(y: &[Vec<u8>]) -> Tensor {
    let (h, w) = (y.len(), y[0].len());
    Tensor::new(&[1, 1, h, w], y.iter().flatten().map(|&v| v as f64).collect()).unwrap()
}

fn square8(r0: usize, c0: usize) -> Vec<u32> {
    let mut t = vec![0u32; 64];
    for r in r0..r0 + 4 {
        for c in c0..c0 + 4 {
            t[r * 8 + c] = 1;
        }
    }
    t
}

fn boundary_loss_of(pred: &[u32], target: &[u32], soft: bool) -> Result<f64, String> {
    let p = one_hot(pred, 1, 2, 8, 8, 255);
    let mut g = Graph::new();
    let v = g.input(p);
    let l = g.boundary_loss(v, target, 255, BoundaryParams { theta: 3, soft }).map_err(e)?;
    Ok(g.value(l).item())
}

fn c5_boundary() -> Check {
    let mut r = rng(3);
    for n in 0..500 {
        let theta = if n % 2 == 0 { 3 } else { 5 };
        let (h, w) = (r.random_range(1..10), r.random_range(1..12));
        let density = r.random_range(0.1..0.9);
        let y: Vec<Vec<u8>> = (0..h).map(|_| (0..w).map(|_| r.random_bool(density) as u8).collect()).collect();
        let got = boundary_map(&mask_tensor(&y), theta).map_err(e)?;
        ensure(got == mask_tensor(&brute_boundary(&y, theta)), || format!("mask {n} (θ={theta}) differs from oracle"))?;
    }
    let t = square8(2, 2);
    for soft in [false, true] {
        let perfect = boundary_loss_of(&t, &t, soft)?;
        ensure(perfect == 0.0, || format!("perfect prediction gives {perfect}"))?;
        // Class 1 rings share 6 of 12 pixels, class 0 rings 10 of 20.
        let want = ((1.0 - 12.0 / 24.0) + (1.0 - 20.0 / 40.0)) / 2.0;
        let got = boundary_loss_of(&square8(2, 3), &t, soft)?;
        ensure((got - want).abs() < 1e-15, || format!("shifted square: {got} vs {want}"))?;
    }
    Ok("500 masks match the sliding-window oracle; perfect = 0; shifted square = 0.5".into())
}

// 6. Metric.

/// Mean IoU as an exact rational, rounded once.
fn brute_miou(gt: &[u32], pred: &[u32], k: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..k as u32 {
        let tp = gt.iter().zip(pred).filter(|(g, p)| **g == c && **p == c).count();
        let union = gt.iter().zip(pred).filter(|(g, p)| **g == c || **p == c).count();
        if union > 0 {
            ious.push(BigRational::new(BigInt::from(tp), BigInt::from(union)));
        }
    }
    let n = BigInt::from(ious.len());
    (ious.into_iter().fold(BigRational::zero(), |a, b| a + b) / n).to_f64().unwrap()
}

fn c6_metric() -> Check {
    let mut r = rng(6);
    for trial in 0..100 {
        let k = r.random_range(2..7);
        let n = r.random_range(1..300);
        let gt: Vec<u32> = (0..n).map(|_| r.random_range(0..k as u32)).collect();
        let pred: Vec<u32> = (0..n).map(|_| r.random_range(0..k as u32)).collect();
        let got = miou(&gt, &pred, k, None).map_err(e)?.miou;
        let want = brute_miou(&gt, &pred, k);
        ensure(got == want, || format!("trial {trial}: {got} vs exact {want}"))?;
    }
    let fixture = miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2, None).map_err(e)?.miou;
    ensure(fixture == 7.0 / 12.0, || format!("2-class fixture gives {fixture}"))?;
    Ok("100 random pairs equal the exact rational mean; 2-class fixture = 7/12".into())
}

// 7–9. Training experiments on a fixed synthetic dataset.

/// Fixed 200/40-frame synthetic dataset on a 16×128 image. With
/// `oversample` 2 the ray grid has twice the image resolution per axis, so
/// several returns share a pixel as with a real scanner at this image size.
fn experiment_config(seed: u64, epochs: usize, oversample: usize) -> RunConfig {
    let mut model = ModelConfig::toy(5);
    model.dropout = 0.2;
    RunConfig {
        data: DataConfig::Synthetic {
            scene: SyntheticSceneSpec {
                rows: 16 * oversample,
                cols: 128 * oversample,
                rng_seed: 100,
                ..Default::default()
            },
            train_frames: 200,
            val_frames: 40,
        },
        model,
        projection: ProjectionConfig::new(16, 128),
        optimizer: OptimizerConfig {
            epochs,
            ..Default::default()
        },
        seed,
        ..Default::default()
    }
}

const ABLATION_EPOCHS: usize = 12;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

fn ablation_stage(cfg: &mut RunConfig, stage: usize) {
    cfg.model.use_icm = stage >= 1;
    cfg.model.use_cam = stage >= 2;
    cfg.loss.gamma = if stage >= 3 { 1.0 } else { 0.0 };
    cfg.model.use_mcspn = stage >= 4;
}

fn best_val_miou(cfg: &RunConfig, data: &Dataset) -> Result<f64, String> {
    let out = train(cfg, data, |_| {}).map_err(e)?;
    out.logs
        .iter()
        .filter_map(|l| l.val.map(|v| v.miou))
        .fold(None, |a: Option<f64>, b| Some(a.map_or(b, |a| a.max(b))))
        .ok_or_else(|| "no validation scores".to_string())
}

fn c7_ablation() -> Check {
    let data = load_frames(&experiment_config(0, 1, 2).data).map_err(e)?;
    let names = ["base", "+ICM", "+CAM", "+boundary", "+MCSPN"];
    let mut means = Vec::new();
    for stage in 0..names.len() {
        let mut scores = Vec::new();
        for seed in ABLATION_SEEDS {
            let mut cfg = experiment_config(seed, ABLATION_EPOCHS, 2);
            ablation_stage(&mut cfg, stage);
            scores.push(best_val_miou(&cfg, &data)?);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        eprintln!("  ablation {:<10} seeds {scores:.4?} mean {mean:.4}", names[stage]);
        means.push(mean);
    }
    let summary: Vec<String> = names.iter().zip(&means).map(|(n, m)| format!("{n} {:.2}", 100.0 * m)).collect();
    let summary = summary.join(" → ");
    for s in 1..means.len() {
        ensure(means[s] >= means[s - 1], || format!("{} lowers mIoU: {summary}", names[s]))?;
    }
    let gain = 100.0 * (means[4] - means[3]);
    ensure(gain >= 0.5, || format!("MCSPN adds {gain:.2} < 0.5 points: {summary}"))?;
    Ok(summary)
}

fn c8a_single_frame() -> Check {
    let mut model = ModelConfig::toy(5);
    model.dropout = 0.0;
    let cfg = RunConfig {
        data: DataConfig::Synthetic {
            scene: SyntheticSceneSpec {
                rows: 32,
                cols: 256,
                rng_seed: 100,
                ..Default::default()
            },
            train_frames: 1,
            val_frames: 0,
        },
        model,
        projection: ProjectionConfig::new(32, 256),
        augment: AugmentConfig {
            enabled: false,
            ..Default::default()
        },
        optimizer: OptimizerConfig {
            batch_size: 1,
            epochs: 200,
            decay: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let data = load_frames(&cfg.data).map_err(e)?;
    let out = train(&cfg, &data, |_| {}).map_err(e)?;
    let r = evaluate(&out.model, &data.train, &cfg.projection, &cfg.knn, data.ignore, &data.class_names).map_err(e)?;
    ensure(r.miou >= 0.95, || format!("train mIoU {:.4} < 0.95 after 200 steps", r.miou))?;
    Ok(format!("200 steps on one frame: train mIoU {:.4}", r.miou))
}

/// Trains the full model for 20 epochs; returns the best validation mIoU
/// and the report for the best checkpoint.
fn train_and_report(cfg: &RunConfig) -> Result<(f64, EvalReport), String> {
    let data = load_frames(&cfg.data).map_err(e)?;
    let out = train(cfg, &data, |l| {
        if let Some(v) = l.val {
            eprintln!("  epoch {:>2} loss {:.4} val mIoU {:.4} (knn {:.4})", l.epoch, l.loss.total, v.miou, v.miou_knn);
        }
    })
    .map_err(e)?;
    let best = out.logs.iter().filter_map(|l| l.val.map(|v| v.miou)).fold(0.0, f64::max);
    let report = evaluate(&out.best, &data.val, &cfg.projection, &cfg.knn, data.ignore, &data.class_names).map_err(e)?;
    Ok((best, report))
}

fn c8b_training() -> Check {
    let (best, _) = train_and_report(&experiment_config(0, 20, 1))?;
    ensure(best >= 0.85, || format!("best val mIoU {best:.4} < 0.85 within 20 epochs"))?;
    Ok(format!("200 frames, 20 epochs: best val mIoU {best:.4}"))
}

fn c9_knn() -> Check {
    let oracle = c9_knn_oracle()?;
    let (_, rep) = train_and_report(&experiment_config(0, 20, 2))?;
    let delta = 100.0 * (rep.miou_knn - rep.miou);
    ensure(delta >= -0.2, || {
        format!("refinement lowers val mIoU by {:.2} points ({:.4} → {:.4})", -delta, rep.miou, rep.miou_knn)
    })?;
    Ok(format!("{oracle}; val mIoU {:.4} → {:.4} with refinement ({delta:+.2} points)", rep.miou, rep.miou_knn))
}

fn point_at(elev_deg: f64, azim_deg: f64, r: f64) -> Point {
    let (el, az) = (elev_deg.to_radians(), azim_deg.to_radians());
    Point::new((r * el.cos() * az.cos()) as f32, (r * el.cos() * az.sin()) as f32, (r * el.sin()) as f32, 0.5)
}

/// Scans every pixel of the image rather than the window.
fn knn_oracle(cloud: &PointCloud, img: &RangeImage, labels: &[u32], p: &KnnParams, k: usize) -> Vec<u32> {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let half = (p.window / 2) as i64;
    let p2px = img.point_to_pixel().unwrap();
    cloud
        .points()
        .iter()
        .zip(p2px)
        .map(|(pt, px)| {
            let Some((u0, v0)) = *px else { return 0 };
            let r = pt.range();
            let mut cands: Vec<(f64, i64, i64)> = Vec::new();
            for v in 0..h {
                for u in 0..w {
                    let near = (v - v0 as i64).abs() <= half && (u - u0 as i64).abs() <= half;
                    if near && img.is_valid(v as usize, u as usize) {
                        let d = (r - img.at(4, v as usize, u as usize) as f64).abs();
                        if d <= p.cutoff {
                            cands.push((d, v, u));
                        }
                    }
                }
            }
            if cands.is_empty() {
                return labels[v0 * w as usize + u0];
            }
            cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut score = vec![0.0f64; k];
            for &(d, v, u) in cands.iter().take(p.k) {
                score[labels[(v * w + u) as usize] as usize] += (-(d * d) / (2.0 * p.sigma * p.sigma)).exp();
            }
            let top = score.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            score.iter().position(|&s| s == top).unwrap() as u32
        })
        .collect()
}

fn c9_knn_oracle() -> Check {
    let cfg = ProjectionConfig::new(16, 32);
    let mut r = rng(1);
    let param_sets = [
        KnnParams::default(),
        KnnParams { window: 3, k: 2, sigma: 0.3, cutoff: 0.5 },
        KnnParams { window: 7, k: 9, sigma: 2.0, cutoff: 3.0 },
    ];
    let mut scenes = 0;
    for params in &param_sets {
        for _ in 0..20 {
            let n = r.random_range(200..900);
            let mut pts: Vec<Point> = (0..n)
                .map(|_| point_at(r.random_range(-24.9..2.9), r.random_range(-180.0..180.0), r.random_range(2.0..6.0)))
                .collect();
            pts.push(point_at(30.0, 10.0, 4.0));
            let cloud = PointCloud::new(pts).map_err(e)?;
            let img = project(&cloud, &cfg).map_err(e)?;
            let labels: Vec<u32> = (0..img.pixels()).map(|_| r.random_range(0..5)).collect();
            let got = refine_labels(&cloud, &img, &labels, params, 0, 5).map_err(e)?;
            ensure(got.labels() == knn_oracle(&cloud, &img, &labels, params, 5).as_slice(), || {
                format!("scene {scenes} ({params:?}) differs from the brute-force vote")
            })?;
            scenes += 1;
        }
    }
    Ok(format!("{scenes} random scenes match the brute-force vote"))
}

fn report(n: &str, title: &str, limit: Option<Duration>, elapsed: Duration, result: &Check) -> bool {
    let over = limit.is_some_and(|l| elapsed > l);
    let ok = result.is_ok() && !over;
    let limit_text = limit.map_or(String::new(), |l| format!(" / limit {:.0} s", l.as_secs_f64()));
    let detail = match result {
        Ok(s) if over => format!("{s}; runtime over limit"),
        Ok(s) => s.clone(),
        Err(s) => s.clone(),
    };
    println!(
        "[{}] {n}. {title}: {detail} ({:.1} s{limit_text})",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let secs = |s: u64| Some(Duration::from_secs(s));
    let mut all = true;

    type Simple = (usize, &'static str, Option<Duration>, fn() -> Check);
    let simple: [Simple; 6] = [
        (1, "projection", secs(5), c1_projection),
        (2, "topology", secs(10), c2_topology),
        (3, "gradients", secs(600), c3_gradients),
        (4, "MCSPN invariants", secs(60), c4_mcspn),
        (5, "boundary machinery", secs(60), c5_boundary),
        (6, "metric oracle", None, c6_metric),
    ];
    for (n, title, limit, f) in simple {
        if want(n) {
            let (r, t) = timed(f);
            all &= report(&n.to_string(), title, limit, t, &r);
        }
    }
    if want(7) {
        let (r, t) = timed(c7_ablation);
        all &= report("7", "ablation direction", secs(7200), t, &r);
    }
    type Training = (usize, &'static str, &'static str, fn() -> Check);
    let training: [Training; 3] = [
        (8, "8a", "single-frame overfit", c8a_single_frame),
        (8, "8b", "200-frame training", c8b_training),
        (9, "9", "KNN refinement", c9_knn),
    ];
    for (n, label, title, f) in training {
        if want(n) {
            let (r, t) = timed(f);
            all &= report(label, title, None, t, &r);
        }
    }
    if !all {
        std::process::exit(1);
    }
}
