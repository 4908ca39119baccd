// SPDX-License-Identifier: Apache-2.0

use hdseg_core::model::{
    Builder, Cam, Fwd, Icm, KernelSpec, LhdBlock, Mode, Model, ModelConfig, ResBlock,
};
use hdseg_core::tensor::gradcheck::{compare_param_gradient, sample_param_coords};
use hdseg_core::tensor::{ConvSpec, Graph, ParamStore, PoolSpec, Tensor, Var};
use hdseg_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Runs `body` in a fresh graph with `x` as a constant input.
fn run<T>(
    store: &ParamStore,
    mode: Mode,
    x: &Tensor,
    body: impl FnOnce(&mut Fwd, Var) -> hdseg_core::Result<T>,
) -> (Graph, T) {
    let mut g = Graph::new();
    let mut r = rng(99);
    let xv = g.input(x.clone());
    let out = {
        let mut f = Fwd {
            g: &mut g,
            store,
            mode,
            rng: &mut r,
            slope: 0.01,
            bn_updates: Vec::new(),
        };
        body(&mut f, xv).unwrap()
    };
    (g, out)
}

/// Gradient of `loss` w.r.t. sampled parameters, checked by central
/// differences. Returns the worst relative error.
fn param_check(
    store: &mut ParamStore,
    samples: usize,
    eps: f64,
    loss: impl Fn(&ParamStore) -> (Graph, Var),
) -> (f64, usize) {
    store.zero_grads();
    let (mut g, y) = loss(store);
    g.backward(y).unwrap();
    g.accumulate_into(store);
    let coords = sample_param_coords(store, samples, 5);
    let rep = compare_param_gradient(store, &coords, eps, |s| {
        let (g, y) = loss(s);
        Ok(g.value(y).item())
    })
    .unwrap();
    (rep.max_rel_error, rep.checked)
}

fn small_cfg() -> ModelConfig {
    let mut c = ModelConfig::toy(4);
    c.channels = [5, 4, 3, 6, 6, 6, 8, 8, 10, 10, 8, 6, 6, 5];
    for s in c.encoder.iter_mut() {
        s.depth = 2;
        s.growth = 3;
    }
    c.dropout = 0.0;
    c
}

#[test]
fn icm_output_shape() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let icm = Icm::new(&mut Builder::new(&mut store, &mut r, 0.01), &cfg);
    let x = Tensor::uniform(&[1, 5, 8, 32], -1.0, 1.0, &mut rng(1));
    for mode in [Mode::Train, Mode::Eval] {
        let (g, y) = run(&store, mode, &x, |f, x| icm.forward(f, x));
        assert_eq!(g.shape(y), &[1, 48, 8, 32]);
    }
    let bad = Tensor::zeros(&[1, 4, 8, 32]);
    let mut g = Graph::new();
    let mut r2 = rng(0);
    let xv = g.input(bad);
    let mut f = Fwd {
        g: &mut g,
        store: &store,
        mode: Mode::Eval,
        rng: &mut r2,
        slope: 0.01,
        bn_updates: vec![],
    };
    assert!(matches!(icm.forward(&mut f, xv), Err(Error::Shape { .. })));
}

#[test]
fn icm_zero_input_gives_zero_output() {
    let cfg = ModelConfig::toy(5);
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let icm = Icm::new(&mut Builder::new(&mut store, &mut r, 0.01), &cfg);
    let x = Tensor::zeros(&[2, 5, 8, 16]);
    for mode in [Mode::Train, Mode::Eval] {
        let (g, y) = run(&store, mode, &x, |f, x| icm.forward(f, x));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn icm_parameter_gradients() {
    let cfg = small_cfg();
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let icm = Icm::new(&mut Builder::new(&mut store, &mut r, 0.01), &cfg);
    let x = Tensor::uniform(&[2, 5, 6, 7], -1.0, 1.0, &mut rng(1));
    let (err, n) = param_check(&mut store, usize::MAX, 1e-5, |s| {
        let (mut g, y) = run(s, Mode::Train, &x, |f, x| icm.forward(f, x));
        let m = g.mean(y);
        (g, m)
    });
    assert_eq!(n, store.trainable_count());
    assert!(err <= 1e-4, "{err:e}");
}

fn cam_fixture() -> (ParamStore, Cam, Tensor) {
    let mut store = ParamStore::new();
    let mut r = rng(2);
    let cam = Cam::new(&mut Builder::new(&mut store, &mut r, 0.01), 16, 7, 4);
    let x = Tensor::uniform(&[1, 16, 8, 32], -2.0, 2.0, &mut rng(3));
    (store, cam, x)
}

#[test]
fn cam_saturated_gates() {
    let (mut store, cam, x) = cam_fixture();
    let bias = cam.excite.bias.unwrap();
    store.value_mut(bias).data_mut().fill(80.0);
    let (g, y) = run(&store, Mode::Eval, &x, |f, x| cam.forward(f, x));
    assert!(g.value(y).max_abs_diff(&x) < 1e-30);
    store.value_mut(bias).data_mut().fill(-800.0);
    let (g, y) = run(&store, Mode::Eval, &x, |f, x| cam.forward(f, x));
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn cam_matches_manual_composition() {
    let (store, cam, x) = cam_fixture();
    let (g, y) = run(&store, Mode::Eval, &x, |f, x| cam.forward(f, x));
    let mut m = Graph::new();
    let xv = m.input(x.clone());
    let p = m.avg_pool2d(xv, PoolSpec::same(7)).unwrap();
    let w1 = m.input(store.value(cam.squeeze.weight).clone());
    let b1 = m.input(store.value(cam.squeeze.bias.unwrap()).clone());
    let s = m.conv2d(p, w1, Some(b1), &ConvSpec::pointwise(16, 4)).unwrap();
    let s = m.leaky_relu(s, 0.01);
    let w2 = m.input(store.value(cam.excite.weight).clone());
    let b2 = m.input(store.value(cam.excite.bias.unwrap()).clone());
    let e = m.conv2d(s, w2, Some(b2), &ConvSpec::pointwise(4, 16)).unwrap();
    let gate = m.sigmoid(e);
    let want = m.mul(xv, gate).unwrap();
    assert_eq!(g.value(y), m.value(want));
}

#[test]
fn lhd_depth_one_is_single_conv() {
    let mut store = ParamStore::new();
    let mut r = rng(4);
    let blk = LhdBlock::new(&mut Builder::new(&mut store, &mut r, 0.01), 6, 10, 1, 4, 1.6);
    assert_eq!(blk.layers.len(), 1);
    assert!(blk.compress.is_none());
    assert_eq!(blk.layers[0].spec, ConvSpec::same(6, 10, 3, 1));
    let x = Tensor::uniform(&[1, 6, 4, 8], -1.0, 1.0, &mut rng(5));
    let (g, y) = run(&store, Mode::Eval, &x, |f, x| blk.forward(f, x));
    let (g2, y2) = run(&store, Mode::Eval, &x, |f, x| blk.layers[0].forward(f, x));
    assert_eq!(g.value(y), g2.value(y2));
}

#[test]
fn lhd_connectivity_probe() {
    let mut store = ParamStore::new();
    let mut r = rng(6);
    let blk = LhdBlock::new(&mut Builder::new(&mut store, &mut r, 0.01), 4, 8, 5, 3, 1.6);
    assert_eq!(blk.plan.preds(5), &[1, 3]);
    let x = Tensor::uniform(&[1, 4, 4, 6], -1.0, 1.0, &mut rng(7));
    let (g0, base) = run(&store, Mode::Eval, &x, |f, x| blk.forward_traced(f, x, None));
    let in5 = g0.value(base.inputs[4]).clone();
    for z in 1..=4 {
        let (g, tr) = run(&store, Mode::Eval, &x, |f, x| blk.forward_traced(f, x, Some(z)));
        let changed = g.value(tr.inputs[4]) != &in5;
        // Only layers 1 and 3 feed layer 5; zeroing 1 also reaches it
        // through 3, zeroing 2 or 4 must not.
        let reaches = matches!(z, 1 | 3);
        assert_eq!(changed, reaches, "zeroing layer {z}");
    }
}

#[test]
fn encoder_stage_one_halves_resolution() {
    let cfg = ModelConfig::toy(5);
    let m = Model::new(cfg.clone(), 0).unwrap();
    let stage = &m.net.encoder[0];
    let x = Tensor::uniform(&[1, cfg.channels[3], 16, 64], -1.0, 1.0, &mut rng(8));
    let (g, y) = run(&m.params, Mode::Eval, &x, |f, x| {
        let h = stage.lhd.forward(f, x)?;
        let h = stage.cam.as_ref().unwrap().forward(f, h)?;
        f.g.avg_pool2d(h, PoolSpec::down(2))
    });
    assert_eq!(g.shape(y), &[1, cfg.channels[4], 8, 32]);
}

fn resblock_fixture() -> (ParamStore, ResBlock) {
    let mut store = ParamStore::new();
    let mut r = rng(10);
    let ladder = [KernelSpec::new(3, 1), KernelSpec::new(5, 1)];
    let blk = ResBlock::new(&mut Builder::new(&mut store, &mut r, 0.01), 6, 3, 4, &ladder);
    (store, blk)
}

#[test]
fn resblock_zero_ladder_is_residual_identity() {
    let (mut store, blk) = resblock_fixture();
    for c in &blk.ladder {
        store.value_mut(c.weight).data_mut().fill(0.0);
    }
    let x = Tensor::uniform(&[2, 6, 3, 4], -1.0, 1.0, &mut rng(11));
    let skip = Tensor::uniform(&[2, 3, 6, 8], -1.0, 1.0, &mut rng(12));
    let (g, (y, fused)) = run(&store, Mode::Train, &x, |f, xv| {
        let sv = f.g.input(skip.clone());
        Ok((blk.forward(f, xv, sv)?, blk.fused(f, xv, sv)?))
    });
    assert_eq!(g.value(y), g.value(fused));
}

#[test]
fn resblock_rejects_spatial_mismatch() {
    let (store, blk) = resblock_fixture();
    let x = Tensor::zeros(&[1, 6, 3, 4]);
    let mut g = Graph::new();
    let mut r = rng(0);
    let xv = g.input(x);
    let skip = g.input(Tensor::zeros(&[1, 3, 6, 9]));
    let mut f = Fwd {
        g: &mut g,
        store: &store,
        mode: Mode::Eval,
        rng: &mut r,
        slope: 0.01,
        bn_updates: vec![],
    };
    assert!(matches!(blk.forward(&mut f, xv, skip), Err(Error::Shape { .. })));
}

#[test]
fn resblock_parameter_gradients() {
    let (mut store, blk) = resblock_fixture();
    let x = Tensor::uniform(&[2, 6, 2, 3], -1.0, 1.0, &mut rng(12));
    let skip = Tensor::uniform(&[2, 3, 4, 6], -1.0, 1.0, &mut rng(13));
    let (err, _) = param_check(&mut store, usize::MAX, 1e-5, |s| {
        let (mut g, y) = run(s, Mode::Train, &x, |f, xv| {
            let sv = f.g.input(skip.clone());
            blk.forward(f, xv, sv)
        });
        let m = g.mean(y);
        (g, m)
    });
    assert!(err <= 1e-4, "{err:e}");
}

#[test]
fn toy_model_shape_walk() {
    let cfg = ModelConfig::toy(5);
    let m = Model::new(cfg.clone(), 0).unwrap();
    let x = Tensor::uniform(&[1, 5, 64, 512], -1.0, 1.0, &mut rng(14));
    let mut g = Graph::new();
    let xv = g.input(x);
    let out = m.forward(&mut g, xv, Mode::Eval, &mut rng(0)).unwrap();
    assert_eq!(g.shape(out.logits), &[1, 5, 64, 512]);
    let enc: Vec<Vec<usize>> = out.encoder_features.iter().map(|&v| g.shape(v).to_vec()).collect();
    let ch = cfg.channels;
    assert_eq!(
        enc,
        vec![
            vec![1, ch[4], 64, 512],
            vec![1, ch[5], 32, 256],
            vec![1, ch[6], 16, 128],
            vec![1, ch[7], 8, 64],
            vec![1, ch[8], 4, 32],
        ]
    );
    let dec: Vec<Vec<usize>> = out.decoder_features.iter().map(|&v| g.shape(v).to_vec()).collect();
    assert_eq!(
        dec,
        vec![
            vec![1, ch[10], 8, 64],
            vec![1, ch[11], 16, 128],
            vec![1, ch[12], 32, 256],
            vec![1, ch[13], 64, 512],
        ]
    );
}

#[test]
fn indivisible_input_names_multiple() {
    let m = Model::new(small_cfg(), 0).unwrap();
    let mut g = Graph::new();
    let xv = g.input(Tensor::zeros(&[1, 5, 24, 32]));
    let e = m.forward(&mut g, xv, Mode::Eval, &mut rng(0)).err().unwrap();
    assert!(matches!(e, Error::Indivisible { multiple: 16, .. }));
    assert!(e.to_string().contains("16"));
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_uses_dropout() {
    let mut cfg = small_cfg();
    cfg.dropout = 0.5;
    let m = Model::new(cfg, 0).unwrap();
    let x = Tensor::uniform(&[1, 5, 16, 32], -1.0, 1.0, &mut rng(15));
    assert_eq!(m.predict_logits(&x).unwrap(), m.predict_logits(&x).unwrap());
    let train = |seed| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = m.forward(&mut g, xv, Mode::Train, &mut rng(seed)).unwrap();
        g.value(out.logits).clone()
    };
    assert_ne!(train(1), train(2));
    assert_eq!(train(3), train(3));
}

#[test]
fn ablation_switches_change_structure() {
    let mut cfg = small_cfg();
    let full = Model::new(cfg.clone(), 0).unwrap();
    cfg.use_icm = false;
    cfg.use_cam = false;
    cfg.use_mcspn = false;
    let bare = Model::new(cfg, 0).unwrap();
    assert!(bare.params.trainable_count() < full.params.trainable_count());
    assert!(full.params.find("icm.stem.weight").is_some());
    assert!(full.params.find("head.affinity.weight").is_some());
    assert!(bare.params.find("enc1.cam.squeeze.weight").is_none());
    let x = Tensor::uniform(&[1, 5, 16, 16], -1.0, 1.0, &mut rng(16));
    assert_eq!(bare.predict_logits(&x).unwrap().shape(), &[1, 4, 16, 16]);
}

#[test]
fn zero_cam_gate_silences_stage() {
    let m = Model::new(small_cfg(), 0).unwrap();
    let mut m2 = m.clone();
    let bias = m.net.encoder[2].cam.as_ref().unwrap().excite.bias.unwrap();
    m2.params.value_mut(bias).data_mut().fill(-800.0);
    let x = Tensor::uniform(&[1, 5, 16, 16], -1.0, 1.0, &mut rng(17));
    let mut g = Graph::new();
    let xv = g.input(x);
    let out = m2.forward(&mut g, xv, Mode::Eval, &mut rng(0)).unwrap();
    assert!(g.value(out.encoder_features[2]).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_running_stats_follow_momentum() {
    let mut m = Model::new(small_cfg(), 0).unwrap();
    let x = Tensor::uniform(&[2, 5, 16, 16], -1.0, 1.0, &mut rng(18));
    let mut g = Graph::new();
    let xv = g.input(x);
    let out = m.forward(&mut g, xv, Mode::Train, &mut rng(0)).unwrap();
    let (mean_id, var_id, stats) = out.bn_updates[0].clone();
    m.apply_bn_updates(&out.bn_updates);
    for c in 0..stats.mean.len() {
        assert!((m.params.value(mean_id).data()[c] - 0.1 * stats.mean[c]).abs() < 1e-15);
        assert!((m.params.value(var_id).data()[c] - (0.9 + 0.1 * stats.var[c])).abs() < 1e-15);
    }
}

#[test]
fn full_model_gradient_check() {
    let mut m = Model::new(small_cfg(), 21).unwrap();
    let x = Tensor::uniform(&[2, 5, 32, 32], -1.0, 1.0, &mut rng(19));
    let proj = Tensor::uniform(&[2, 4, 32, 32], -1.0, 1.0, &mut rng(20));
    let net = m.clone();
    let store = &mut m.params;
    let loss = |s: &ParamStore| {
        let mut model = net.clone();
        model.params = s.clone();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = model.forward(&mut g, xv, Mode::Train, &mut rng(0)).unwrap();
        let p = g.input(proj.clone());
        let y = g.mul(out.logits, p).unwrap();
        let l = g.mean(y);
        (g, l)
    };
    // Leaky-ReLU kinks are dense at this size; a small step keeps the
    // number of activations crossing zero negligible.
    let (err, n) = param_check(store, 240, 3e-8, loss);
    assert!(n >= 200);
    assert!(err <= 1e-4, "{err:e}");
}
