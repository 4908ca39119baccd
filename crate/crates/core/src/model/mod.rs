// SPDX-License-Identifier: Apache-2.0

//! The segmentation network: context module, five lite harmonic dense
//! encoder stages with attention gates, four residual decoder stages and a
//! propagation-refined classification head.

mod blocks;
mod config;
mod layers;

pub use blocks::{Cam, Icm, LhdBlock, LhdTrace, ResBlock};
pub use config::{EncoderStage, Fusion, KernelSpec, ModelConfig, INPUT_MEAN, INPUT_STD, FULL_CHANNELS};
pub use layers::{BatchNorm, Builder, ConvUnit, Fwd, Mode};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::projection::RangeImage;
use crate::tensor::{BatchNormStats, ConvSpec, Graph, ParamId, ParamStore, PoolSpec, Tensor, Var};

/// Spatial dims must be divisible by this (four 2× poolings).
pub const SPATIAL_MULTIPLE: usize = 16;

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub lhd: LhdBlock,
    pub cam: Option<Cam>,
}

#[derive(Clone, Debug)]
pub enum Stem {
    Icm(Icm),
    Conv(ConvUnit),
}

#[derive(Clone, Debug)]
pub enum Head {
    /// Pointwise projection to class scores, propagation refinement, then a
    /// final pointwise conv.
    Refined {
        guide: ConvUnit,
        affinity: ConvUnit,
        classify: ConvUnit,
    },
    Plain(ConvUnit),
}

#[derive(Clone, Debug)]
pub struct Net {
    pub stem: Stem,
    pub encoder: Vec<EncoderBlock>,
    pub bottleneck: ConvUnit,
    pub decoder: Vec<ResBlock>,
    pub head: Head,
}

/// Everything produced by one forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    pub bn_updates: Vec<(ParamId, ParamId, BatchNormStats)>,
    /// Encoder outputs before pooling, Enc1..Enc5.
    pub encoder_features: Vec<Var>,
    /// Decoder outputs Dec4..Dec1.
    pub decoder_features: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub net: Net,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = {
            let mut b = Builder::new(&mut params, &mut rng, config.leaky_slope);
            build_net(&mut b, &config)
        };
        Ok(Model { config, params, net })
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    /// Standardised `[1, 5, H, W]` network input for a range image.
    pub fn input_tensor(&self, img: &RangeImage) -> Tensor {
        img.to_input(&self.config.input_mean, &self.config.input_std)
    }

    /// Runs the network on an NCHW input. Returns pre-softmax logits of
    /// shape `[N, K, H, W]`.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<ForwardOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.channels[0] {
            return Err(Error::shape(
                "model",
                format!("expected [N, {}, H, W], got {shape:?}", self.config.channels[0]),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                multiple: SPATIAL_MULTIPLE,
            });
        }
        let mut f = Fwd {
            g,
            store: &self.params,
            mode,
            rng,
            slope: self.config.leaky_slope,
            bn_updates: Vec::new(),
        };
        let net = &self.net;
        let mut h = match &net.stem {
            Stem::Icm(icm) => icm.forward(&mut f, x)?,
            Stem::Conv(c) => c.forward(&mut f, x)?,
        };
        let mut skips = Vec::with_capacity(net.encoder.len());
        for (i, stage) in net.encoder.iter().enumerate() {
            h = stage.lhd.forward(&mut f, h)?;
            if let Some(cam) = &stage.cam {
                h = cam.forward(&mut f, h)?;
            }
            h = f.dropout(h, self.config.dropout)?;
            skips.push(h);
            if i + 1 < net.encoder.len() {
                h = f.g.avg_pool2d(h, PoolSpec::down(2))?;
            }
        }
        h = net.bottleneck.forward(&mut f, h)?;
        let mut decoder_features = Vec::with_capacity(net.decoder.len());
        for (dec, &skip) in net.decoder.iter().zip(skips[..4].iter().rev()) {
            h = dec.forward(&mut f, h, skip)?;
            decoder_features.push(h);
        }
        let logits = match &net.head {
            Head::Plain(c) => c.forward(&mut f, h)?,
            Head::Refined {
                guide,
                affinity,
                classify,
            } => {
                let x = guide.forward(&mut f, h)?;
                let a = affinity.forward(&mut f, h)?;
                let r = f.g.mcspn(x, a, self.config.mcspn_fusion, self.config.mcspn_sweeps)?;
                classify.forward(&mut f, r)?
            }
        };
        Ok(ForwardOutput {
            logits,
            bn_updates: f.bn_updates,
            encoder_features: skips,
            decoder_features,
        })
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[(ParamId, ParamId, BatchNormStats)]) {
        let m = self.config.bn_momentum;
        for (mean_id, var_id, stats) in updates {
            for (r, b) in self.params.value_mut(*mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.params.value_mut(*var_id).data_mut().iter_mut().zip(&stats.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Eval-mode logits for a batch of inputs.
    pub fn predict_logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, x, Mode::Eval, &mut rng)?;
        Ok(g.value(out.logits).clone())
    }

    /// Per-pixel argmax class for the first batch element, row-major.
    pub fn predict_labels(&self, input: &Tensor) -> Result<Vec<u32>> {
        Ok(argmax_channels(&self.predict_logits(input)?)?.remove(0))
    }
}

/// Argmax over channels per batch element; ties pick the lower class.
pub fn argmax_channels(t: &Tensor) -> Result<Vec<Vec<u32>>> {
    let (n, c, h, w) = t.dims4()?;
    let hw = h * w;
    let d = t.data();
    Ok((0..n)
        .map(|b| {
            (0..hw)
                .map(|i| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(b * c + k) * hw + i] > d[(b * c + best) * hw + i] {
                            best = k;
                        }
                    }
                    best as u32
                })
                .collect()
        })
        .collect())
}

/// Stacks `[1, C, H, W]` tensors into `[N, C, H, W]`.
pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::shape("stack_batch", "empty batch"))?;
    let (_, c, h, w) = first.dims4()?;
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape(
                "stack_batch",
                format!("{:?} vs {:?}", t.shape(), first.shape()),
            ));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[items.len(), c, h, w], data)
}

fn build_net(b: &mut Builder, cfg: &ModelConfig) -> Net {
    let ch = &cfg.channels;
    let k = cfg.class_count;
    let stem = if cfg.use_icm {
        Stem::Icm(Icm::new(b, cfg))
    } else {
        Stem::Conv(ConvUnit::cba(b, "stem", ConvSpec::same(ch[0], ch[3], 3, 1)))
    };
    let mut c_in = ch[3];
    let encoder = cfg
        .encoder
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let c_out = ch[4 + i];
            let block = b.scope(&format!("enc{}", i + 1), |b| EncoderBlock {
                lhd: LhdBlock::new(b, c_in, c_out, s.depth, s.growth, cfg.growth_multiplier),
                cam: cfg.use_cam.then(|| Cam::new(b, c_out, cfg.cam_pool, cfg.cam_reduction)),
            });
            c_in = c_out;
            block
        })
        .collect();
    let bottleneck = ConvUnit::cba(b, "bottleneck", ConvSpec::pointwise(ch[8], ch[9]));
    let mut c_in = ch[9];
    let decoder = (0..4)
        .map(|j| {
            let c_out = ch[10 + j];
            let c_skip = ch[7 - j];
            let blk = b.scope(&format!("dec{}", 4 - j), |b| {
                ResBlock::new(b, c_in, c_skip, c_out, &cfg.decoder_ladder)
            });
            c_in = c_out;
            blk
        })
        .collect();
    let head = b.scope("head", |b| {
        if cfg.use_mcspn {
            Head::Refined {
                guide: ConvUnit::plain(b, "guide", ConvSpec::pointwise(ch[13], k)),
                affinity: ConvUnit::plain(b, "affinity", ConvSpec::pointwise(ch[13], 12 * k)),
                classify: ConvUnit::plain(b, "classify", ConvSpec::pointwise(k, k)),
            }
        } else {
            Head::Plain(ConvUnit::plain(b, "classify", ConvSpec::pointwise(ch[13], k)))
        }
    });
    Net {
        stem,
        encoder,
        bottleneck,
        decoder,
        head,
    }
}
