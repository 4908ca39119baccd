// SPDX-License-Identifier: Apache-2.0

//! Context module, attention gate, lite harmonic dense block and decoder
//! residual block.

use super::config::{KernelSpec, ModelConfig};
use super::layers::{Builder, ConvUnit, Fwd};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, PoolSpec, Var};
use crate::topology::{Rule, TopologyPlan};

/// Multi-scale context module: a pointwise stem feeds parallel dilated
/// branches whose concatenation is compressed and added to a projected
/// shortcut of the stem.
#[derive(Clone, Debug)]
pub struct Icm {
    pub stem: ConvUnit,
    pub branches: Vec<ConvUnit>,
    pub merge: ConvUnit,
    pub shortcut: ConvUnit,
}

impl Icm {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let [c0, c1, c2, c3] = [cfg.channels[0], cfg.channels[1], cfg.channels[2], cfg.channels[3]];
        b.scope("icm", |b| {
            let stem = ConvUnit::cba(b, "stem", ConvSpec::pointwise(c0, c1));
            let branches = cfg
                .icm_branches
                .iter()
                .enumerate()
                .map(|(i, k)| ConvUnit::cba(b, &format!("branch{i}"), ConvSpec::same(c1, c2, k.kernel, k.dilation)))
                .collect();
            let width = c2 * cfg.icm_branches.len();
            let merge = ConvUnit::cb(b, "merge", ConvSpec::pointwise(width, c3));
            let shortcut = ConvUnit::cb(b, "shortcut", ConvSpec::pointwise(c1, c3));
            Icm {
                stem,
                branches,
                merge,
                shortcut,
            }
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let c_in = f.g.shape(x).get(1).copied().unwrap_or(0);
        if c_in != self.stem.spec.in_channels {
            return Err(Error::shape(
                "icm",
                format!("expected {} input channels, got {c_in}", self.stem.spec.in_channels),
            ));
        }
        let s = self.stem.forward(f, x)?;
        let mut outs = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            outs.push(br.forward(f, s)?);
        }
        let cat = f.g.concat(&outs)?;
        let m = self.merge.forward(f, cat)?;
        let sc = self.shortcut.forward(f, s)?;
        let sum = f.g.add(m, sc)?;
        Ok(f.lrelu(sum))
    }
}

/// Attention gate: average-pooled context drives two pointwise convs whose
/// sigmoid output rescales the input.
#[derive(Clone, Debug)]
pub struct Cam {
    pub pool: usize,
    pub squeeze: ConvUnit,
    pub excite: ConvUnit,
}

impl Cam {
    pub fn new(b: &mut Builder, c: usize, pool: usize, reduction: usize) -> Self {
        let mid = (c / reduction).max(1);
        b.scope("cam", |b| Cam {
            pool,
            squeeze: ConvUnit::plain(b, "squeeze", ConvSpec::pointwise(c, mid)),
            excite: ConvUnit::plain(b, "excite", ConvSpec::pointwise(mid, c)),
        })
    }

    /// The sigmoid gate alone.
    pub fn gate(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let p = f.g.avg_pool2d(x, PoolSpec::same(self.pool))?;
        let s = self.squeeze.forward(f, p)?;
        let s = f.lrelu(s);
        let e = self.excite.forward(f, s)?;
        Ok(f.g.sigmoid(e))
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let gate = self.gate(f, x)?;
        f.g.mul(x, gate)
    }
}

/// Lite harmonic dense block followed by a pointwise compression to the
/// stage width. A depth-1 block is a single 3×3 convolution.
#[derive(Clone, Debug)]
pub struct LhdBlock {
    pub plan: TopologyPlan,
    pub layers: Vec<ConvUnit>,
    pub compress: Option<ConvUnit>,
}

/// Intermediate values of one block pass.
#[derive(Clone, Debug)]
pub struct LhdTrace {
    /// `inputs[i − 1]` is the concatenated input of layer `i`.
    pub inputs: Vec<Var>,
    /// `outputs[0]` is the block input; `outputs[i]` is layer `i`.
    pub outputs: Vec<Var>,
    pub output: Var,
}

impl LhdBlock {
    pub fn new(b: &mut Builder, c_in: usize, c_out: usize, depth: usize, growth: usize, multiplier: f64) -> Self {
        let mut plan = TopologyPlan::new(Rule::LiteHd, depth, growth, multiplier);
        if depth == 1 {
            plan.channels[0] = c_out;
        }
        b.scope("lhd", |b| {
            let layers = (1..=depth)
                .map(|i| {
                    let spec = ConvSpec::same(plan.input_width(i, c_in), plan.channels[i - 1], 3, 1);
                    ConvUnit::cba(b, &format!("layer{i}"), spec)
                })
                .collect();
            let compress =
                (depth > 1).then(|| ConvUnit::cba(b, "compress", ConvSpec::pointwise(plan.output_width(), c_out)));
            LhdBlock { plan, layers, compress }
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        Ok(self.forward_traced(f, x, None)?.output)
    }

    /// Runs the block, optionally replacing the output of one layer by zeros
    /// before any later layer reads it.
    pub fn forward_traced(&self, f: &mut Fwd, x: Var, zero_layer: Option<usize>) -> Result<LhdTrace> {
        let mut outputs = vec![x];
        let mut inputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in (1..).zip(&self.layers) {
            let preds: Vec<Var> = self.plan.preds(i).iter().map(|&p| outputs[p]).collect();
            let inp = f.g.concat(&preds)?;
            inputs.push(inp);
            let mut out = layer.forward(f, inp)?;
            if zero_layer == Some(i) {
                out = f.g.scale(out, 0.0);
            }
            outputs.push(out);
        }
        let output = match &self.compress {
            None => outputs[1],
            Some(c) => {
                let keep: Vec<Var> = self.plan.keep_layers().iter().map(|&i| outputs[i]).collect();
                let cat = f.g.concat(&keep)?;
                c.forward(f, cat)?
            }
        };
        Ok(LhdTrace {
            inputs,
            outputs,
            output,
        })
    }
}

/// Decoder stage: nearest upsampling and a 3×3 conv, skip fusion by
/// concatenation and a pointwise conv, then a residual ladder of convs.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub up: ConvUnit,
    pub fuse: ConvUnit,
    pub ladder: Vec<ConvUnit>,
}

impl ResBlock {
    pub fn new(b: &mut Builder, c_in: usize, c_skip: usize, c_out: usize, ladder: &[KernelSpec]) -> Self {
        b.scope("res", |b| ResBlock {
            up: ConvUnit::cba(b, "up", ConvSpec::same(c_in, c_out, 3, 1)),
            fuse: ConvUnit::cba(b, "fuse", ConvSpec::pointwise(c_out + c_skip, c_out)),
            ladder: ladder
                .iter()
                .enumerate()
                .map(|(i, k)| ConvUnit::cba(b, &format!("ladder{i}"), ConvSpec::same(c_out, c_out, k.kernel, k.dilation)))
                .collect(),
        })
    }

    /// Output after skip fusion, before the residual ladder.
    pub fn fused(&self, f: &mut Fwd, x: Var, skip: Var) -> Result<Var> {
        let u = f.g.upsample_nearest(x, 2)?;
        let (us, ss) = (f.g.shape(u).to_vec(), f.g.shape(skip).to_vec());
        if us.len() != 4 || ss.len() != 4 || us[0] != ss[0] || us[2..] != ss[2..] {
            return Err(Error::shape(
                "resblock",
                format!("upsampled input {us:?} does not match skip {ss:?}"),
            ));
        }
        let u = self.up.forward(f, u)?;
        let cat = f.g.concat(&[u, skip])?;
        self.fuse.forward(f, cat)
    }

    pub fn forward(&self, f: &mut Fwd, x: Var, skip: Var) -> Result<Var> {
        let fused = self.fused(f, x, skip)?;
        let mut h = fused;
        for conv in &self.ladder {
            h = conv.forward(f, h)?;
        }
        f.g.add(fused, h)
    }
}
