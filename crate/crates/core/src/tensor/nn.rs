// SPDX-License-Identifier: Apache-2.0

//! Layer operators over NCHW tensors.

use rand::Rng;

use super::{Backward, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Window geometry shared by the pooling operators. Windows are clipped at
/// the border, so max pooling behaves like edge replication and average
/// pooling divides by the number of in-bounds cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolSpec {
    /// Stride-1 window of odd size `kernel` centred on each pixel.
    pub fn same(kernel: usize) -> Self {
        PoolSpec {
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    /// Non-overlapping `factor`×`factor` downsampling.
    pub fn down(factor: usize) -> Self {
        PoolSpec {
            kernel: factor,
            stride: factor,
            pad: 0,
        }
    }

    fn out_size(&self, n: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 || n + 2 * self.pad < self.kernel {
            return Err(Error::shape(
                "pool2d",
                format!("extent {n} incompatible with {self:?}"),
            ));
        }
        Ok((n + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    /// In-bounds source range for output index `o`.
    fn window(&self, o: usize, n: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let end = start + self.kernel as isize;
        (start.max(0) as usize, (end.min(n as isize)) as usize)
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, for running-average updates.
    pub var: Vec<f64>,
}

struct BatchNormTrainBackward {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for BatchNormTrainBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4().expect("nchw");
        let gamma = inputs[1].data();
        let hw = h * w;
        let m = (n * hw) as f64;
        let gd = g.data();
        let mut dx = vec![0.0; gd.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let (mut sg, mut sgx) = (0.0, 0.0);
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    sg += gd[i];
                    sgx += gd[i] * self.xhat[i];
                }
            }
            dbeta[ch] = sg;
            dgamma[ch] = sgx;
            let k = gamma[ch] * self.inv_std[ch] / m;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    dx[i] = k * (m * gd[i] - sg - self.xhat[i] * sgx);
                }
            }
        }
        vec![
            Some(Tensor::new(inputs[0].shape(), dx).expect("shape")),
            Some(Tensor::new(&[c], dgamma).expect("shape")),
            Some(Tensor::new(&[c], dbeta).expect("shape")),
        ]
    }
}

struct BatchNormEvalBackward {
    inv_std: Vec<f64>,
    mean: Vec<f64>,
}

impl Backward for BatchNormEvalBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4().expect("nchw");
        let x = inputs[0].data();
        let gamma = inputs[1].data();
        let hw = h * w;
        let gd = g.data();
        let mut dx = vec![0.0; gd.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xhat = (x[i] - self.mean[ch]) * self.inv_std[ch];
                    dgamma[ch] += gd[i] * xhat;
                    dbeta[ch] += gd[i];
                    dx[i] = gd[i] * gamma[ch] * self.inv_std[ch];
                }
            }
        }
        vec![
            Some(Tensor::new(inputs[0].shape(), dx).expect("shape")),
            Some(Tensor::new(&[c], dgamma).expect("shape")),
            Some(Tensor::new(&[c], dbeta).expect("shape")),
        ]
    }
}

struct AvgPoolBackward {
    spec: PoolSpec,
}

impl Backward for AvgPoolBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], out: &Tensor) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4().expect("nchw");
        let (_, _, ho, wo) = out.dims4().expect("nchw");
        let gd = g.data();
        let mut dx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            let src = &mut dx[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                let (y0, y1) = self.spec.window(oy, h);
                for ox in 0..wo {
                    let (x0, x1) = self.spec.window(ox, w);
                    let gv = gd[(plane * ho + oy) * wo + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            src[y * w + x] += gv;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].shape(), dx).expect("shape"))]
    }
}

struct IndexRouteBackward {
    /// For each output element, the flat input index it was taken from.
    index: Vec<usize>,
}

impl Backward for IndexRouteBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let mut dx = vec![0.0; inputs[0].len()];
        for (&src, &gv) in self.index.iter().zip(g.data()) {
            dx[src] += gv;
        }
        vec![Some(Tensor::new(inputs[0].shape(), dx).expect("shape"))]
    }
}

struct MaskBackward {
    mask: Vec<f64>,
}

impl Backward for MaskBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let dx = g.data().iter().zip(&self.mask).map(|(g, m)| g * m).collect();
        vec![Some(Tensor::new(inputs[0].shape(), dx).expect("shape"))]
    }
}

struct SoftmaxBackward;

impl Backward for SoftmaxBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], out: &Tensor) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = out.dims4().expect("nchw");
        let hw = h * w;
        let (y, gd) = (out.data(), g.data());
        let mut dx = vec![0.0; y.len()];
        for b in 0..n {
            for p in 0..hw {
                let idx = |ch: usize| (b * c + ch) * hw + p;
                let dot: f64 = (0..c).map(|ch| gd[idx(ch)] * y[idx(ch)]).sum();
                for ch in 0..c {
                    dx[idx(ch)] = y[idx(ch)] * (gd[idx(ch)] - dot);
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].shape(), dx).expect("shape"))]
    }
}

struct ConcatBackward {
    channels: Vec<usize>,
}

impl Backward for ConcatBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let (n, ctot, h, w) = g.dims4().expect("nchw");
        let hw = h * w;
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (input, &c) in inputs.iter().zip(&self.channels) {
            let mut d = Vec::with_capacity(n * c * hw);
            for b in 0..n {
                let start = (b * ctot + offset) * hw;
                d.extend_from_slice(&g.data()[start..start + c * hw]);
            }
            grads.push(Some(Tensor::new(input.shape(), d).expect("shape")));
            offset += c;
        }
        grads
    }
}

struct SliceBackward {
    start: usize,
}

impl Backward for SliceBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4().expect("nchw");
        let (_, len, _, _) = g.dims4().expect("nchw");
        let hw = h * w;
        let mut dx = vec![0.0; n * c * hw];
        for b in 0..n {
            let dst = (b * c + self.start) * hw;
            let src = b * len * hw;
            dx[dst..dst + len * hw].copy_from_slice(&g.data()[src..src + len * hw]);
        }
        vec![Some(Tensor::new(inputs[0].shape(), dx).expect("shape"))]
    }
}

/// Channel-wise softmax of an NCHW tensor, stabilised by max subtraction.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (b * c + ch) * hw + p;
            let max = (0..c).map(|ch| xd[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ch in 0..c {
                let e = (xd[idx(ch)] - max).exp();
                out[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out[idx(ch)] /= z;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Max pooling without a graph; returns values and source indices.
pub(crate) fn max_pool_raw(x: &Tensor, spec: PoolSpec) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (spec.out_size(h)?, spec.out_size(w)?);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut index = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            let (y0, y1) = spec.window(oy, h);
            for ox in 0..wo {
                let (x0, x1) = spec.window(ox, w);
                let mut best = base + y0 * w + x0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let i = base + y * w + xx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                out.push(xd[best]);
                index.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, index))
}

impl Graph {
    /// Training-mode batch norm: normalises with batch statistics and returns
    /// them so the caller can update running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchNormStats)> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        check_channel_vec(self.value(gamma), c, "batch_norm gamma")?;
        check_channel_vec(self.value(beta), c, "batch_norm beta")?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = xt.data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                s += xd[base..base + hw].iter().sum::<f64>();
            }
            let mu = s / m;
            let mut v = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                v += xd[base..base + hw].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = v / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let shape = xt.shape().to_vec();
        let unbiased = if m > 1.0 {
            var.iter().map(|v| v * m / (m - 1.0)).collect()
        } else {
            var.clone()
        };
        let v = self.push(
            Tensor::new(&shape, out)?,
            &[x, gamma, beta],
            Box::new(BatchNormTrainBackward { xhat, inv_std }),
        );
        Ok((v, BatchNormStats { mean, var: unbiased }))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        check_channel_vec(self.value(gamma), c, "batch_norm gamma")?;
        check_channel_vec(self.value(beta), c, "batch_norm beta")?;
        check_channel_vec(running_mean, c, "batch_norm running mean")?;
        check_channel_vec(running_var, c, "batch_norm running var")?;
        let hw = h * w;
        let mean = running_mean.data().to_vec();
        let inv_std: Vec<f64> = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let xd = xt.data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = gd[ch] * (xd[i] - mean[ch]) * inv_std[ch] + bd[ch];
                }
            }
        }
        let shape = xt.shape().to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            &[x, gamma, beta],
            Box::new(BatchNormEvalBackward { inv_std, mean }),
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        let (ho, wo) = (spec.out_size(h)?, spec.out_size(w)?);
        let xd = xt.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                let (y0, y1) = spec.window(oy, h);
                for ox in 0..wo {
                    let (x0, x1) = spec.window(ox, w);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += src[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[n, c, ho, wo], out)?,
            &[x],
            Box::new(AvgPoolBackward { spec }),
        ))
    }

    /// Max pooling; ties resolve to the first cell in scan order.
    pub fn max_pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (out, index) = max_pool_raw(self.value(x), spec)?;
        Ok(self.push(out, &[x], Box::new(IndexRouteBackward { index })))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        if factor == 0 {
            return Err(Error::shape("upsample_nearest", "factor must be >= 1"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut index = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = plane * h * w + (oy / factor) * w + ox / factor;
                    out.push(xt.data()[i]);
                    index.push(i);
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[n, c, ho, wo], out)?,
            &[x],
            Box::new(IndexRouteBackward { index }),
        ))
    }

    /// Inverted dropout: keeps each element with probability `1 − p` and
    /// rescales survivors by `1/(1 − p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xt = self.value(x);
        let out: Vec<f64> = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xt.shape(), out)?;
        Ok(self.push(out, &[x], Box::new(MaskBackward { mask })))
    }

    /// Multiplies by a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape() != mask.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", xt.shape(), mask.shape()),
            ));
        }
        let out: Vec<f64> = xt.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xt.shape(), out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(MaskBackward {
                mask: mask.data().to_vec(),
            }),
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_channels(self.value(x))?;
        Ok(self.push(out, &[x], Box::new(SoftmaxBackward)))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let (n, _, h, w) = self.value(xs[0]).dims4()?;
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "inputs disagree: {:?} vs {:?}",
                        self.value(xs[0]).shape(),
                        self.value(v).shape()
                    ),
                ));
            }
            channels.push(vc);
        }
        let ctot: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for (&v, &c) in xs.iter().zip(&channels) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[b * c * hw..(b + 1) * c * hw]);
            }
        }
        Ok(self.push(
            Tensor::new(&[n, ctot, h, w], out)?,
            xs,
            Box::new(ConcatBackward { channels }),
        ))
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("[{start}, {}) out of {c} channels", start + len),
            ));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let s = (b * c + start) * hw;
            out.extend_from_slice(&xt.data()[s..s + len * hw]);
        }
        Ok(self.push(
            Tensor::new(&[n, len, h, w], out)?,
            &[x],
            Box::new(SliceBackward { start }),
        ))
    }
}

fn check_channel_vec(t: &Tensor, c: usize, what: &'static str) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::shape(
            what,
            format!("expected [{c}], got {:?}", t.shape()),
        ));
    }
    Ok(())
}
