// SPDX-License-Identifier: Apache-2.0

//! Training objectives: weighted cross entropy, Lovász-softmax, boundary F1
//! loss and their weighted combination with a weight-norm regulariser.
//!
//! Targets are flat `N·H·W` label slices in NCHW pixel order. Pixels whose
//! label equals the ignore id never contribute.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::ClassId;
use crate::tensor::{softmax_channels, Backward, Graph, ParamKind, ParamStore, PoolSpec, Tensor, Var};

/// Base coefficient of the weight-norm term.
pub const REG_BASE: f64 = 1e-4;

/// Frequency floor used by [`class_weights`].
pub const MIN_FREQUENCY: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.5,
            gamma: 1.0,
            lambda: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryParams {
    /// Odd pooling window.
    pub theta: usize,
    /// Pool class probabilities instead of thresholded masks.
    pub soft: bool,
}

impl Default for BoundaryParams {
    fn default() -> Self {
        BoundaryParams { theta: 3, soft: true }
    }
}

impl BoundaryParams {
    pub fn validate(&self) -> Result<()> {
        if self.theta < 3 || self.theta.is_multiple_of(2) {
            return Err(Error::Config(format!("boundary window {} must be odd and >= 3", self.theta)));
        }
        Ok(())
    }
}

/// `1/√max(f_c, 1e-3)` with `f_c` the share of non-ignored labels in class
/// `c`. The ignore class gets weight 0.
pub fn class_weights(counts: &[u64], ignore: ClassId) -> Vec<f64> {
    let total: u64 = counts
        .iter()
        .enumerate()
        .filter(|(c, _)| *c as ClassId != ignore)
        .map(|(_, n)| n)
        .sum();
    counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            if c as ClassId == ignore {
                0.0
            } else {
                let f = if total == 0 { 0.0 } else { n as f64 / total as f64 };
                1.0 / f.max(MIN_FREQUENCY).sqrt()
            }
        })
        .collect()
}

fn check_target(op: &'static str, shape: &[usize], target: &[ClassId]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(op, format!("expected NCHW scores, got {shape:?}")));
    }
    let (n, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if target.len() != n * hw {
        return Err(Error::shape(op, format!("{} labels for {} pixels", target.len(), n * hw)));
    }
    Ok((n, k, hw))
}

struct WceBackward {
    target: Vec<ClassId>,
    weights: Vec<f64>,
    ignore: ClassId,
    count: f64,
}

impl Backward for WceBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (n, k, h, w) = x.dims4().expect("nchw");
        let hw = h * w;
        let p = softmax_channels(x).expect("nchw");
        let scale = g.item() / self.count;
        let mut d = vec![0.0; x.len()];
        for b in 0..n {
            for i in 0..hw {
                let t = self.target[b * hw + i];
                if t == self.ignore {
                    continue;
                }
                let wt = self.weights[t as usize] * scale;
                for c in 0..k {
                    let idx = (b * k + c) * hw + i;
                    let onehot = if c as ClassId == t { 1.0 } else { 0.0 };
                    d[idx] = wt * (p.data()[idx] - onehot);
                }
            }
        }
        vec![Some(Tensor::new(x.shape(), d).expect("shape"))]
    }
}

struct LovaszBackward(Tensor);

impl Backward for LovaszBackward {
    fn backward(&self, g: &Tensor, _inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(self.0.map(|v| v * g.item()))]
    }
}

/// Mean of `1 − 2·tp/(Σŷ + Σy)` over the scored classes, where `ŷ` is the
/// predicted boundary and `y` the fixed ground-truth boundary.
struct F1Backward {
    gt: Tensor,
    scored: Vec<usize>,
}

impl Backward for F1Backward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let pb = inputs[0];
        let (n, k, h, w) = pb.dims4().expect("nchw");
        let hw = h * w;
        let mut d = vec![0.0; pb.len()];
        let m = self.scored.len() as f64;
        for &c in &self.scored {
            let (tp, sp, sy) = f1_sums(pb, &self.gt, c);
            let s = sp + sy;
            for b in 0..n {
                let base = (b * k + c) * hw;
                for i in base..base + hw {
                    // ∂(1 − 2tp/s)/∂ŷᵢ
                    d[i] = -g.item() / m * (2.0 * self.gt.data()[i] / s - 2.0 * tp / (s * s));
                }
            }
        }
        vec![Some(Tensor::new(pb.shape(), d).expect("shape"))]
    }
}

fn f1_sums(pb: &Tensor, gt: &Tensor, c: usize) -> (f64, f64, f64) {
    let (n, k, h, w) = pb.dims4().expect("nchw");
    let hw = h * w;
    let (mut tp, mut sp, mut sy) = (Neumaier::default(), Neumaier::default(), Neumaier::default());
    for b in 0..n {
        let base = (b * k + c) * hw;
        for i in base..base + hw {
            tp.add(pb.data()[i] * gt.data()[i]);
            sp.add(pb.data()[i]);
            sy.add(gt.data()[i]);
        }
    }
    (tp.value(), sp.value(), sy.value())
}

/// Compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// Lovász extension gradient of the Jaccard loss for ground-truth indicators
/// sorted by decreasing error.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&b| b).count() as f64;
    let mut inter = gts;
    let mut union = gts;
    let mut prev = 0.0;
    gt_sorted
        .iter()
        .map(|&fg| {
            if fg {
                inter -= 1.0;
            } else {
                union += 1.0;
            }
            let jac = 1.0 - inter / union;
            let d = jac - prev;
            prev = jac;
            d
        })
        .collect()
}

/// Binary one-hot masks `[N, K, H, W]`, zero at ignored pixels.
pub fn one_hot(target: &[ClassId], n: usize, k: usize, h: usize, w: usize, ignore: ClassId) -> Tensor {
    let hw = h * w;
    let mut d = vec![0.0; n * k * hw];
    for b in 0..n {
        for i in 0..hw {
            let t = target[b * hw + i];
            if t != ignore && (t as usize) < k {
                d[(b * k + t as usize) * hw + i] = 1.0;
            }
        }
    }
    Tensor::new(&[n, k, h, w], d).expect("shape")
}

/// `pool(1 − y, θ) − (1 − y)` per channel, on plain tensors.
pub fn boundary_map(y: &Tensor, theta: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.input(y.clone());
    let b = g.boundary_map(v, theta)?;
    Ok(g.value(b).clone())
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub wce: f64,
    pub lovasz: f64,
    pub boundary: f64,
    pub reg: f64,
    pub total: f64,
}

/// Vars of one [`Graph::total_loss`] call.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub wce: Var,
    pub lovasz: Var,
    pub boundary: Var,
    pub reg: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            wce: g.value(self.wce).item(),
            lovasz: g.value(self.lovasz).item(),
            boundary: g.value(self.boundary).item(),
            reg: g.value(self.reg).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Loss settings that stay fixed through training.
#[derive(Clone, Debug)]
pub struct LossSpec {
    pub weights: LossWeights,
    pub class_weights: Vec<f64>,
    pub ignore: ClassId,
    pub boundary: BoundaryParams,
}

impl Graph {
    /// Mean over non-ignored pixels of `−w_t · log softmax_t(logits)`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        target: &[ClassId],
        weights: &[f64],
        ignore: ClassId,
    ) -> Result<Var> {
        let x = self.value(logits);
        let (n, k, hw) = check_target("weighted_cross_entropy", x.shape(), target)?;
        if weights.len() != k {
            return Err(Error::shape("weighted_cross_entropy", format!("{} weights for {k} classes", weights.len())));
        }
        let d = x.data();
        let mut total = Neumaier::default();
        let mut count = 0usize;
        for b in 0..n {
            for i in 0..hw {
                let t = target[b * hw + i];
                if t == ignore {
                    continue;
                }
                if t as usize >= k {
                    return Err(Error::shape("weighted_cross_entropy", format!("label {t} >= {k} classes")));
                }
                let at = |c: usize| d[(b * k + c) * hw + i];
                let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..k).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
                total.add(weights[t as usize] * (lse - at(t as usize)));
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let out = Tensor::scalar(total.value() / count as f64);
        Ok(self.push(
            out,
            &[logits],
            Box::new(WceBackward {
                target: target.to_vec(),
                weights: weights.to_vec(),
                ignore,
                count: count as f64,
            }),
        ))
    }

    /// Lovász-softmax over the classes present in `target` (excluding the
    /// ignore class). Returns 0 when no class is present.
    pub fn lovasz_softmax(&mut self, probs: Var, target: &[ClassId], ignore: ClassId) -> Result<Var> {
        let p = self.value(probs);
        let (n, k, hw) = check_target("lovasz_softmax", p.shape(), target)?;
        let pixels: Vec<usize> = (0..n * hw).filter(|&j| target[j] != ignore).collect();
        let mut present: Vec<usize> = (0..k)
            .filter(|&c| c as ClassId != ignore && pixels.iter().any(|&j| target[j] == c as ClassId))
            .collect();
        present.dedup();
        let mut grad = vec![0.0; p.len()];
        let mut total = Neumaier::default();
        let m = present.len().max(1) as f64;
        for &c in &present {
            let idx = |j: usize| (j / hw * k + c) * hw + j % hw;
            let mut errs: Vec<(f64, bool, usize)> = pixels
                .iter()
                .map(|&j| {
                    let fg = target[j] == c as ClassId;
                    let pc = p.data()[idx(j)];
                    (if fg { 1.0 - pc } else { pc }, fg, j)
                })
                .collect();
            errs.sort_by(|a, b| b.0.total_cmp(&a.0));
            let fg: Vec<bool> = errs.iter().map(|e| e.1).collect();
            let lg = lovasz_grad(&fg);
            for ((e, is_fg, j), w) in errs.iter().zip(&lg) {
                total.add(e * w);
                grad[idx(*j)] += if *is_fg { -w } else { *w } / m;
            }
        }
        let out = Tensor::scalar(if present.is_empty() { 0.0 } else { total.value() / m });
        let grad = Tensor::new(p.shape(), grad)?;
        Ok(self.push(out, &[probs], Box::new(LovaszBackward(grad))))
    }

    /// `pool(1 − y, θ) − (1 − y)` with clipped (edge-replicating) windows.
    pub fn boundary_map(&mut self, y: Var, theta: usize) -> Result<Var> {
        BoundaryParams { theta, soft: true }.validate()?;
        let inv = self.one_minus(y);
        let pooled = self.max_pool2d(inv, PoolSpec::same(theta))?;
        self.sub(pooled, inv)
    }

    /// Boundary F1 complement averaged over classes whose ground-truth
    /// boundary is non-empty. Predicted masks are the class probabilities
    /// (soft) or the `> 0.5` indicator (hard), zeroed at ignored pixels.
    pub fn boundary_loss(
        &mut self,
        probs: Var,
        target: &[ClassId],
        ignore: ClassId,
        params: BoundaryParams,
    ) -> Result<Var> {
        params.validate()?;
        let shape = self.shape(probs).to_vec();
        let (n, k, hw) = check_target("boundary_loss", &shape, target)?;
        let (h, w) = (shape[2], shape[3]);
        let valid: Vec<f64> = (0..n * k * hw)
            .map(|idx| {
                let (b, i) = (idx / (k * hw), idx % hw);
                if target[b * hw + i] == ignore {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        let valid = Tensor::new(&shape, valid)?;
        let mask = if params.soft {
            self.mul_const(probs, &valid)?
        } else {
            let hard = self.value(probs).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
            let hard = self.input(hard);
            self.mul_const(hard, &valid)?
        };
        let pb = self.boundary_map(mask, params.theta)?;
        let gt = boundary_map(&one_hot(target, n, k, h, w, ignore), params.theta)?;
        let scored: Vec<usize> = (0..k)
            .filter(|&c| c as ClassId != ignore && f1_sums(&gt, &gt, c).2 > 0.0)
            .collect();
        let mut total = 0.0;
        for &c in &scored {
            let (tp, sp, sy) = f1_sums(self.value(pb), &gt, c);
            total += 1.0 - 2.0 * tp / (sp + sy);
        }
        let out = Tensor::scalar(if scored.is_empty() { 0.0 } else { total / scored.len() as f64 });
        Ok(self.push(out, &[pb], Box::new(F1Backward { gt, scored })))
    }

    /// `‖W‖₂` over every convolution kernel in `store`.
    pub fn conv_weight_norm(&mut self, store: &ParamStore) -> Result<Var> {
        let mut terms = Vec::new();
        for id in store.ids().filter(|&id| store.kind(id) == ParamKind::ConvWeight) {
            let p = self.param(store, id);
            let sq = self.square(p);
            terms.push((self.sum(sq), 1.0));
        }
        if terms.is_empty() {
            return Ok(self.input(Tensor::scalar(0.0)));
        }
        let s = self.weighted_sum(&terms)?;
        Ok(self.sqrt(s))
    }

    /// `α·wce + β·lovász + γ·boundary + λ·reg` with `reg = 1e-4·‖W‖₂`.
    pub fn total_loss(
        &mut self,
        logits: Var,
        target: &[ClassId],
        store: &ParamStore,
        spec: &LossSpec,
    ) -> Result<LossTerms> {
        spec.weights.validate()?;
        let wce = self.weighted_cross_entropy(logits, target, &spec.class_weights, spec.ignore)?;
        let probs = self.softmax(logits)?;
        let lovasz = self.lovasz_softmax(probs, target, spec.ignore)?;
        let boundary = self.boundary_loss(probs, target, spec.ignore, spec.boundary)?;
        let norm = self.conv_weight_norm(store)?;
        let reg = self.scale(norm, REG_BASE);
        let lw = spec.weights;
        let total = self.weighted_sum(&[
            (wce, lw.alpha),
            (lovasz, lw.beta),
            (boundary, lw.gamma),
            (reg, lw.lambda),
        ])?;
        Ok(LossTerms {
            wce,
            lovasz,
            boundary,
            reg,
            total,
        })
    }
}
