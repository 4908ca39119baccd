// SPDX-License-Identifier: Apache-2.0

//! Parameterised building blocks shared by the network modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{BatchNormStats, ConvSpec, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State threaded through one forward pass.
pub struct Fwd<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
    pub slope: f64,
    /// Batch statistics of every training-mode normalisation, keyed by the
    /// running-mean and running-variance buffers they update.
    pub bn_updates: Vec<(ParamId, ParamId, BatchNormStats)>,
}

impl Fwd<'_> {
    pub fn param(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn lrelu(&mut self, x: Var) -> Var {
        self.g.leaky_relu(x, self.slope)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match self.mode {
            Mode::Train => self.g.dropout(x, p, self.rng),
            Mode::Eval => Ok(x),
        }
    }
}

/// Builds parameters with deterministic initialisation and hierarchical
/// names.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub slope: f64,
    prefix: Vec<String>,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, slope: f64) -> Self {
        Builder {
            store,
            rng,
            slope,
            prefix: Vec::new(),
        }
    }

    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn add(&mut self, leaf: &str, kind: ParamKind, value: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, kind, value)
    }

    /// Kaiming-uniform weights for a leaky-ReLU network.
    pub fn conv_weight(&mut self, spec: &ConvSpec) -> ParamId {
        let shape = spec.weight_shape();
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let gain = (2.0 / (1.0 + self.slope * self.slope)).sqrt();
        let bound = gain * (3.0 / fan_in).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let t = Tensor::new(&shape, data).expect("weight shape");
        self.add("weight", ParamKind::ConvWeight, t)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, c: usize) -> Self {
        b.scope("bn", |b| BatchNorm {
            gamma: b.add("gamma", ParamKind::NormScale, Tensor::ones(&[c])),
            beta: b.add("beta", ParamKind::NormShift, Tensor::zeros(&[c])),
            running_mean: b.add("running_mean", ParamKind::Buffer, Tensor::zeros(&[c])),
            running_var: b.add("running_var", ParamKind::Buffer, Tensor::ones(&[c])),
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        match f.mode {
            Mode::Train => {
                let (y, stats) = f.g.batch_norm_train(x, gamma, beta)?;
                f.bn_updates.push((self.running_mean, self.running_var, stats));
                Ok(y)
            }
            Mode::Eval => f.g.batch_norm_eval(
                x,
                gamma,
                beta,
                f.store.value(self.running_mean),
                f.store.value(self.running_var),
            ),
        }
    }
}

/// Convolution, optionally followed by batch norm and leaky ReLU. Convs
/// feeding a batch norm carry no bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvUnit {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub bn: Option<BatchNorm>,
    pub act: bool,
}

impl ConvUnit {
    /// conv → BN → leaky ReLU.
    pub fn cba(b: &mut Builder, name: &str, spec: ConvSpec) -> Self {
        Self::build(b, name, spec, true, true)
    }

    /// conv → BN.
    pub fn cb(b: &mut Builder, name: &str, spec: ConvSpec) -> Self {
        Self::build(b, name, spec, true, false)
    }

    /// conv + bias.
    pub fn plain(b: &mut Builder, name: &str, spec: ConvSpec) -> Self {
        Self::build(b, name, spec, false, false)
    }

    fn build(b: &mut Builder, name: &str, spec: ConvSpec, bn: bool, act: bool) -> Self {
        b.scope(name, |b| {
            let weight = b.conv_weight(&spec);
            let bias = (!bn).then(|| b.add("bias", ParamKind::Bias, Tensor::zeros(&[spec.out_channels])));
            let bn = bn.then(|| BatchNorm::new(b, spec.out_channels));
            ConvUnit {
                spec,
                weight,
                bias,
                bn,
                act,
            }
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|id| f.param(id));
        let mut y = f.g.conv2d(x, w, b, &self.spec)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(f, y)?;
        }
        if self.act {
            y = f.lrelu(y);
        }
        Ok(y)
    }
}
