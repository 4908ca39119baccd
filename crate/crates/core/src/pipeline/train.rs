// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{augment, prepare, Dataset, Sample};
use super::eval::evaluate;
use super::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{class_weights, LossBreakdown, LossSpec};
use crate::model::{stack_batch, Mode, Model, ModelConfig};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, Tensor};

/// Learning rate in effect during `epoch` (0-based).
pub fn sgd_lr(lr: f64, decay: f64, epoch: usize) -> f64 {
    lr * (1.0 - decay).powi(epoch as i32)
}

/// SGD with heavy-ball momentum over a model's trainable parameters.
pub struct Trainer {
    pub model: Model,
    pub spec: LossSpec,
    momentum: f64,
    velocity: Vec<Option<Tensor>>,
    seed: u64,
    steps: usize,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, spec: LossSpec, momentum: f64, seed: u64) -> Self {
        let velocity = vec![None; model.params.len()];
        Trainer {
            model,
            spec,
            momentum,
            velocity,
            seed,
            steps: 0,
            epoch: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// One forward/backward pass over `batch` and a parameter update.
    pub fn step(&mut self, batch: &[&Sample], lr: f64) -> Result<LossBreakdown> {
        let inputs: Vec<Tensor> = batch.iter().map(|s| s.input.clone()).collect();
        let x = stack_batch(&inputs)?;
        let target: Vec<_> = batch.iter().flat_map(|s| s.target.iter().copied()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.steps as u64 + 1);
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = self.model.forward(&mut g, xv, Mode::Train, &mut rng)?;
        let terms = g.total_loss(out.logits, &target, &self.model.params, &self.spec)?;
        let losses = terms.breakdown(&g);
        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                step: self.steps,
                detail: format!("{losses:?}"),
            });
        }
        g.backward(terms.total)?;
        let store = &mut self.model.params;
        store.zero_grads();
        g.accumulate_into(store);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let grad = store.grad(id).clone();
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
                *vi = self.momentum * *vi + gi;
            }
            let v = v.clone();
            for (w, vi) in store.value_mut(id).data_mut().iter_mut().zip(v.data()) {
                *w -= lr * vi;
            }
        }
        self.model.apply_bn_updates(&out.bn_updates);
        self.steps += 1;
        Ok(losses)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValSummary {
    pub miou: f64,
    pub miou_knn: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean of the per-step losses.
    pub loss: LossBreakdown,
    pub val: Option<ValSummary>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Model after the epoch with the best validation mIoU (lowest training
    /// loss without a validation set).
    pub best: Model,
    pub best_epoch: usize,
    pub logs: Vec<EpochLog>,
}

/// Trains from scratch on `data.train`. With `cfg.output` set, writes
/// `metrics.jsonl` (one line per epoch) and `best.ckpt` there.
pub fn train(cfg: &RunConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(Error::EmptyDataset("training list".into()));
    }
    let ignore = data.ignore;
    let k = cfg.model.class_count;
    let mut counts = vec![0u64; k];
    for f in &data.train {
        let (s, _) = prepare(f, &cfg.projection, &cfg.model, ignore)?;
        for &t in &s.target {
            counts[t as usize] += 1;
        }
    }
    let spec = LossSpec {
        weights: cfg.loss,
        class_weights: class_weights(&counts, ignore),
        ignore,
        boundary: cfg.boundary,
    };
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, spec, cfg.optimizer.momentum, cfg.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(u64::MAX);
    let mut log_file = match &cfg.output {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut logs = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.optimizer.epochs {
        trainer.set_epoch(epoch);
        let lr = sgd_lr(cfg.optimizer.lr, cfg.optimizer.decay, epoch);
        order.shuffle(&mut data_rng);
        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        for chunk in order.chunks(cfg.optimizer.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| {
                    let f = augment(&data.train[i], &cfg.augment, &mut data_rng)?;
                    Ok(prepare(&f, &cfg.projection, &cfg.model, ignore)?.0)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let l = trainer.step(&refs, lr)?;
            sum.wce += l.wce;
            sum.lovasz += l.lovasz;
            sum.boundary += l.boundary;
            sum.reg += l.reg;
            sum.total += l.total;
            steps += 1;
        }
        let n = steps as f64;
        let loss = LossBreakdown {
            wce: sum.wce / n,
            lovasz: sum.lovasz / n,
            boundary: sum.boundary / n,
            reg: sum.reg / n,
            total: sum.total / n,
        };
        let val = if data.val.is_empty() {
            None
        } else {
            let r = evaluate(&trainer.model, &data.val, &cfg.projection, &cfg.knn, ignore, &data.class_names)?;
            Some(ValSummary {
                miou: r.miou,
                miou_knn: r.miou_knn,
            })
        };
        let score = val.map_or(-loss.total, |v| v.miou);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, trainer.model.clone()));
            if let Some(dir) = &cfg.output {
                save_model(&dir.join("best.ckpt"), &trainer.model, epoch)?;
            }
        }
        let entry = EpochLog {
            epoch,
            lr,
            steps,
            loss,
            val,
        };
        if let Some((f, p)) = &mut log_file {
            let line = serde_json::to_string(&entry)?;
            writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        on_epoch(&entry);
        logs.push(entry);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model: trainer.model,
        best,
        best_epoch,
        logs,
    })
}

pub fn save_model(path: &Path, model: &Model, epoch: usize) -> Result<()> {
    let meta = serde_json::json!({ "model": model.config, "epoch": epoch });
    save_checkpoint(path, &model.params, meta)
}

/// Rebuilds a model from a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<Model> {
    let ckpt = load_checkpoint(path)?;
    let cfg: ModelConfig = serde_json::from_value(
        ckpt.meta
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{} has no model configuration", path.display())))?,
    )?;
    let mut model = Model::new(cfg, 0)?;
    ckpt.apply_to(&mut model.params)?;
    Ok(model)
}
