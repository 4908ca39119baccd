// SPDX-License-Identifier: Apache-2.0

//! Run configuration, dataset assembly, training and evaluation.

mod data;
mod eval;
mod train;

pub use data::{augment, label_image, load_frames, prepare, Dataset, Frame, Sample};
pub use eval::{evaluate, EvalReport};
pub use train::{load_model, save_model, sgd_lr, train, EpochLog, TrainOutcome, Trainer, ValSummary};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::KnnParams;
use crate::losses::{BoundaryParams, LossWeights};
use crate::model::ModelConfig;
use crate::pointcloud::SyntheticSceneSpec;
use crate::projection::ProjectionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPair {
    pub scan: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated scenes. Training frame `i` uses seed `scene.rng_seed + i`;
    /// validation frames continue after the training seeds.
    Synthetic {
        scene: SyntheticSceneSpec,
        train_frames: usize,
        val_frames: usize,
    },
    /// KITTI-format scans with SemanticKITTI labels. Without a class map the
    /// standard 20-class mapping is used.
    Kitti {
        train: Vec<ScanPair>,
        #[serde(default)]
        val: Vec<ScanPair>,
        #[serde(default)]
        class_map: Option<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            scene: SyntheticSceneSpec::default(),
            train_frames: 200,
            val_frames: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// The learning rate is multiplied by `1 − decay` after every epoch.
    pub decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.01,
            decay: 0.01,
            momentum: 0.9,
            batch_size: 6,
            epochs: 20,
        }
    }
}

/// Point-space augmentation applied to training frames before projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Yaw drawn from U(−π, π).
    pub rotate: bool,
    /// Per-axis translation drawn from U(−t, t), metres.
    pub translate: f64,
    /// Probability of mirroring y.
    pub flip_y: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            rotate: true,
            translate: 0.5,
            flip_y: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub projection: ProjectionConfig,
    pub loss: LossWeights,
    pub boundary: BoundaryParams,
    pub knn: KnnParams,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Directory for checkpoints and logs.
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::toy(5),
            projection: ProjectionConfig::new(64, 512),
            loss: LossWeights::default(),
            boundary: BoundaryParams::default(),
            knn: KnnParams::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.projection.validate()?;
        self.loss.validate()?;
        self.boundary.validate()?;
        self.knn.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("optimizer.lr must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.decay) {
            return bad(format!("optimizer.decay must lie in [0, 1), got {}", o.decay));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad(format!("optimizer.momentum must lie in [0, 1), got {}", o.momentum));
        }
        if o.batch_size == 0 || o.epochs == 0 {
            return bad("optimizer.batch_size and optimizer.epochs must be >= 1".into());
        }
        let a = &self.augment;
        if !(a.translate >= 0.0 && a.translate.is_finite()) || !(0.0..=1.0).contains(&a.flip_y) {
            return bad("augment.translate must be >= 0 and augment.flip_y in [0, 1]".into());
        }
        match &self.data {
            DataConfig::Synthetic { scene, .. } => {
                scene.validate()?;
                if scene.class_count != self.model.class_count {
                    return Err(Error::ClassCount {
                        model: self.model.class_count,
                        data: scene.class_count,
                    });
                }
            }
            DataConfig::Kitti { train, val, class_map } => {
                let files = train
                    .iter()
                    .chain(val)
                    .flat_map(|p| [&p.scan, &p.labels])
                    .chain(class_map.iter());
                for f in files {
                    if !f.is_file() {
                        return bad(format!("file not found: {}", f.display()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses a JSON config. Missing fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Applies `(dotted.key, value)` overrides. Values are parsed as JSON
    /// and fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
            let mut node = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("override {key}: {} is not an object", parts[..i].join("."))))?;
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj
                    .entry(part.to_string())
                    .or_insert_with(|| serde_json::Value::Object(Default::default()));
            }
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }
}
