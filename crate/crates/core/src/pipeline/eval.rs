// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::data::{prepare, Frame};
use crate::error::{Error, Result};
use crate::knn::{refine_labels, KnnParams};
use crate::metrics::ConfusionMatrix;
use crate::model::Model;
use crate::pointcloud::ClassId;
use crate::projection::{unproject_labels, ProjectionConfig};

/// Point-level scores with and without neighbour refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub points: u64,
    pub class_names: Vec<String>,
    pub miou: f64,
    pub miou_knn: f64,
    pub per_class: Vec<Option<f64>>,
    pub per_class_knn: Vec<Option<f64>>,
}

/// Projects each frame, predicts, reads labels back onto the points and
/// scores them against the ground truth, once as-is and once after
/// [`refine_labels`].
pub fn evaluate(
    model: &Model,
    frames: &[Frame],
    proj: &ProjectionConfig,
    knn: &KnnParams,
    ignore: ClassId,
    class_names: &[String],
) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset("evaluation list".into()));
    }
    let k = model.class_count();
    let mut plain = ConfusionMatrix::new(k, Some(ignore));
    let mut refined = ConfusionMatrix::new(k, Some(ignore));
    for f in frames {
        let (sample, img) = prepare(f, proj, &model.config, ignore)?;
        let pred = model.predict_labels(&sample.input)?;
        let point_pred = unproject_labels(&pred, &img, &f.cloud, ignore, k)?;
        plain.add(f.labels.labels(), point_pred.labels())?;
        let knn_pred = refine_labels(&f.cloud, &img, &pred, knn, ignore, k)?;
        refined.add(f.labels.labels(), knn_pred.labels())?;
    }
    let a = plain.miou()?;
    let b = refined.miou()?;
    Ok(EvalReport {
        frames: frames.len(),
        points: plain.total(),
        class_names: class_names.to_vec(),
        miou: a.miou,
        miou_knn: b.miou,
        per_class: a.per_class,
        per_class_knn: b.per_class,
    })
}
