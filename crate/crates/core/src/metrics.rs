// SPDX-License-Identifier: Apache-2.0

//! Confusion matrix and intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::ClassId;

/// `counts[gt · K + pred]`. Ground-truth labels equal to the ignore id are
/// skipped; predictions of the ignore id are kept and count as misses of
/// the true class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore: Option<ClassId>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore: Option<ClassId>) -> Self {
        ConfusionMatrix {
            classes,
            ignore,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ignore(&self) -> Option<ClassId> {
        self.ignore
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, gt: &[ClassId], pred: &[ClassId]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} ground-truth vs {} predicted labels", gt.len(), pred.len()),
            ));
        }
        let k = self.classes;
        for (&g, &p) in gt.iter().zip(pred) {
            if Some(g) == self.ignore {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::shape("confusion", format!("label ({g}, {p}) outside {k} classes")));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes || other.ignore != self.ignore {
            return Err(Error::shape("confusion merge", "class layouts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU (`None` for unscored classes) and their mean. Classes
    /// with `TP + FP + FN = 0` and the ignore class are left out.
    pub fn miou(&self) -> Result<IouReport> {
        if self.total() == 0 {
            return Err(Error::EmptyConfusion);
        }
        let k = self.classes;
        let ratios: Vec<Option<(u64, u64)>> = (0..k)
            .map(|c| {
                if Some(c as ClassId) == self.ignore {
                    return None;
                }
                let tp = self.get(c, c);
                let fp: u64 = (0..k).filter(|&r| r != c).map(|r| self.get(r, c)).sum();
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then_some((tp, denom))
            })
            .collect();
        let miou = mean_of_ratios(ratios.iter().flatten().copied());
        let per_class = ratios
            .into_iter()
            .map(|r| r.map(|(tp, d)| tp as f64 / d as f64))
            .collect();
        Ok(IouReport { per_class, miou })
    }
}

/// Mean of `tp / d` ratios accumulated in double-double arithmetic, so the
/// result matches the exact rational mean to within rounding.
fn mean_of_ratios(ratios: impl Iterator<Item = (u64, u64)>) -> f64 {
    let (mut hi, mut lo, mut n) = (0.0f64, 0.0f64, 0u64);
    for (tp, d) in ratios {
        let (tp, d) = (tp as f64, d as f64);
        let q = tp / d;
        let r = (-q).mul_add(d, tp) / d;
        let s = hi + q;
        let bb = s - hi;
        let e = (hi - (s - bb)) + (q - bb);
        hi = s;
        lo += e + r;
        n += 1;
    }
    let n = n as f64;
    let m = hi / n;
    let rem = (-m).mul_add(n, hi) + lo;
    m + rem / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Convenience wrapper over a fresh matrix.
pub fn miou(gt: &[ClassId], pred: &[ClassId], classes: usize, ignore: Option<ClassId>) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(classes, ignore);
    cm.add(gt, pred)?;
    cm.miou()
}
