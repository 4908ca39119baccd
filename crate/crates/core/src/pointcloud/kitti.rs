// SPDX-License-Identifier: Apache-2.0

//! KITTI velodyne scans (`.bin`, little-endian f32 x, y, z, rem per point)
//! and SemanticKITTI labels (`.label`, little-endian u32 per point).

use std::fs;
use std::path::Path;

use super::{ClassId, ClassMap, LabelArray, Point, PointCloud};
use crate::error::{Error, Result};

/// A decoded scan plus the file indices of points that were rejected
/// (non-finite or at the origin).
#[derive(Clone, Debug)]
pub struct LoadedScan {
    pub cloud: PointCloud,
    /// Strictly increasing file indices absent from `cloud`.
    pub dropped: Vec<usize>,
    /// Number of records in the file.
    pub records: usize,
}

impl LoadedScan {
    /// Pairs per-record labels with the kept points.
    pub fn attach_labels(&self, labels: &LabelArray) -> Result<LabelArray> {
        if labels.len() != self.records {
            return Err(Error::LabelMismatch {
                labels: labels.len(),
                points: self.records,
            });
        }
        let mut kept = Vec::with_capacity(self.cloud.len());
        let mut drop = self.dropped.iter().peekable();
        for (i, &l) in labels.labels().iter().enumerate() {
            if drop.peek() == Some(&&i) {
                drop.next();
                continue;
            }
            kept.push(l);
        }
        LabelArray::new(kept, labels.class_count())
    }
}

fn read_framed(path: &Path, record: usize, kind: &'static str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::EmptyScan(path.to_path_buf()));
    }
    if bytes.len() % record != 0 {
        return Err(Error::Framing {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: record as u64,
            kind,
        });
    }
    Ok(bytes)
}

pub fn load_kitti_scan(path: &Path) -> Result<LoadedScan> {
    let bytes = read_framed(path, 16, "scan")?;
    let records = bytes.len() / 16;
    let mut points = Vec::with_capacity(records);
    let mut dropped = Vec::new();
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        let p = Point::new(f(0), f(1), f(2), f(3));
        if p.is_usable() {
            points.push(p);
        } else {
            dropped.push(i);
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyScan(path.to_path_buf()));
    }
    Ok(LoadedScan {
        cloud: PointCloud { points },
        dropped,
        records,
    })
}

pub fn write_kitti_scan(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        for v in [p.x, p.y, p.z, p.rem] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads one label word per record and maps it through `class_map`.
pub fn load_kitti_labels(path: &Path, class_map: &ClassMap) -> Result<LabelArray> {
    let bytes = read_framed(path, 4, "label")?;
    let labels = bytes
        .chunks_exact(4)
        .map(|c| class_map.map_raw(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    LabelArray::new(labels, class_map.class_count())
}

/// Writes training ids as raw label words (instance half zero).
pub fn write_kitti_labels(path: &Path, labels: &[ClassId]) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
