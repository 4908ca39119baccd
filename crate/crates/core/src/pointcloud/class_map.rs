// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::ClassId;
use crate::error::{Error, Result};

const SEMANTIC_KITTI: &str = include_str!("../../data/semantic_kitti.classmap");

/// Raw dataset label → contiguous training id.
///
/// Text format, one entry per line: `raw_id train_id name`. Blank lines and
/// `#` comments are skipped. An optional `ignore <train_id>` line names the
/// ignore class (default 0). Raw ids that are not listed map to it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    map: BTreeMap<u32, ClassId>,
    names: Vec<String>,
    ignore: ClassId,
}

impl ClassMap {
    /// The 19-class SemanticKITTI mapping plus the ignore class 0.
    pub fn semantic_kitti() -> Self {
        Self::parse(SEMANTIC_KITTI, "<builtin semantic_kitti>").expect("builtin class map parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::ClassMap {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut map = BTreeMap::new();
        let mut names: BTreeMap<ClassId, String> = BTreeMap::new();
        let mut ignore = 0;
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "ignore" {
                if fields.len() != 2 {
                    return Err(err(line_no, "expected `ignore <train_id>`".into()));
                }
                ignore = fields[1]
                    .parse()
                    .map_err(|_| err(line_no, format!("bad train id {:?}", fields[1])))?;
                continue;
            }
            if fields.len() < 2 {
                return Err(err(line_no, "expected `raw_id train_id name`".into()));
            }
            let raw: u32 = fields[0]
                .parse()
                .map_err(|_| err(line_no, format!("bad raw id {:?}", fields[0])))?;
            let train: ClassId = fields[1]
                .parse()
                .map_err(|_| err(line_no, format!("bad train id {:?}", fields[1])))?;
            if map.insert(raw, train).is_some() {
                return Err(err(line_no, format!("raw id {raw} listed twice")));
            }
            let name = fields.get(2..).map(|f| f.join(" ")).unwrap_or_default();
            names.entry(train).or_insert(name);
        }
        if map.is_empty() {
            return Err(err(0, "no entries".into()));
        }
        let class_count = names.keys().copied().max().unwrap_or(0).max(ignore) as usize + 1;
        let names = (0..class_count as ClassId)
            .map(|c| names.get(&c).cloned().unwrap_or_else(|| format!("class{c}")))
            .collect();
        Ok(ClassMap { map, names, ignore })
    }

    /// Identity-style map for datasets already labelled with training ids.
    pub fn identity(names: &[&str], ignore: ClassId) -> Self {
        ClassMap {
            map: (0..names.len() as u32).map(|i| (i, i)).collect(),
            names: names.iter().map(|s| s.to_string()).collect(),
            ignore,
        }
    }

    /// Maps a full 32-bit label word; the instance half is discarded.
    pub fn map_raw(&self, raw: u32) -> ClassId {
        let semantic = raw & 0xFFFF;
        self.map.get(&semantic).copied().unwrap_or(self.ignore)
    }

    pub fn ignore(&self) -> ClassId {
        self.ignore
    }

    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}
