// SPDX-License-Identifier: Apache-2.0

//! Layer connectivity of harmonic dense (HD) blocks and their pruned
//! lite variant (LHD).
//!
//! Layers are numbered `1..=L`; index `0` is the block input. Under the HD
//! rule layer `k` reads from every `k − 2ⁿ` with `2ⁿ | k`. Under the LHD rule
//! layer `i` reads from a local link `i − 2` (the block input for `i < 2`)
//! plus a long link `i − 5ᵏ + 1` for every `k ≥ 1` with `5ᵏ | i`. The long
//! links are the base-5 analogue of the HD divisibility pattern; without the
//! divisibility condition the connection total outgrows
//! `L + (1/5)·L·log L` as soon as `L = 7`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    #[serde(rename = "hd")]
    Hd,
    #[serde(rename = "lite_hd")]
    LiteHd,
}

impl std::str::FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "hd" => Ok(Rule::Hd),
            "litehd" | "lhd" => Ok(Rule::LiteHd),
            other => Err(format!("unknown rule {other:?} (expected hd or lite-hd)")),
        }
    }
}

/// `{k − 2ⁿ : n ≥ 0, 2ⁿ | k}`.
pub fn hd_predecessors(k: usize) -> BTreeSet<usize> {
    assert!(k >= 1, "layer index starts at 1");
    let mut out = BTreeSet::new();
    let mut step = 1;
    while step <= k {
        if k.is_multiple_of(step) {
            out.insert(k - step);
        }
        step *= 2;
    }
    out
}

/// Local link plus base-5 long links.
pub fn lhd_predecessors(i: usize) -> BTreeSet<usize> {
    assert!(i >= 1, "layer index starts at 1");
    let mut out = BTreeSet::new();
    out.insert(i.saturating_sub(2));
    let mut p = 5;
    while p <= i {
        if i.is_multiple_of(p) {
            out.insert(i + 1 - p);
        }
        p *= 5;
    }
    out
}

pub fn predecessors(i: usize, rule: Rule) -> BTreeSet<usize> {
    match rule {
        Rule::Hd => hd_predecessors(i),
        Rule::LiteHd => lhd_predecessors(i),
    }
}

/// Largest exponent `e` with `base^e | i`.
fn divisibility_depth(i: usize, base: usize) -> u32 {
    let mut e = 0;
    let mut p = base;
    while p <= i && i.is_multiple_of(p) {
        e += 1;
        p *= base;
    }
    e
}

/// Output width of layer `i`: `g · m^w(i)` rounded to the nearest even
/// integer (at least 2), where `w(i)` is the deepest long link arriving at
/// `i` (powers of 5 under LHD, powers of 2 under HD).
pub fn layer_channels(i: usize, growth: usize, multiplier: f64, rule: Rule) -> usize {
    let w = match rule {
        Rule::LiteHd => divisibility_depth(i, 5),
        Rule::Hd => divisibility_depth(i, 2),
    };
    let raw = growth as f64 * multiplier.powi(w as i32);
    (((raw / 2.0).round() as usize) * 2).max(2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyPlan {
    pub rule: Rule,
    pub layers: usize,
    pub growth: usize,
    pub multiplier: f64,
    /// `predecessors[i − 1]` lists the inputs of layer `i`, ascending.
    pub predecessors: Vec<Vec<usize>>,
    /// `channels[i − 1]` is the output width of layer `i`.
    pub channels: Vec<usize>,
}

impl TopologyPlan {
    pub fn new(rule: Rule, layers: usize, growth: usize, multiplier: f64) -> Self {
        assert!(layers >= 1 && growth >= 1 && multiplier > 0.0);
        let predecessors = (1..=layers)
            .map(|i| predecessors(i, rule).into_iter().collect())
            .collect();
        let channels = (1..=layers)
            .map(|i| layer_channels(i, growth, multiplier, rule))
            .collect();
        TopologyPlan {
            rule,
            layers,
            growth,
            multiplier,
            predecessors,
            channels,
        }
    }

    pub fn preds(&self, i: usize) -> &[usize] {
        &self.predecessors[i - 1]
    }

    /// Input width of layer `i` given the block input width.
    pub fn input_width(&self, i: usize, block_in: usize) -> usize {
        self.preds(i)
            .iter()
            .map(|&p| if p == 0 { block_in } else { self.channels[p - 1] })
            .sum()
    }

    /// Layers concatenated into the block output: every even layer plus the
    /// ends of both local chains (`L − 1` and `L`), which nothing else reads.
    pub fn keep_layers(&self) -> Vec<usize> {
        let l = self.layers;
        (1..=l)
            .filter(|&i| i % 2 == 0 || i == l || (l >= 2 && i == l - 1))
            .collect()
    }

    pub fn output_width(&self) -> usize {
        self.keep_layers().iter().map(|&i| self.channels[i - 1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionCount {
    pub layers: usize,
    pub rule: Rule,
    pub total: usize,
    /// Total under the HD rule for the same depth.
    pub hd_total: usize,
    /// `L + (1/5)·L·ln L`.
    pub bound_ln: f64,
    /// `L + (1/5)·L·log₂ L`.
    pub bound_log2: f64,
    pub holds_ln: bool,
    pub holds_log2: bool,
}

fn bound(l: usize, log: fn(f64) -> f64) -> f64 {
    let lf = l as f64;
    lf + 0.2 * lf * log(lf)
}

pub fn connection_count(layers: usize, rule: Rule) -> ConnectionCount {
    assert!(layers >= 1);
    let total = (1..=layers).map(|i| predecessors(i, rule).len()).sum();
    let hd_total = (1..=layers).map(|i| hd_predecessors(i).len()).sum();
    let bound_ln = bound(layers, f64::ln);
    let bound_log2 = bound(layers, f64::log2);
    ConnectionCount {
        layers,
        rule,
        total,
        hd_total,
        bound_ln,
        bound_log2,
        holds_ln: total as f64 <= bound_ln,
        holds_log2: total as f64 <= bound_log2,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopologyRow {
    pub layer: usize,
    pub predecessors: Vec<usize>,
    pub in_degree: usize,
    pub cumulative: usize,
    pub holds_ln: bool,
    pub holds_log2: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopologyReport {
    pub rule: Rule,
    pub layers: usize,
    pub rows: Vec<TopologyRow>,
    pub summary: ConnectionCount,
}

pub fn topology_report(layers: usize, rule: Rule) -> TopologyReport {
    let mut cumulative = 0;
    let rows = (1..=layers)
        .map(|i| {
            let preds: Vec<usize> = predecessors(i, rule).into_iter().collect();
            cumulative += preds.len();
            TopologyRow {
                layer: i,
                in_degree: preds.len(),
                predecessors: preds,
                cumulative,
                holds_ln: cumulative as f64 <= bound(i, f64::ln),
                holds_log2: cumulative as f64 <= bound(i, f64::log2),
            }
        })
        .collect();
    TopologyReport {
        rule,
        layers,
        rows,
        summary: connection_count(layers, rule),
    }
}

impl TopologyReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rule: {:?}  layers: {}", self.rule, self.layers);
        let _ = writeln!(s, "{:>6}  {:>6}  {:>10}  predecessors", "layer", "in", "cumul");
        for r in &self.rows {
            let preds: Vec<String> = r.predecessors.iter().map(|p| p.to_string()).collect();
            let _ = writeln!(
                s,
                "{:>6}  {:>6}  {:>10}  {{{}}}",
                r.layer,
                r.in_degree,
                r.cumulative,
                preds.join(", ")
            );
        }
        let c = &self.summary;
        let _ = writeln!(s, "total connections: {} (HD rule: {})", c.total, c.hd_total);
        let _ = writeln!(
            s,
            "bound L + L·ln(L)/5 = {:.3}: {}",
            c.bound_ln,
            if c.holds_ln { "holds" } else { "VIOLATED" }
        );
        let _ = writeln!(
            s,
            "bound L + L·log2(L)/5 = {:.3}: {}",
            c.bound_log2,
            if c.holds_log2 { "holds" } else { "VIOLATED" }
        );
        s
    }
}
