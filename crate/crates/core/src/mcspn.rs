// SPDX-License-Identifier: Apache-2.0

//! Multi-class convolutional spatial propagation.
//!
//! Each class map is diffused independently along scanlines in four
//! directions. For direction L2R the scanline index `t` is the column and
//! the three neighbours of pixel (y, t) are (y−1, t−1), (y, t−1), (y+1, t−1):
//!
//! ```text
//! h[t][y] = (1 − Σⱼ pⱼ)·x[t][y] + Σⱼ pⱼ·h[t−1][y+oⱼ]      oⱼ ∈ {−1, 0, +1}
//! ```
//!
//! with `h[0] = x[0]`. Neighbours outside the image contribute nothing and
//! their weights are dropped from both sums. The four directional results
//! are fused elementwise (max by default).
//!
//! Affinity tensors have `12·K` channels laid out as
//! `(direction·K + class)·3 + neighbour`, directions in [`Direction::ALL`]
//! order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Fusion;
use crate::tensor::{Backward, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    L2R,
    R2L,
    T2B,
    B2T,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::L2R, Direction::R2L, Direction::T2B, Direction::B2T];
}

/// Scan geometry: `lines` scanlines of `len` pixels, and the flat pixel
/// index of position `y` on scanline `t`.
#[derive(Clone, Copy)]
struct Scan {
    dir: Direction,
    h: usize,
    w: usize,
}

impl Scan {
    fn lines(&self) -> usize {
        match self.dir {
            Direction::L2R | Direction::R2L => self.w,
            _ => self.h,
        }
    }

    fn len(&self) -> usize {
        match self.dir {
            Direction::L2R | Direction::R2L => self.h,
            _ => self.w,
        }
    }

    fn at(&self, t: usize, y: usize) -> usize {
        match self.dir {
            Direction::L2R => y * self.w + t,
            Direction::R2L => y * self.w + (self.w - 1 - t),
            Direction::T2B => t * self.w + y,
            Direction::B2T => (self.h - 1 - t) * self.w + y,
        }
    }
}

const OFFSETS: [isize; 3] = [-1, 0, 1];

/// `p_j ← p_j / max(Σ|p|, 1)` over each neighbour triple.
pub fn normalize_affinities(raw: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = raw.dims4()?;
    if c % 3 != 0 {
        return Err(Error::shape("normalize_affinities", format!("{c} channels not a multiple of 3")));
    }
    let hw = h * w;
    let mut out = raw.clone();
    let d = raw.data();
    let o = out.data_mut();
    for b in 0..n {
        for tri in 0..c / 3 {
            let base = (b * c + tri * 3) * hw;
            for i in 0..hw {
                let s: f64 = (0..3).map(|j| d[base + j * hw + i].abs()).sum();
                let denom = s.max(1.0);
                for j in 0..3 {
                    o[base + j * hw + i] = d[base + j * hw + i] / denom;
                }
            }
        }
    }
    Ok(out)
}

/// Largest `Σ|p|` over all neighbour triples.
pub fn max_triple_sum(p: &Tensor) -> Result<f64> {
    let (n, c, h, w) = p.dims4()?;
    let hw = h * w;
    let d = p.data();
    let mut worst: f64 = 0.0;
    for b in 0..n {
        for tri in 0..c / 3 {
            let base = (b * c + tri * 3) * hw;
            for i in 0..hw {
                let s: f64 = (0..3).map(|j| d[base + j * hw + i].abs()).sum();
                worst = worst.max(s);
            }
        }
    }
    Ok(worst)
}

fn check_pair(x: &Tensor, p: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, k, h, w) = x.dims4()?;
    if p.shape() != [n, 3 * k, h, w] {
        return Err(Error::shape(
            "propagate",
            format!("features {:?} need affinities [{n}, {}, {h}, {w}], got {:?}", x.shape(), 3 * k, p.shape()),
        ));
    }
    Ok((n, k, h, w))
}

/// One directional sweep. `p` holds `3·K` channels (class-major, then
/// neighbour) and must be normalised.
pub fn propagate_direction(x: &Tensor, p: &Tensor, dir: Direction) -> Result<Tensor> {
    check_pair(x, p)?;
    if max_triple_sum(p)? > 1.0 + 1e-12 {
        return Err(Error::Unnormalized);
    }
    Ok(propagate_raw(x, p, dir))
}

fn propagate_raw(x: &Tensor, p: &Tensor, dir: Direction) -> Tensor {
    let (n, k, h, w) = x.dims4().expect("nchw");
    let hw = h * w;
    let scan = Scan { dir, h, w };
    let (xd, pd) = (x.data(), p.data());
    let mut out = x.clone();
    let hd = out.data_mut();
    for plane in 0..n * k {
        let xb = plane * hw;
        let pb = plane * 3 * hw;
        for t in 1..scan.lines() {
            for y in 0..scan.len() {
                let i = scan.at(t, y);
                let mut acc = 0.0;
                let mut psum = 0.0;
                for (j, &o) in OFFSETS.iter().enumerate() {
                    let yy = y as isize + o;
                    if yy < 0 || yy >= scan.len() as isize {
                        continue;
                    }
                    let pj = pd[pb + j * hw + i];
                    psum += pj;
                    acc += pj * hd[xb + scan.at(t - 1, yy as usize)];
                }
                hd[xb + i] = (1.0 - psum) * xd[xb + i] + acc;
            }
        }
    }
    out
}

struct PropagateBackward(Direction);

impl Backward for PropagateBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], out: &Tensor) -> Vec<Option<Tensor>> {
        let (x, p) = (inputs[0], inputs[1]);
        let (n, k, h, w) = x.dims4().expect("nchw");
        let hw = h * w;
        let scan = Scan { dir: self.0, h, w };
        let (xd, pd, hd) = (x.data(), p.data(), out.data());
        let mut gh = g.data().to_vec();
        let mut gx = vec![0.0; xd.len()];
        let mut gp = vec![0.0; pd.len()];
        for plane in 0..n * k {
            let xb = plane * hw;
            let pb = plane * 3 * hw;
            for t in (1..scan.lines()).rev() {
                for y in 0..scan.len() {
                    let i = scan.at(t, y);
                    let gi = gh[xb + i];
                    if gi == 0.0 {
                        continue;
                    }
                    let mut psum = 0.0;
                    for (j, &o) in OFFSETS.iter().enumerate() {
                        let yy = y as isize + o;
                        if yy < 0 || yy >= scan.len() as isize {
                            continue;
                        }
                        let src = xb + scan.at(t - 1, yy as usize);
                        let pj = pd[pb + j * hw + i];
                        psum += pj;
                        gp[pb + j * hw + i] += gi * (hd[src] - xd[xb + i]);
                        gh[src] += gi * pj;
                    }
                    gx[xb + i] += gi * (1.0 - psum);
                }
            }
            for y in 0..scan.len() {
                let i = scan.at(0, y);
                gx[xb + i] += gh[xb + i];
            }
        }
        vec![
            Some(Tensor::new(x.shape(), gx).expect("shape")),
            Some(Tensor::new(p.shape(), gp).expect("shape")),
        ]
    }
}

struct NormalizeBackward;

impl Backward for NormalizeBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _out: &Tensor) -> Vec<Option<Tensor>> {
        let raw = inputs[0];
        let (n, c, h, w) = raw.dims4().expect("nchw");
        let hw = h * w;
        let (rd, gd) = (raw.data(), g.data());
        let mut gr = vec![0.0; rd.len()];
        for b in 0..n {
            for tri in 0..c / 3 {
                let base = (b * c + tri * 3) * hw;
                for i in 0..hw {
                    let idx = |j: usize| base + j * hw + i;
                    let s: f64 = (0..3).map(|j| rd[idx(j)].abs()).sum();
                    if s <= 1.0 {
                        for j in 0..3 {
                            gr[idx(j)] = gd[idx(j)];
                        }
                    } else {
                        // p_j = r_j / S, ∂p_j/∂r_m = δ_jm/S − r_j·sign(r_m)/S².
                        let dot: f64 = (0..3).map(|j| gd[idx(j)] * rd[idx(j)]).sum();
                        for m in 0..3 {
                            let sign = rd[idx(m)].signum() * (rd[idx(m)] != 0.0) as i32 as f64;
                            gr[idx(m)] = gd[idx(m)] / s - dot * sign / (s * s);
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new(raw.shape(), gr).expect("shape"))]
    }
}

struct FuseBackward {
    fusion: Fusion,
}

impl Backward for FuseBackward {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], out: &Tensor) -> Vec<Option<Tensor>> {
        let m = inputs.len();
        let gd = g.data();
        let mut grads = vec![vec![0.0; gd.len()]; m];
        match self.fusion {
            Fusion::Mean => {
                for gv in grads.iter_mut() {
                    for (a, b) in gv.iter_mut().zip(gd) {
                        *a = b / m as f64;
                    }
                }
            }
            Fusion::Max => {
                let od = out.data();
                for i in 0..gd.len() {
                    let win = (0..m).find(|&k| inputs[k].data()[i] == od[i]).unwrap_or(0);
                    grads[win][i] = gd[i];
                }
            }
        }
        grads
            .into_iter()
            .map(|d| Some(Tensor::new(g.shape(), d).expect("shape")))
            .collect()
    }
}

/// Elementwise fusion of same-shape maps; max ties go to the earliest input.
pub fn fuse_directions(maps: &[&Tensor], fusion: Fusion) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::shape("fuse_directions", "no inputs"))?;
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::shape(
                "fuse_directions",
                format!("{:?} vs {:?}", first.shape(), m.shape()),
            ));
        }
    }
    let mut out = (*first).clone();
    let o = out.data_mut();
    for m in &maps[1..] {
        for (a, &b) in o.iter_mut().zip(m.data()) {
            match fusion {
                Fusion::Max => *a = a.max(b),
                Fusion::Mean => *a += b,
            }
        }
    }
    if fusion == Fusion::Mean {
        let k = maps.len() as f64;
        o.iter_mut().for_each(|v| *v /= k);
    }
    Ok(out)
}

/// Full refinement on plain tensors: normalise `raw` (12·K channels),
/// propagate in four directions `sweeps` times, fuse.
pub fn refine(x: &Tensor, raw: &Tensor, fusion: Fusion, sweeps: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let rv = g.input(raw.clone());
    let y = g.mcspn(xv, rv, fusion, sweeps)?;
    Ok(g.value(y).clone())
}

impl Graph {
    pub fn normalize_affinities(&mut self, raw: Var) -> Result<Var> {
        let out = normalize_affinities(self.value(raw))?;
        Ok(self.push(out, &[raw], Box::new(NormalizeBackward)))
    }

    /// One directional sweep; `p` must already be normalised.
    pub fn propagate(&mut self, x: Var, p: Var, dir: Direction) -> Result<Var> {
        let out = propagate_direction(self.value(x), self.value(p), dir)?;
        Ok(self.push(out, &[x, p], Box::new(PropagateBackward(dir))))
    }

    pub fn fuse(&mut self, maps: &[Var], fusion: Fusion) -> Result<Var> {
        let ts: Vec<&Tensor> = maps.iter().map(|&v| self.value(v)).collect();
        let out = fuse_directions(&ts, fusion)?;
        Ok(self.push(out, maps, Box::new(FuseBackward { fusion })))
    }

    /// Refines `x` (`K` channels) with raw affinities `raw` (`12·K`
    /// channels).
    pub fn mcspn(&mut self, x: Var, raw: Var, fusion: Fusion, sweeps: usize) -> Result<Var> {
        let (_, k, _, _) = self.value(x).dims4()?;
        let (_, c, _, _) = self.value(raw).dims4()?;
        if c != 12 * k {
            return Err(Error::shape(
                "mcspn",
                format!("{k} classes need {} affinity channels, got {c}", 12 * k),
            ));
        }
        let p = self.normalize_affinities(raw)?;
        let mut outs = Vec::with_capacity(4);
        for (d, dir) in Direction::ALL.into_iter().enumerate() {
            let pd = self.slice_channels(p, d * 3 * k, 3 * k)?;
            let mut h = x;
            for _ in 0..sweeps {
                h = self.propagate(h, pd, dir)?;
            }
            outs.push(h);
        }
        self.fuse(&outs, fusion)
    }
}
