// SPDX-License-Identifier: Apache-2.0

//! Range-image files.
//!
//! ```text
//! {"H":..,"W":..,"channels":[..],"dtype":"float32","points":N,"index_maps":bool}\n
//! 5 × H×W f32 LE planes
//! ceil(H×W / 8) bytes validity mask, LSB first
//! if index_maps: H×W i32 LE pixel→point (−1 = none), N × 2 i32 LE point→(u, v)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RangeImage, CHANNELS};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    channels: Vec<String>,
    dtype: String,
    points: usize,
    index_maps: bool,
}

pub fn write_range_image(path: &Path, img: &RangeImage) -> Result<()> {
    let maps = match (&img.pixel_to_point, &img.point_to_pixel) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    let header = Header {
        height: img.height,
        width: img.width,
        channels: CHANNELS.iter().map(|s| s.to_string()).collect(),
        dtype: "float32".into(),
        points: maps.map_or(0, |(_, b)| b.len()),
        index_maps: maps.is_some(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut mask = vec![0u8; img.pixels().div_ceil(8)];
    for (i, &b) in img.valid.iter().enumerate() {
        if b {
            mask[i / 8] |= 1 << (i % 8);
        }
    }
    bytes.extend_from_slice(&mask);
    if let Some((p2p, px)) = maps {
        let idx = |o: Option<usize>| o.map_or(-1, |i| i as i32);
        for p in p2p {
            bytes.extend_from_slice(&idx(*p).to_le_bytes());
        }
        for p in px {
            let (u, v) = p.map_or((-1, -1), |(u, v)| (u as i32, v as i32));
            bytes.extend_from_slice(&u.to_le_bytes());
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_range_image(path: &Path) -> Result<RangeImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::shape("range image file", format!("{}: {m}", path.display()));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    if header.dtype != "float32" || header.channels.len() != 5 {
        return Err(bad("unsupported dtype or channel layout"));
    }
    let n = header.height * header.width;
    let mut cur = &bytes[nl + 1..];
    let mut take = |k: usize| -> Result<&[u8]> {
        if cur.len() < k {
            return Err(bad("truncated body"));
        }
        let (a, b) = cur.split_at(k);
        cur = b;
        Ok(a)
    };
    let data: Vec<f32> = take(20 * n)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mask = take(n.div_ceil(8))?;
    let valid: Vec<bool> = (0..n).map(|i| mask[i / 8] >> (i % 8) & 1 == 1).collect();
    let i32s = |b: &[u8]| -> Vec<i32> {
        b.chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    };
    let (p2p, px) = if header.index_maps {
        let p2p = i32s(take(4 * n)?)
            .into_iter()
            .map(|i| usize::try_from(i).ok())
            .collect();
        let px = i32s(take(8 * header.points)?)
            .chunks_exact(2)
            .map(|uv| (uv[0] >= 0).then(|| (uv[0] as usize, uv[1] as usize)))
            .collect();
        (Some(p2p), Some(px))
    } else {
        (None, None)
    };
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    RangeImage::from_parts(header.height, header.width, data, valid, p2p, px)
}
