//! File formats: tensor files and PGM/PPM images.
//!
//! Tensor file layout (all little-endian):
//!
//! ```text
//! "ESOLTNSR"  8 bytes magic
//! ndim        u32
//! dims        ndim x u32
//! payload     product(dims) x f32, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::cam::{LocalizationMap, SeedMask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 8] = b"ESOLTNSR";

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.ndim() == 0 {
        return Err(Error::Dimension("tensor files need at least one dimension".into()));
    }
    let mut out = Vec::with_capacity(12 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Dimension(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(bad("missing ESOLTNSR magic"));
    }
    let u32_at = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| bad("truncated header"))
    };
    let ndim = u32_at(8)? as usize;
    if ndim == 0 {
        return Err(bad("zero dimensions"));
    }
    let dims = (0..ndim)
        .map(|i| u32_at(12 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("dimension product overflows"))?;
    let start = 12 + 4 * ndim;
    let payload = &bytes[start..];
    if payload.len() != 4 * numel {
        return Err(bad(&format!(
            "payload has {} bytes, dims {:?} need {}",
            payload.len(),
            dims,
            4 * numel
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

fn to_byte(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Binary greyscale `P5` image, maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Binary colour `P6` image, maxval 255, interleaved RGB.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Greyscale bytes of one map plane, `round(255 * v)`.
pub fn heatmap_bytes(map: &LocalizationMap, class_id: usize) -> Result<Vec<u8>> {
    if class_id >= map.classes() {
        return Err(Error::Contract(format!("class {class_id} not in map")));
    }
    let plane = map.plane(class_id);
    if plane.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Contract("heatmap values must lie in [0, 1]".into()));
    }
    Ok(plane.iter().map(|&v| to_byte(v)).collect())
}

pub fn export_heatmap(map: &LocalizationMap, class_id: usize, path: &Path) -> Result<()> {
    let px = heatmap_bytes(map, class_id)?;
    fs::write(path, encode_pgm(map.width(), map.height(), &px)).map_err(|e| Error::io(path, e))
}

/// Class colours for overlays, indexed by class id.
pub const PALETTE: [[f32; 3]; 6] = [
    [1.0, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.2, 0.3, 1.0],
    [1.0, 0.9, 0.1],
    [0.9, 0.2, 0.9],
    [0.1, 0.9, 0.9],
];

/// RGB bytes of `image` (`[3,H,W]` in `[0,1]`) with labelled pixels blended
/// half-and-half with their class colour; background is left untouched.
pub fn overlay_bytes(image: &Tensor, seed: &SeedMask) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        &[3, h, w] | &[1, 3, h, w] => (h, w),
        s => return Err(Error::Dimension(format!("overlay needs a 3,H,W image, got {s:?}"))),
    };
    if (seed.height, seed.width) != (h, w) {
        return Err(Error::Dimension("seed mask and image sizes differ".into()));
    }
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        let label = seed.labels[p] as usize;
        for ch in 0..3 {
            let v = d[ch * h * w + p];
            let v = if label == 0 {
                v
            } else {
                0.5 * v + 0.5 * PALETTE[(label - 1) % PALETTE.len()][ch]
            };
            out.push(to_byte(v));
        }
    }
    Ok(out)
}

pub fn export_overlay(image: &Tensor, seed: &SeedMask, path: &Path) -> Result<()> {
    let rgb = overlay_bytes(image, seed)?;
    fs::write(path, encode_ppm(seed.width, seed.height, &rgb)).map_err(|e| Error::io(path, e))
}
