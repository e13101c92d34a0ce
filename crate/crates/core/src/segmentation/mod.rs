//! Feature-space comparison of an image with its reconstruction.
//!
//! Patch features of both images are compared by `1 − cos`; the grid is
//! upsampled to the image size and smoothed into an [`AnomalyMap`].

mod extractors;

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use extractors::{build_extractor, CnnExtractor, ConvStubExtractor, ExtractorBackend, ExtractorConfig, VitExtractor};

/// Feature grid `grid.0 × grid.1 × channels`, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub grid: (usize, usize),
    pub channels: usize,
    pub features: Vec<f32>,
    pub patch_size: usize,
    pub extractor_id: String,
}

impl FeatureStack {
    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.grid.1 + x) * self.channels;
        &self.features[i..i + self.channels]
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;
    fn patch_size(&self) -> usize;
    fn extract(&self, image: &Image) -> Result<FeatureStack>;
}

pub fn extract_features(image: &Image, extractor: &dyn FeatureExtractor) -> Result<FeatureStack> {
    extractor.extract(image)
}

/// Near-zero norm cut-off for the cosine.
pub const ZERO_NORM: f64 = 1e-12;

/// `1 − cos(a, b)` in `[0, 2]`; both vectors near zero score 0, exactly one
/// near zero scores 2.
pub fn cosine_dissimilarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na.sqrt() < ZERO_NORM, nb.sqrt() < ZERO_NORM) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 2.0,
        // sqrt(a²·a²) is exact, so identical inputs give exactly 0.
        _ => (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
#[derive(Default)]
pub enum ScoreRule {
    #[default]
    Max,
    TopKMean { k: usize },
}


#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    /// Final per-pixel scores (upsampled, then smoothed when enabled).
    pub scores: Vec<f32>,
    /// Patch-grid dissimilarities before upsampling.
    pub grid: (usize, usize),
    pub grid_scores: Vec<f32>,
    pub image_score: f64,
    /// `(input id, reconstruction id)`.
    pub source: (String, String),
}

/// Compares two feature stacks. `sigma <= 0` disables smoothing.
pub fn anomaly_map(
    f: &FeatureStack,
    f_rec: &FeatureStack,
    target: (usize, usize),
    sigma: f64,
    rule: ScoreRule,
) -> Result<AnomalyMap> {
    if f.grid != f_rec.grid || f.channels != f_rec.channels {
        return Err(Error::Shape(format!(
            "feature grids differ: {:?}×{} vs {:?}×{}",
            f.grid, f.channels, f_rec.grid, f_rec.channels
        )));
    }
    if f.extractor_id != f_rec.extractor_id {
        return Err(Error::Shape(format!(
            "features come from different extractors ({} vs {})",
            f.extractor_id, f_rec.extractor_id
        )));
    }
    let (gh, gw) = f.grid;
    let grid_scores: Vec<f32> = (0..gh * gw)
        .map(|i| cosine_dissimilarity(f.at(i / gw, i % gw), f_rec.at(i / gw, i % gw)) as f32)
        .collect();
    let up = resize_bilinear(&grid_scores, f.grid, target);
    let scores = if sigma > 0.0 {
        gaussian_blur(&up, target, sigma)
    } else {
        up
    };
    let image_score = score_of(&scores, rule);
    Ok(AnomalyMap {
        height: target.0,
        width: target.1,
        scores,
        grid: f.grid,
        grid_scores,
        image_score,
        source: ("input".into(), "reconstruction".into()),
    })
}

/// Image-level score of a map under `rule`.
pub fn image_score(map: &AnomalyMap, rule: ScoreRule) -> f64 {
    score_of(&map.scores, rule)
}

fn score_of(scores: &[f32], rule: ScoreRule) -> f64 {
    match rule {
        ScoreRule::Max => scores.iter().fold(0.0f32, |m, &v| m.max(v)) as f64,
        ScoreRule::TopKMean { k } => {
            let mut v = scores.to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            let k = k.clamp(1, v.len().max(1));
            v.iter().take(k).map(|&x| x as f64).sum::<f64>() / k as f64
        }
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f32], (sh, sw): (usize, usize), (th, tw): (usize, usize)) -> Vec<f32> {
    let coord = |o: usize, s: usize, t: usize| {
        let c = ((o as f64 + 0.5) * s as f64 / t as f64 - 0.5).max(0.0);
        let i0 = (c.floor() as usize).min(s - 1);
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, c - i0 as f64)
    };
    let xs: Vec<_> = (0..tw).map(|x| coord(x, sw, tw)).collect();
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, y1, fy) = coord(y, sh, th);
        for &(x0, x1, fx) in &xs {
            let v = |yy: usize, xx: usize| src[yy * sw + xx] as f64;
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric reflection of index `i` into `[0, n)`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur, kernel truncated at 4σ, reflected borders.
pub fn gaussian_blur(src: &[f32], (h, w): (usize, usize), sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + reflect(x as i64 + j as i64 - r, w)] as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as i64 + j as i64 - r, h) * w + x])
                .sum::<f64>() as f32;
        }
    }
    out
}

const AMAP_MAGIC: &[u8; 8] = b"VLMDAMAP";

/// `VLMDAMAP`, `u32` height, `u32` width, then little-endian `f32` scores.
pub fn amap_to_bytes(map: &AnomalyMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.scores.len());
    out.extend_from_slice(AMAP_MAGIC);
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    for v in &map.scores {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads a stored map; `(height, width, scores)`.
pub fn read_amap(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: m.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != AMAP_MAGIC {
        return Err(bad("not an anomaly map file"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * h * w {
        return Err(bad("anomaly map size does not match its header"));
    }
    let scores = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, scores))
}

/// Rebuilds an [`AnomalyMap`] from stored scores.
pub fn map_from_scores(h: usize, w: usize, scores: Vec<f32>, rule: ScoreRule) -> AnomalyMap {
    let image_score = score_of(&scores, rule);
    AnomalyMap {
        height: h,
        width: w,
        scores,
        grid: (0, 0),
        grid_scores: Vec::new(),
        image_score,
        source: (String::new(), String::new()),
    }
}

/// Grayscale visualization, min–max normalized per map.
pub fn amap_to_png(map: &AnomalyMap) -> Vec<u8> {
    let (lo, hi) = map
        .scores
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = map
        .scores
        .iter()
        .map(|&v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let g = GrayImage::from_raw(map.width as u32, map.height as u32, px).expect("map buffer");
    let mut out = Cursor::new(Vec::new());
    g.write_to(&mut out, ImageFormat::Png).expect("png encoding");
    out.into_inner()
}

#[cfg(test)]
mod tests;
