//! Deterministic desk-scale defect dataset.
//!
//! Normal images are one filled shape (circle or square) of a palette color
//! on a plain background. Anomalous test images take a normal image and paint
//! a block or a thin scratch in a contrasting color; the mask is exactly the
//! set of painted pixels. Each image is drawn from its own seed, so output is
//! a pure function of the config.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vlmdiff_nn::exec;

use super::{scan_industrial_layout, DatasetIndex};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::util;

pub const BACKGROUND: [f32; 3] = [0.35, 0.35, 0.38];

pub const PALETTE: [(&str, [f32; 3]); 6] = [
    ("red", [0.85, 0.20, 0.20]),
    ("green", [0.25, 0.75, 0.30]),
    ("blue", [0.25, 0.45, 0.90]),
    ("yellow", [0.92, 0.82, 0.25]),
    ("purple", [0.65, 0.35, 0.80]),
    ("orange", [0.95, 0.58, 0.18]),
];

const DEFECT_COLORS: [[f32; 3]; 2] = [[0.04, 0.04, 0.04], [0.98, 0.98, 0.96]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(ShapeKind::Circle),
            "square" => Ok(ShapeKind::Square),
            _ => Err(Error::Config(format!("unknown shape {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    /// `(height, width)`.
    pub resolution: (usize, usize),
    /// One category per shape; images are assigned round-robin.
    pub categories: Vec<ShapeKind>,
    pub min_defect_frac: f64,
    pub max_defect_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 64,
            n_test_normal: 16,
            n_test_anomalous: 16,
            resolution: (64, 64),
            categories: vec![ShapeKind::Circle, ShapeKind::Square],
            min_defect_frac: 0.008,
            max_defect_frac: 0.04,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test_normal == 0 || self.n_test_anomalous == 0 {
            return Err(Error::Config("all synthetic counts must be >= 1".into()));
        }
        if self.resolution.0 < 32 || self.resolution.1 < 32 {
            return Err(Error::Config("synthetic resolution must be at least 32x32".into()));
        }
        if self.categories.is_empty() {
            return Err(Error::Config("at least one synthetic category required".into()));
        }
        if !(0.0 < self.min_defect_frac && self.min_defect_frac <= self.max_defect_frac && self.max_defect_frac < 0.5) {
            return Err(Error::Config("need 0 < min_defect_frac <= max_defect_frac < 0.5".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    Block,
    Scratch,
}

impl fmt::Display for DefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DefectKind::Block => "block",
            DefectKind::Scratch => "scratch",
        })
    }
}

/// One generated image as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Root-relative image path.
    pub key: String,
    pub category: String,
    pub shape: ShapeKind,
    pub color: String,
    /// `none`, `block` or `scratch`.
    pub defect: String,
}

impl ManifestEntry {
    /// Plain-language description of the normal content.
    pub fn description(&self) -> String {
        format!("a {} of color {} on plain background", self.shape, self.color)
    }
}

/// `manifest.txt`: `key=value` header lines followed by one `image` line per file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub header: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.txt";

    pub fn render(&self) -> String {
        let mut s = String::from("# synthetic shapes dataset\n");
        for (k, v) in &self.header {
            s.push_str(&format!("{k}={v}\n"));
        }
        for e in &self.entries {
            s.push_str(&format!(
                "image {} category={} shape={} color={} defect={}\n",
                e.key, e.category, e.shape, e.color, e.defect
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("image ") {
                let mut parts = rest.split_whitespace();
                let key = parts.next().unwrap_or_default().to_string();
                let mut fields = BTreeMap::new();
                for p in parts {
                    if let Some((k, v)) = p.split_once('=') {
                        fields.insert(k, v);
                    }
                }
                let get = |k: &str| {
                    fields
                        .get(k)
                        .map(|v| v.to_string())
                        .ok_or_else(|| Error::Dataset(format!("manifest line {}: missing {k}", ln + 1)))
                };
                m.entries.push(ManifestEntry {
                    key,
                    category: get("category")?,
                    shape: get("shape")?.parse()?,
                    color: get("color")?,
                    defect: get("defect")?,
                });
            } else if let Some((k, v)) = line.split_once('=') {
                m.header.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(Error::Dataset(format!("manifest line {}: unparsable", ln + 1)));
            }
        }
        Ok(m)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let p = root.join(Self::FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Self::parse(&text)
    }

    pub fn entry(&self, key: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.key == key)
    }
}

#[derive(Debug, Clone, Copy)]
struct NormalParams {
    shape: ShapeKind,
    color: usize,
    cy: f32,
    cx: f32,
    /// Radius for circles, half side for squares.
    size: f32,
}

fn sample_normal<R: Rng>(shape: ShapeKind, h: usize, w: usize, rng: &mut R) -> NormalParams {
    let m = h.min(w) as f32;
    let color = rng.random_range(0..PALETTE.len());
    let jitter = 0.12 * m;
    let cy = h as f32 / 2.0 + rng.random_range(-jitter..=jitter);
    let cx = w as f32 / 2.0 + rng.random_range(-jitter..=jitter);
    let size = match shape {
        ShapeKind::Circle => rng.random_range(0.20 * m..=0.30 * m),
        ShapeKind::Square => rng.random_range(0.17 * m..=0.26 * m),
    };
    NormalParams { shape, color, cy, cx, size }
}

fn render_normal(p: &NormalParams, h: usize, w: usize) -> Image {
    let mut im = Image::filled(h, w, BACKGROUND);
    let rgb = PALETTE[p.color].1;
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f32 + 0.5 - p.cy, x as f32 + 0.5 - p.cx);
            let inside = match p.shape {
                ShapeKind::Circle => dy * dy + dx * dx <= p.size * p.size,
                ShapeKind::Square => dy.abs() <= p.size && dx.abs() <= p.size,
            };
            if inside {
                im.set(y, x, rgb);
            }
        }
    }
    im
}

fn seg_dist(py: f32, px: f32, ay: f32, ax: f32, by: f32, bx: f32) -> f32 {
    let (vy, vx) = (by - ay, bx - ax);
    let len2 = vy * vy + vx * vx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((py - ay) * vy + (px - ax) * vx) / len2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (ay + t * vy, ax + t * vx);
    ((py - qy).powi(2) + (px - qx).powi(2)).sqrt()
}

/// Paints a defect and returns its exact mask.
fn paint_defect<R: Rng>(
    im: &mut Image,
    normal: &NormalParams,
    kind: DefectKind,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Mask> {
    let (h, w) = (im.height, im.width);
    let total = (h * w) as f64;
    let color = DEFECT_COLORS[rng.random_range(0..DEFECT_COLORS.len())];
    for _ in 0..500 {
        let target = rng.random_range(cfg.min_defect_frac..=cfg.max_defect_frac) * total;
        let cy = normal.cy + rng.random_range(-0.7..=0.7) * normal.size;
        let cx = normal.cx + rng.random_range(-0.7..=0.7) * normal.size;
        let mut mask = Mask::zeros(h, w);
        match kind {
            DefectKind::Block => {
                let aspect: f64 = rng.random_range(0.5..=2.0);
                let bw = ((target * aspect).sqrt().round() as usize).max(2);
                let bh = ((target / bw as f64).round() as usize).max(2);
                let y0 = (cy - bh as f32 / 2.0).round().max(0.0) as usize;
                let x0 = (cx - bw as f32 / 2.0).round().max(0.0) as usize;
                for y in y0..(y0 + bh).min(h) {
                    for x in x0..(x0 + bw).min(w) {
                        mask.data[y * w + x] = 1;
                    }
                }
            }
            DefectKind::Scratch => {
                let half = rng.random_range(0.7f32..=1.1);
                let len = (target as f32 / (2.0 * half)).max(4.0);
                let ang = rng.random_range(0.0..std::f32::consts::PI);
                let (dy, dx) = (ang.sin() * len / 2.0, ang.cos() * len / 2.0);
                for y in 0..h {
                    for x in 0..w {
                        let d = seg_dist(y as f32 + 0.5, x as f32 + 0.5, cy - dy, cx - dx, cy + dy, cx + dx);
                        if d <= half {
                            mask.data[y * w + x] = 1;
                        }
                    }
                }
            }
        }
        let frac = mask.area() as f64 / total;
        if frac >= cfg.min_defect_frac && frac <= cfg.max_defect_frac {
            for y in 0..h {
                for x in 0..w {
                    if mask.data[y * w + x] != 0 {
                        im.set(y, x, color);
                    }
                }
            }
            return Ok(mask);
        }
    }
    Err(Error::Config(format!(
        "could not place a {kind} defect within [{}, {}] of the image",
        cfg.min_defect_frac, cfg.max_defect_frac
    )))
}

/// Which slot of the synthetic dataset to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSlot {
    Train(usize),
    TestNormal(usize),
    TestAnomalous(usize),
}

/// A generated image before it touches disk.
#[derive(Debug, Clone)]
pub struct Sample {
    pub entry: ManifestEntry,
    pub image: Image,
    pub mask: Option<Mask>,
    pub mask_key: Option<String>,
}

/// Generates one slot in memory; identical to what is written to disk.
pub fn generate_sample(cfg: &SynthConfig, slot: SampleSlot) -> Result<Sample> {
    let (h, w) = cfg.resolution;
    let (i, label) = match slot {
        SampleSlot::Train(i) => (i, "train"),
        SampleSlot::TestNormal(i) => (i, "test-good"),
        SampleSlot::TestAnomalous(i) => (i, "test-anomalous"),
    };
    let shape = cfg.categories[i % cfg.categories.len()];
    let category = shape.to_string();
    let mut rng: ChaCha8Rng = util::rng_for(cfg.seed, &format!("synth/{label}/{i}"));
    let normal = sample_normal(shape, h, w, &mut rng);
    let mut image = render_normal(&normal, h, w);
    let stem = format!("{i:03}");
    let (key, defect, mask, mask_key) = match slot {
        SampleSlot::Train(_) => (format!("{category}/train/good/{stem}.png"), "none".to_string(), None, None),
        SampleSlot::TestNormal(_) => (format!("{category}/test/good/{stem}.png"), "none".to_string(), None, None),
        SampleSlot::TestAnomalous(_) => {
            let kind = if i % 2 == 0 { DefectKind::Block } else { DefectKind::Scratch };
            let mask = paint_defect(&mut image, &normal, kind, cfg, &mut rng)?;
            (
                format!("{category}/test/{kind}/{stem}.png"),
                kind.to_string(),
                Some(mask),
                Some(format!("{category}/ground_truth/{kind}/{stem}_mask.png")),
            )
        }
    };
    Ok(Sample {
        entry: ManifestEntry {
            key,
            category,
            shape,
            color: PALETTE[normal.color].0.to_string(),
            defect,
        },
        image,
        mask,
        mask_key,
    })
}

fn all_slots(cfg: &SynthConfig) -> Vec<SampleSlot> {
    (0..cfg.n_train)
        .map(SampleSlot::Train)
        .chain((0..cfg.n_test_normal).map(SampleSlot::TestNormal))
        .chain((0..cfg.n_test_anomalous).map(SampleSlot::TestAnomalous))
        .collect()
}

/// Writes the dataset under `out` and returns its index.
pub fn synthesize_shapes_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetIndex> {
    cfg.validate()?;
    let slots = all_slots(cfg);
    let samples: Vec<Sample> = exec::map_slice(&slots, |&s| generate_sample(cfg, s))
        .into_iter()
        .collect::<Result<_>>()?;
    for s in &samples {
        util::write_atomic(&out.join(&s.entry.key), &s.image.to_png_bytes())?;
        if let (Some(m), Some(k)) = (&s.mask, &s.mask_key) {
            util::write_atomic(&out.join(k), &m.to_png_bytes())?;
        }
    }
    let mut manifest = Manifest::default();
    let (h, w) = cfg.resolution;
    for (k, v) in [
        ("seed", cfg.seed.to_string()),
        ("n_train", cfg.n_train.to_string()),
        ("n_test_normal", cfg.n_test_normal.to_string()),
        ("n_test_anomalous", cfg.n_test_anomalous.to_string()),
        ("resolution", format!("{h}x{w}")),
        (
            "categories",
            cfg.categories.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("min_defect_frac", cfg.min_defect_frac.to_string()),
        ("max_defect_frac", cfg.max_defect_frac.to_string()),
    ] {
        manifest.header.insert(k.to_string(), v);
    }
    manifest.entries = samples.into_iter().map(|s| s.entry).collect();
    util::write_atomic(&out.join(Manifest::FILE), manifest.render().as_bytes())?;
    scan_industrial_layout(out, cfg.resolution)
}
