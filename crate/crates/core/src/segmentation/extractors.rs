use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vlmdiff_nn::kernels::{conv2d_forward, ConvGeom};
use vlmdiff_nn::{checkpoint, Attention, Conv2d, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor};

use super::{FeatureExtractor, FeatureStack};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorBackend {
    /// Seeded random two-layer convolution, always available.
    #[default]
    ConvStub,
    /// DINO-style vision transformer; needs a weights file.
    Vit,
    /// Strided convolutional network; needs a weights file.
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub backend: ExtractorBackend,
    pub patch: usize,
    pub channels: usize,
    pub seed: u64,
    pub weights: Option<PathBuf>,
    /// Transformer depth (vit).
    pub depth: usize,
    pub heads: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            backend: ExtractorBackend::ConvStub,
            patch: 8,
            channels: 32,
            seed: 0,
            weights: None,
            depth: 4,
            heads: 4,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self, resolution: (usize, usize)) -> Result<()> {
        if self.patch == 0 || !resolution.0.is_multiple_of(self.patch) || !resolution.1.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "segmentation.extractor.patch {} must divide the resolution {resolution:?}",
                self.patch
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("segmentation.extractor.channels must be positive".into()));
        }
        if self.backend == ExtractorBackend::Cnn && !self.patch.is_power_of_two() {
            return Err(Error::Config("cnn extractor needs a power-of-two patch".into()));
        }
        if self.backend == ExtractorBackend::Vit && (self.heads == 0 || !self.channels.is_multiple_of(self.heads)) {
            return Err(Error::Config("vit channels must be divisible by heads".into()));
        }
        Ok(())
    }
}

pub fn build_extractor(cfg: &ExtractorConfig, resolution: (usize, usize)) -> Result<Box<dyn FeatureExtractor>> {
    cfg.validate(resolution)?;
    let need_weights = |name: &str| -> Result<&PathBuf> {
        let p = cfg.weights.as_ref().ok_or_else(|| {
            Error::ExtractorUnavailable(format!(
                "{name} backend needs segmentation.extractor.weights"
            ))
        })?;
        if !p.is_file() {
            return Err(Error::ExtractorUnavailable(format!(
                "{name} weights {} not found",
                p.display()
            )));
        }
        Ok(p)
    };
    Ok(match cfg.backend {
        ExtractorBackend::ConvStub => Box::new(ConvStubExtractor::new(cfg.channels, cfg.patch, cfg.seed)),
        ExtractorBackend::Vit => Box::new(VitExtractor::load(need_weights("vit")?, resolution)?),
        ExtractorBackend::Cnn => Box::new(CnnExtractor::load(need_weights("cnn")?)?),
    })
}

/// Plain convolution + leaky ReLU on one CHW image.
fn conv_act(store: &ParamStore, conv: &Conv2d, x: &[f32], (c, h, w): (usize, usize, usize), slope: f32) -> (Vec<f32>, (usize, usize, usize)) {
    let wt = store.get(conv.weight);
    let k = wt.dim(2);
    let geom = ConvGeom {
        cin: c,
        h,
        w,
        k,
        stride: conv.stride,
        pad: conv.pad,
    };
    let cout = wt.dim(0);
    let (ho, wo) = geom.out_hw();
    let mut y = conv2d_forward(x, 1, &geom, wt.data(), Some(store.get(conv.bias).data()), cout);
    for v in &mut y {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    (y, (cout, ho, wo))
}

fn chw_input(image: &Image) -> Vec<f32> {
    image.to_model_tensor().into_data()
}

/// CHW → grid-major channel-last.
fn to_channel_last(x: &[f32], (c, h, w): (usize, usize, usize)) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = x[ch * h * w + p];
        }
    }
    out
}

/// Rescales the default `1/√fan_in` uniform bound to He-uniform `√(6/fan_in)`.
fn he_init(store: &mut ParamStore, conv: &Conv2d) {
    let f = 6f32.sqrt();
    store.get_mut(conv.weight).data_mut().iter_mut().for_each(|v| *v *= f);
}

/// Two seeded 3×3 convolutions with leaky ReLU, average-pooled per patch.
/// A pixel change moves features at most 2 pixels away before pooling.
pub struct ConvStubExtractor {
    store: ParamStore,
    c1: Conv2d,
    c2: Conv2d,
    patch: usize,
    channels: usize,
    seed: u64,
}

impl ConvStubExtractor {
    pub const HALO: usize = 2;
    const SLOPE: f32 = 0.2;

    pub fn new(channels: usize, patch: usize, seed: u64) -> Self {
        let mut rng = util::rng_for(seed, "extractor/conv-stub");
        let mut store = ParamStore::new();
        let c1 = Conv2d::same(&mut store, "c1", 3, channels, &mut rng);
        let c2 = Conv2d::same(&mut store, "c2", channels, channels, &mut rng);
        he_init(&mut store, &c1);
        he_init(&mut store, &c2);
        Self {
            store,
            c1,
            c2,
            patch,
            channels,
            seed,
        }
    }
}

impl FeatureExtractor for ConvStubExtractor {
    fn id(&self) -> String {
        format!("conv-stub/c{}/p{}/s{}", self.channels, self.patch, self.seed)
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn extract(&self, image: &Image) -> Result<FeatureStack> {
        let (h, w) = (image.height, image.width);
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!("image {h}×{w} is not divisible by patch {p}")));
        }
        let (x, dims) = conv_act(&self.store, &self.c1, &chw_input(image), (3, h, w), Self::SLOPE);
        let (x, (c, _, _)) = conv_act(&self.store, &self.c2, &x, dims, Self::SLOPE);
        let (gh, gw) = (h / p, w / p);
        let mut feats = vec![0.0f32; gh * gw * c];
        let inv = 1.0 / (p * p) as f32;
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    feats[((y / p) * gw + xx / p) * c + ch] += plane[y * w + xx] * inv;
                }
            }
        }
        Ok(FeatureStack {
            grid: (gh, gw),
            channels: c,
            features: feats,
            patch_size: p,
            extractor_id: self.id(),
        })
    }
}

/// Strided ReLU convolutions: one stride-1 stem then `log2(patch)`
/// stride-2 stages, so each output cell covers one patch.
pub struct CnnExtractor {
    store: ParamStore,
    layers: Vec<Conv2d>,
    patch: usize,
    channels: usize,
    fingerprint: String,
}

impl CnnExtractor {
    const KIND: &'static str = "cnn-extractor";

    fn build(channels: usize, patch: usize, seed: u64) -> Self {
        let mut rng = util::rng_for(seed, "extractor/cnn");
        let mut store = ParamStore::new();
        let stages = patch.trailing_zeros() as usize;
        let mut layers = Vec::with_capacity(stages + 1);
        let mut c = (channels >> stages).max(8);
        layers.push(Conv2d::same(&mut store, "stem", 3, c, &mut rng));
        for i in 0..stages {
            let next = if i + 1 == stages { channels } else { (c * 2).min(channels) };
            layers.push(Conv2d::new(&mut store, &format!("stage{i}"), c, next, 3, 2, 1, &mut rng));
            c = next;
        }
        for l in &layers {
            he_init(&mut store, l);
        }
        Self {
            store,
            layers,
            patch,
            channels,
            fingerprint: String::new(),
        }
    }

    /// Random weights; for tests and for producing a weights file.
    pub fn seeded(channels: usize, patch: usize, seed: u64) -> Self {
        let mut e = Self::build(channels, patch, seed);
        e.fingerprint = format!("cnn-seeded/c{channels}/p{patch}/s{seed}");
        e
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({"kind": Self::KIND, "channels": self.channels, "patch": self.patch});
        checkpoint::save(path, &meta, &self.store).map_err(Error::from)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: m,
        };
        let (meta, stored) = checkpoint::from_bytes(&bytes).map_err(|e| bad(e.to_string()))?;
        if meta["kind"] != Self::KIND {
            return Err(bad("not a cnn extractor checkpoint".into()));
        }
        let channels = meta["channels"].as_u64().ok_or_else(|| bad("channels".into()))? as usize;
        let patch = meta["patch"].as_u64().ok_or_else(|| bad("patch".into()))? as usize;
        let mut e = Self::build(channels, patch, 0);
        e.store.load_from(&stored).map_err(|err| bad(err.to_string()))?;
        e.fingerprint = format!("cnn-file/{}", util::sha256_hex(&bytes));
        Ok(e)
    }
}

impl FeatureExtractor for CnnExtractor {
    fn id(&self) -> String {
        self.fingerprint.clone()
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn extract(&self, image: &Image) -> Result<FeatureStack> {
        let (h, w) = (image.height, image.width);
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Shape(format!(
                "image {h}×{w} is not divisible by patch {}",
                self.patch
            )));
        }
        let mut x = chw_input(image);
        let mut dims = (3, h, w);
        for l in &self.layers {
            (x, dims) = conv_act(&self.store, l, &x, dims, 0.0);
        }
        Ok(FeatureStack {
            grid: (dims.1, dims.2),
            channels: dims.0,
            features: to_channel_last(&x, dims),
            patch_size: self.patch,
            extractor_id: self.id(),
        })
    }
}

struct VitBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm vision transformer with a class token; features are the
/// last layer's patch tokens.
pub struct VitExtractor {
    store: ParamStore,
    patch_embed: Conv2d,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<VitBlock>,
    norm: LayerNorm,
    resolution: (usize, usize),
    patch: usize,
    dim: usize,
    heads: usize,
    fingerprint: String,
}

impl VitExtractor {
    const KIND: &'static str = "vit-extractor";

    fn build(resolution: (usize, usize), patch: usize, dim: usize, depth: usize, heads: usize, seed: u64) -> Self {
        let mut rng = util::rng_for(seed, "extractor/vit");
        let r = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let tokens = (resolution.0 / patch) * (resolution.1 / patch);
        let patch_embed = Conv2d::new(s, "patch_embed", 3, dim, patch, patch, 0, r);
        let cls = s.add("cls", Tensor::randn(&[dim], r).scale(0.02));
        let pos = s.add("pos", Tensor::randn(&[tokens + 1, dim], r).scale(0.02));
        let blocks = (0..depth)
            .map(|i| VitBlock {
                ln1: LayerNorm::new(s, &format!("blocks.{i}.ln1"), dim),
                attn: Attention::new(s, &format!("blocks.{i}.attn"), dim, dim, heads, r),
                ln2: LayerNorm::new(s, &format!("blocks.{i}.ln2"), dim),
                fc1: Linear::new(s, &format!("blocks.{i}.fc1"), dim, 4 * dim, true, r),
                fc2: Linear::new(s, &format!("blocks.{i}.fc2"), 4 * dim, dim, true, r),
            })
            .collect();
        let norm = LayerNorm::new(s, "norm", dim);
        Self {
            store,
            patch_embed,
            cls,
            pos,
            blocks,
            norm,
            resolution,
            patch,
            dim,
            heads,
            fingerprint: String::new(),
        }
    }

    pub fn seeded(cfg: &ExtractorConfig, resolution: (usize, usize)) -> Self {
        let mut e = Self::build(resolution, cfg.patch, cfg.channels, cfg.depth, cfg.heads, cfg.seed);
        e.fingerprint = format!(
            "vit-seeded/{resolution:?}/p{}/d{}/l{}/h{}/s{}",
            cfg.patch, cfg.channels, cfg.depth, cfg.heads, cfg.seed
        );
        e
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": Self::KIND,
            "resolution": self.resolution,
            "patch": self.patch,
            "dim": self.dim,
            "depth": self.blocks.len(),
            "heads": self.heads,
        });
        checkpoint::save(path, &meta, &self.store).map_err(Error::from)
    }

    pub fn load(path: &Path, resolution: (usize, usize)) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: m,
        };
        let (meta, stored) = checkpoint::from_bytes(&bytes).map_err(|e| bad(e.to_string()))?;
        if meta["kind"] != Self::KIND {
            return Err(bad("not a vit extractor checkpoint".into()));
        }
        let res: (usize, usize) = serde_json::from_value(meta["resolution"].clone())?;
        if res != resolution {
            return Err(bad(format!(
                "weights were built for {res:?} inputs, dataset resolution is {resolution:?}"
            )));
        }
        let field = |k: &str| meta[k].as_u64().map(|v| v as usize).ok_or_else(|| bad(k.to_string()));
        let mut e = Self::build(res, field("patch")?, field("dim")?, field("depth")?, field("heads")?, 0);
        e.store.load_from(&stored).map_err(|err| bad(err.to_string()))?;
        e.fingerprint = format!("vit-file/{}", util::sha256_hex(&bytes));
        Ok(e)
    }
}

impl FeatureExtractor for VitExtractor {
    fn id(&self) -> String {
        self.fingerprint.clone()
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn extract(&self, image: &Image) -> Result<FeatureStack> {
        if (image.height, image.width) != self.resolution {
            return Err(Error::Shape(format!(
                "vit expects {:?} images, got {}×{}",
                self.resolution, image.height, image.width
            )));
        }
        let st = &self.store;
        let mut g = Graph::new();
        let x = g.input(image.to_model_tensor());
        let x = self.patch_embed.forward(&mut g, st, x);
        let (gh, gw) = (g.shape(x)[2], g.shape(x)[3]);
        let x = g.to_tokens(x);
        let cls = g.param(st, self.cls);
        let x = g.prepend_token(x, cls);
        let pos = g.param(st, self.pos);
        let mut x = g.add_row_broadcast(x, pos);
        for b in &self.blocks {
            let h = b.ln1.forward(&mut g, st, x);
            let h = b.attn.forward(&mut g, st, h, None);
            x = g.add(x, h);
            let h = b.ln2.forward(&mut g, st, x);
            let h = b.fc1.forward(&mut g, st, h);
            let h = g.gelu(h);
            let h = b.fc2.forward(&mut g, st, h);
            x = g.add(x, h);
        }
        let x = self.norm.forward(&mut g, st, x);
        let x = g.drop_first_token(x);
        Ok(FeatureStack {
            grid: (gh, gw),
            channels: self.dim,
            features: g.value(x).data().to_vec(),
            patch_size: self.patch,
            extractor_id: self.id(),
        })
    }
}
