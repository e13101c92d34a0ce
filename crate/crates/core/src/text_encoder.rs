//! Caption → condition vector `L × D`.
//!
//! The empty string is the null embedding; unconditional reconstruction
//! conditions on it so the denoiser has a single code path.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vlmdiff_nn::{checkpoint, Attention, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::util::{self, fnv1a};

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    pub slots: usize,
    pub dim: usize,
    /// Row-major `slots × dim`.
    pub values: Vec<f32>,
    pub null_flag: bool,
}

impl ConditionVector {
    /// `[1, slots, dim]` tensor for the denoiser.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.slots, self.dim], self.values.clone()).expect("condition shape")
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Stacks conditions into `[B, L, D]`.
pub fn stack_conditions(conds: &[&ConditionVector]) -> Tensor {
    let (l, d) = (conds[0].slots, conds[0].dim);
    let mut data = Vec::with_capacity(conds.len() * l * d);
    for c in conds {
        assert_eq!((c.slots, c.dim), (l, d), "mixed condition shapes");
        data.extend_from_slice(&c.values);
    }
    Tensor::new(&[conds.len(), l, d], data).expect("condition batch")
}

pub trait TextEncoder: Send + Sync {
    fn slots(&self) -> usize;
    fn dim(&self) -> usize;
    fn max_chars(&self) -> usize;
    /// Identifies the encoder and its weights; part of downstream hashes.
    fn fingerprint(&self) -> String;
    fn embed(&self, caption: &str) -> Vec<f32>;

    fn encode(&self, caption: &str) -> Result<ConditionVector> {
        let len = caption.chars().count();
        if len > self.max_chars() {
            return Err(Error::CaptionTooLong {
                len,
                max: self.max_chars(),
            });
        }
        Ok(ConditionVector {
            slots: self.slots(),
            dim: self.dim(),
            values: self.embed(caption),
            null_flag: caption.is_empty(),
        })
    }

    fn null_condition(&self) -> ConditionVector {
        self.encode("").expect("empty caption is always in range")
    }
}

/// Cuts a caption to at most `max` characters on a char boundary.
pub fn truncate_caption(caption: &str, max: usize) -> &str {
    match caption.char_indices().nth(max) {
        Some((i, _)) => &caption[..i],
        None => caption,
    }
}

/// Lower-cased alphanumeric words.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Hash,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backend: Backend,
    pub dim: usize,
    pub slots: usize,
    pub max_chars: usize,
    /// Transformer weights; a seeded random init is used when absent.
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Hash,
            dim: 32,
            slots: 16,
            max_chars: 512,
            weights: None,
            seed: 0,
            layers: 2,
            heads: 4,
            vocab: 8192,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return Err(Error::Config("encoder.dim must be even and >= 2".into()));
        }
        if self.slots < 2 {
            return Err(Error::Config("encoder.slots must be >= 2".into()));
        }
        if self.max_chars == 0 {
            return Err(Error::Config("encoder.max_chars must be positive".into()));
        }
        if self.backend == Backend::Transformer {
            if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
                return Err(Error::Config("encoder.dim must be divisible by encoder.heads".into()));
            }
            if self.vocab < 2 {
                return Err(Error::Config("encoder.vocab must be >= 2".into()));
            }
        }
        Ok(())
    }
}

pub fn build_encoder(cfg: &EncoderConfig) -> Result<Box<dyn TextEncoder>> {
    cfg.validate()?;
    Ok(match cfg.backend {
        Backend::Hash => Box::new(HashEncoder::new(cfg.slots, cfg.dim, cfg.max_chars)),
        Backend::Transformer => Box::new(match &cfg.weights {
            Some(p) => TransformerEncoder::load(p, cfg.max_chars)?,
            None => TransformerEncoder::seeded(cfg),
        }),
    })
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn positional(pos: usize, dim: usize) -> impl Iterator<Item = f32> {
    (0..dim).map(move |j| {
        let i = (j / 2) as f64;
        let a = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
        (if j % 2 == 0 { a.sin() } else { a.cos() }) as f32
    })
}

/// Offline encoder: each token hashes to a fixed sinusoidal code.
///
/// Slot 0 holds the mean code of all tokens, slots `1..L` the first `L-1`
/// tokens in order, and the rest a padding code. Every slot also carries a
/// positional code.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    slots: usize,
    dim: usize,
    max_chars: usize,
}

impl HashEncoder {
    const PAD: &'static str = "\u{0}pad";
    const POS_SCALE: f32 = 0.5;

    pub fn new(slots: usize, dim: usize, max_chars: usize) -> Self {
        Self {
            slots,
            dim,
            max_chars,
        }
    }

    fn token_code(&self, token: &str) -> Vec<f32> {
        let h = fnv1a(token.as_bytes());
        (0..self.dim as u64)
            .map(|j| {
                let u = splitmix(h ^ splitmix(j)) as f64 / u64::MAX as f64;
                (std::f64::consts::TAU * u).sin() as f32
            })
            .collect()
    }
}

impl TextEncoder for HashEncoder {
    fn slots(&self) -> usize {
        self.slots
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn max_chars(&self) -> usize {
        self.max_chars
    }
    fn fingerprint(&self) -> String {
        format!("hash-v1/{}x{}/{}", self.slots, self.dim, self.max_chars)
    }

    fn embed(&self, caption: &str) -> Vec<f32> {
        let codes: Vec<Vec<f32>> = tokenize(caption).iter().map(|t| self.token_code(t)).collect();
        let pad = self.token_code(Self::PAD);
        let pooled = if codes.is_empty() {
            pad.clone()
        } else {
            (0..self.dim)
                .map(|j| codes.iter().map(|c| c[j]).sum::<f32>() / codes.len() as f32)
                .collect()
        };
        let mut out = Vec::with_capacity(self.slots * self.dim);
        for s in 0..self.slots {
            let code = match s {
                0 => &pooled,
                _ => codes.get(s - 1).unwrap_or(&pad),
            };
            out.extend(
                code.iter()
                    .zip(positional(s, self.dim))
                    .map(|(c, p)| c + Self::POS_SCALE * p),
            );
        }
        out
    }
}

struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Small pre-norm transformer over hashed word tokens. Weights come from a
/// checkpoint or a seeded init; it is never trained here.
pub struct TransformerEncoder {
    store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    slots: usize,
    dim: usize,
    vocab: usize,
    max_chars: usize,
    fingerprint: String,
}

impl TransformerEncoder {
    const KIND: &'static str = "text-transformer";

    fn build(slots: usize, dim: usize, vocab: usize, layers: usize, heads: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tok_emb = store.add("tok_emb", Tensor::randn(&[vocab, dim], &mut rng));
        let pos_emb = store.add("pos_emb", Tensor::randn(&[slots, dim], &mut rng).scale(0.1));
        let blocks = (0..layers)
            .map(|i| Block {
                ln1: LayerNorm::new(&mut store, &format!("blocks.{i}.ln1"), dim),
                attn: Attention::new(&mut store, &format!("blocks.{i}.attn"), dim, dim, heads, &mut rng),
                ln2: LayerNorm::new(&mut store, &format!("blocks.{i}.ln2"), dim),
                fc1: Linear::new(&mut store, &format!("blocks.{i}.fc1"), dim, 2 * dim, true, &mut rng),
                fc2: Linear::new(&mut store, &format!("blocks.{i}.fc2"), 2 * dim, dim, true, &mut rng),
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", dim);
        Self {
            store,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            slots,
            dim,
            vocab,
            max_chars: 0,
            fingerprint: String::new(),
        }
    }

    pub fn seeded(cfg: &EncoderConfig) -> Self {
        let mut e = Self::build(cfg.slots, cfg.dim, cfg.vocab, cfg.layers, cfg.heads, cfg.seed);
        e.max_chars = cfg.max_chars;
        e.fingerprint = format!(
            "transformer-seeded/{}x{}/v{}/l{}/h{}/s{}",
            cfg.slots, cfg.dim, cfg.vocab, cfg.layers, cfg.heads, cfg.seed
        );
        e
    }

    pub fn load(path: &std::path::Path, max_chars: usize) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::ExtractorUnavailable(format!(
                "text encoder weights {} not found",
                path.display()
            )));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (meta, stored) = checkpoint::from_bytes(&bytes).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let bad = |msg: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if meta["kind"] != Self::KIND {
            return Err(bad("not a text-transformer checkpoint"));
        }
        let field = |k: &str| meta[k].as_u64().map(|v| v as usize).ok_or_else(|| bad(k));
        let mut e = Self::build(
            field("slots")?,
            field("dim")?,
            field("vocab")?,
            field("layers")?,
            field("heads")?,
            0,
        );
        e.store.load_from(&stored).map_err(|err| bad(&err.to_string()))?;
        e.max_chars = max_chars;
        e.fingerprint = format!("transformer-file/{}", util::sha256_hex(&bytes));
        Ok(e)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": Self::KIND,
            "slots": self.slots,
            "dim": self.dim,
            "vocab": self.vocab,
            "layers": self.blocks.len(),
            "heads": self.blocks.first().map_or(1, |b| b.attn.heads),
        });
        checkpoint::save(path, &meta, &self.store).map_err(Error::from)
    }

    fn token_ids(&self, caption: &str) -> Vec<usize> {
        let mut ids = vec![0usize];
        ids.extend(
            tokenize(caption)
                .iter()
                .take(self.slots - 1)
                .map(|t| 2 + (fnv1a(t.as_bytes()) % (self.vocab as u64 - 2)) as usize),
        );
        ids.resize(self.slots, 1);
        ids
    }
}

impl TextEncoder for TransformerEncoder {
    fn slots(&self) -> usize {
        self.slots
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn max_chars(&self) -> usize {
        self.max_chars
    }
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn embed(&self, caption: &str) -> Vec<f32> {
        let (l, d) = (self.slots, self.dim);
        let tok = self.store.get(self.tok_emb).data();
        let pos = self.store.get(self.pos_emb).data();
        let mut x0 = Vec::with_capacity(l * d);
        for (s, id) in self.token_ids(caption).into_iter().enumerate() {
            x0.extend((0..d).map(|j| tok[id * d + j] + pos[s * d + j]));
        }
        let mut g = Graph::new();
        let mut x = g.input(Tensor::new(&[1, l, d], x0).expect("token shape"));
        for b in &self.blocks {
            let h = b.ln1.forward(&mut g, &self.store, x);
            let h = b.attn.forward(&mut g, &self.store, h, None);
            x = g.add(x, h);
            let h = b.ln2.forward(&mut g, &self.store, x);
            let h = b.fc1.forward(&mut g, &self.store, h);
            let h = g.gelu(h);
            let h = b.fc2.forward(&mut g, &self.store, h);
            x = g.add(x, h);
        }
        let y = self.ln_f.forward(&mut g, &self.store, x);
        g.value(y).data().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoders() -> Vec<Box<dyn TextEncoder>> {
        let mut t = EncoderConfig::default();
        t.backend = Backend::Transformer;
        vec![
            build_encoder(&EncoderConfig::default()).unwrap(),
            build_encoder(&t).unwrap(),
        ]
    }

    #[test]
    fn empty_string_is_null() {
        for e in encoders() {
            let n = e.encode("").unwrap();
            assert!(n.null_flag);
            assert_eq!(n, e.null_condition());
            assert_eq!((n.slots, n.dim), (16, 32));
            assert_eq!(n.values.len(), 16 * 32);
            assert!(n.is_finite());
            assert!(n.values.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn deterministic_and_discriminative() {
        for e in encoders() {
            let a = e.encode("a circle of color red on plain background").unwrap();
            let b = e.encode("a circle of color red on plain background").unwrap();
            let c = e.encode("a square of color red on plain background").unwrap();
            assert_eq!(a.values, b.values);
            assert!(!a.null_flag);
            assert!(a.values.iter().zip(&c.values).any(|(x, y)| x != y));
            assert_ne!(a.values, e.null_condition().values);
        }
    }

    #[test]
    fn over_length_is_rejected() {
        let e = HashEncoder::new(4, 8, 10);
        assert!(e.encode("0123456789").is_ok());
        let err = e.encode("0123456789x").unwrap_err();
        assert!(matches!(err, Error::CaptionTooLong { len: 11, max: 10 }));
        assert!(err.to_string().contains("truncate"));
        assert!(e.encode(truncate_caption("0123456789x", 10)).is_ok());
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        assert_eq!(truncate_caption("héllo", 2), "hé");
        assert_eq!(truncate_caption("abc", 10), "abc");
    }

    #[test]
    fn many_tokens_fill_every_slot() {
        let e = HashEncoder::new(4, 8, 512);
        let v = e.encode("one two three four five six").unwrap();
        assert_eq!(v.values.len(), 32);
        assert!(v.is_finite());
    }

    #[test]
    fn transformer_weights_roundtrip() {
        let mut cfg = EncoderConfig::default();
        cfg.backend = Backend::Transformer;
        cfg.seed = 7;
        let e = TransformerEncoder::seeded(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("te.ckpt");
        e.save(&p).unwrap();
        cfg.weights = Some(p);
        let loaded = build_encoder(&cfg).unwrap();
        assert_eq!(
            loaded.encode("a red circle").unwrap().values,
            e.encode("a red circle").unwrap().values
        );
        cfg.weights = Some(dir.path().join("missing.ckpt"));
        assert!(matches!(build_encoder(&cfg), Err(Error::ExtractorUnavailable(_))));
    }
}
