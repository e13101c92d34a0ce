//! Convolutional VAE mapping `H × W × 3` images to `H/f × W/f × d` latents.
//!
//! Inference uses the posterior mean, so encode and decode are pure
//! functions of the parameters.

mod generic;

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vlmdiff_nn::{checkpoint, Adam, AdamConfig, Conv2d, Graph, GroupNorm, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::{to_model_batch, Image};
use crate::nets::{ResBlock, GROUPS};
use crate::util;

pub use generic::generic_corpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    /// Spatial downsampling factor; a power of two.
    pub factor: usize,
    pub latent_dim: usize,
    /// Channel width per resolution level; `log2(factor)` entries.
    pub channels: Vec<usize>,
    pub kl_weight: f64,
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub save_every: usize,
    /// Train on the dataset after generic pretraining. `false` keeps the
    /// generic autoencoder frozen.
    pub finetune: bool,
    pub generic_images: usize,
    pub generic_epochs: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            factor: 8,
            latent_dim: 4,
            channels: vec![16, 32, 64],
            kl_weight: 1e-6,
            lr: 4.5e-5,
            epochs: 100,
            batch: 32,
            save_every: 0,
            finetune: true,
            generic_images: 256,
            generic_epochs: 20,
        }
    }
}

impl AeConfig {
    pub fn validate(&self, resolution: (usize, usize)) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.factor.is_power_of_two() || self.factor < 2 {
            return bad(format!("ae.factor must be a power of two >= 2, got {}", self.factor));
        }
        let levels = self.factor.trailing_zeros() as usize;
        if self.channels.len() != levels {
            return bad(format!(
                "ae.channels needs {levels} entries for factor {}, got {}",
                self.factor,
                self.channels.len()
            ));
        }
        if self.channels.iter().any(|&c| c == 0 || c % GROUPS.min(c) != 0) {
            return bad(format!("ae.channels must be positive multiples of {GROUPS}"));
        }
        if !resolution.0.is_multiple_of(self.factor) || !resolution.1.is_multiple_of(self.factor) {
            return bad(format!(
                "resolution {resolution:?} is not divisible by ae.factor {}",
                self.factor
            ));
        }
        if self.latent_dim == 0 || self.batch == 0 {
            return bad("ae.latent_dim and ae.batch must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.kl_weight >= 0.0) {
            return bad("ae.lr must be > 0 and ae.kl_weight >= 0".into());
        }
        Ok(())
    }
}

/// Shape-defining part of the configuration, stored with checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeArch {
    pub resolution: (usize, usize),
    pub factor: usize,
    pub latent_dim: usize,
    pub channels: Vec<usize>,
}

impl AeArch {
    pub fn from_config(cfg: &AeConfig, resolution: (usize, usize)) -> Self {
        Self {
            resolution,
            factor: cfg.factor,
            latent_dim: cfg.latent_dim,
            channels: cfg.channels.clone(),
        }
    }

    pub fn latent_hw(&self) -> (usize, usize) {
        (self.resolution.0 / self.factor, self.resolution.1 / self.factor)
    }
}

/// Latent code stored channel-first: `values` has shape `[d, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: Tensor,
    pub source_resolution: (usize, usize),
}

impl LatentCode {
    /// `(h, w, d)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[1], s[2], s[0])
    }
}

pub struct Autoencoder {
    pub arch: AeArch,
    pub store: ParamStore,
    enc_in: Conv2d,
    enc_levels: Vec<(ResBlock, Conv2d)>,
    enc_mid: ResBlock,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: ResBlock,
    dec_levels: Vec<(Conv2d, ResBlock)>,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
}

impl Autoencoder {
    pub fn new(arch: AeArch, seed: u64) -> Self {
        let mut rng = util::rng_for(seed, "ae/init");
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let ch = &arch.channels;
        let last = *ch.last().unwrap();
        let d = arch.latent_dim;

        let enc_in = Conv2d::same(s, "enc.in", 3, ch[0], rng);
        let mut prev = ch[0];
        let enc_levels = ch
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let rb = ResBlock::new(s, &format!("enc.{i}.res"), prev, c, None, rng);
                let down = Conv2d::new(s, &format!("enc.{i}.down"), c, c, 3, 2, 1, rng);
                prev = c;
                (rb, down)
            })
            .collect();
        let enc_mid = ResBlock::new(s, "enc.mid", last, last, None, rng);
        let enc_norm = GroupNorm::new(s, "enc.norm", last, GROUPS);
        let enc_out = Conv2d::same(s, "enc.out", last, 2 * d, rng);

        let dec_in = Conv2d::same(s, "dec.in", d, last, rng);
        let dec_mid = ResBlock::new(s, "dec.mid", last, last, None, rng);
        let mut prev = last;
        let dec_levels = (0..ch.len())
            .rev()
            .map(|i| {
                let up = Conv2d::same(s, &format!("dec.{i}.up"), prev, ch[i], rng);
                let rb = ResBlock::new(s, &format!("dec.{i}.res"), ch[i], ch[i], None, rng);
                prev = ch[i];
                (up, rb)
            })
            .collect();
        let dec_norm = GroupNorm::new(s, "dec.norm", ch[0], GROUPS);
        let dec_out = Conv2d::same(s, "dec.out", ch[0], 3, rng);
        Self {
            arch,
            store,
            enc_in,
            enc_levels,
            enc_mid,
            enc_norm,
            enc_out,
            dec_in,
            dec_mid,
            dec_levels,
            dec_norm,
            dec_out,
        }
    }

    /// Returns `(mean, logvar)`, each `[N, d, h, w]`.
    fn encode_graph(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let st = &self.store;
        let mut h = self.enc_in.forward(g, st, x);
        for (rb, down) in &self.enc_levels {
            h = rb.forward(g, st, h, None);
            h = down.forward(g, st, h);
        }
        h = self.enc_mid.forward(g, st, h, None);
        h = self.enc_norm.forward(g, st, h);
        h = g.silu(h);
        let moments = self.enc_out.forward(g, st, h);
        let d = self.arch.latent_dim;
        (g.slice_channels(moments, 0, d), g.slice_channels(moments, d, d))
    }

    fn decode_graph(&self, g: &mut Graph, z: Var) -> Var {
        let st = &self.store;
        let mut h = self.dec_in.forward(g, st, z);
        h = self.dec_mid.forward(g, st, h, None);
        for (up, rb) in &self.dec_levels {
            h = g.upsample2x(h);
            h = up.forward(g, st, h);
            h = rb.forward(g, st, h, None);
        }
        h = self.dec_norm.forward(g, st, h);
        h = g.silu(h);
        self.dec_out.forward(g, st, h)
    }

    /// Posterior means for a model-space batch `[N, 3, H, W]`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.nchw();
        if c != 3 || (h, w) != self.arch.resolution {
            return Err(Error::Shape(format!(
                "autoencoder expects 3×{:?} input, got {c}×{:?}",
                self.arch.resolution,
                (h, w)
            )));
        }
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (mean, _) = self.encode_graph(&mut g, xv);
        Ok(g.value(mean).clone())
    }

    /// Model-space decode of `[N, d, h, w]` latents (unclamped).
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = z.nchw();
        if c != self.arch.latent_dim || (h, w) != self.arch.latent_hw() {
            return Err(Error::Shape(format!(
                "decoder expects {}×{:?} latents, got {c}×{:?}",
                self.arch.latent_dim,
                self.arch.latent_hw(),
                (h, w)
            )));
        }
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let out = self.decode_graph(&mut g, zv);
        Ok(g.value(out).clone())
    }

    pub fn encode_image(&self, image: &Image) -> Result<LatentCode> {
        Ok(self.encode_batch(&[image])?.pop().unwrap())
    }

    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<LatentCode>> {
        for im in images {
            if (im.height, im.width) != self.arch.resolution {
                return Err(Error::Shape(format!(
                    "image is {}×{}, autoencoder was built for {:?}",
                    im.height, im.width, self.arch.resolution
                )));
            }
        }
        let z = self.encode_tensor(&to_model_batch(images))?;
        let (_, d, h, w) = z.nchw();
        Ok((0..images.len())
            .map(|i| LatentCode {
                values: z.slice_batch(i).reshape(&[d, h, w]).unwrap(),
                source_resolution: self.arch.resolution,
            })
            .collect())
    }

    pub fn decode_latent(&self, z: &LatentCode) -> Result<Image> {
        let s = z.values.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("latent must be [d, h, w], got {s:?}")));
        }
        let t = z.values.clone().reshape(&[1, s[0], s[1], s[2]])?;
        Ok(Image::from_model_tensor(&self.decode_tensor(&t)?, 0))
    }

    /// One training step's loss graph. Both terms are per-image sums
    /// divided by the number of image elements.
    fn loss_graph(&self, g: &mut Graph, x: &Tensor, eps: &Tensor, kl_weight: f64) -> (Var, Var, Var) {
        let xv = g.input(x.clone());
        let (mean, logvar) = self.encode_graph(g, xv);
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let e = g.input(eps.clone());
        let noise = g.mul(std, e);
        let z = g.add(mean, noise);
        let recon = self.decode_graph(g, z);
        let rec = g.mse(recon, xv);
        let m2 = g.mul(mean, mean);
        let var = g.exp(logvar);
        let kl = g.add(m2, var);
        let kl = g.sub(kl, logvar);
        let kl = g.sum(kl);
        let kl = g.scale(kl, 0.5 / x.numel() as f32);
        let weighted = g.scale(kl, kl_weight as f32);
        let loss = g.add(rec, weighted);
        (loss, rec, kl)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeEpoch {
    pub epoch: usize,
    pub rec: f64,
    /// KL divergence per image element (unweighted).
    pub kl: f64,
    pub loss: f64,
}

pub struct AutoencoderCheckpoint {
    pub model: Autoencoder,
    pub config_hash: String,
    pub epoch: usize,
    pub finetuned: bool,
    pub history: Vec<AeEpoch>,
}

impl AutoencoderCheckpoint {
    const KIND: &'static str = "autoencoder";

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": Self::KIND,
            "arch": self.model.arch,
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "finetuned": self.finetuned,
            "history": self.history,
        });
        checkpoint::save(path, &meta, &self.model.store).map_err(Error::from)
    }

    /// Loads a checkpoint, rejecting it when `expected_hash` is given and
    /// differs from the stored configuration hash.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let ck = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let (meta, stored) = checkpoint::load(path).map_err(|e| ck(e.to_string()))?;
        if meta["kind"] != Self::KIND {
            return Err(ck("not an autoencoder checkpoint".into()));
        }
        let arch: AeArch = serde_json::from_value(meta["arch"].clone())?;
        let config_hash = meta["config_hash"].as_str().unwrap_or_default().to_string();
        if let Some(h) = expected_hash {
            if h != config_hash {
                return Err(ck(format!(
                    "config hash {config_hash} does not match the current configuration ({h})"
                )));
            }
        }
        let mut model = Autoencoder::new(arch, 0);
        model.store.load_from(&stored).map_err(|e| ck(e.to_string()))?;
        Ok(Self {
            model,
            config_hash,
            epoch: meta["epoch"].as_u64().unwrap_or(0) as usize,
            finetuned: meta["finetuned"].as_bool().unwrap_or(false),
            history: serde_json::from_value(meta["history"].clone()).unwrap_or_default(),
        })
    }
}

/// Everything [`train_autoencoder`] needs besides the images.
pub struct AeTrainSpec<'a> {
    pub config: &'a AeConfig,
    pub epochs: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Marks the result as adapted to the dataset.
    pub finetuned: bool,
    /// Start from these weights instead of a fresh init.
    pub init: Option<&'a Autoencoder>,
    /// Where intermediate and final checkpoints are written.
    pub save_path: Option<&'a Path>,
}

/// Trains on `images` (normal images only) with reconstruction + KL loss.
pub fn train_autoencoder(images: &[Image], spec: AeTrainSpec<'_>) -> Result<AutoencoderCheckpoint> {
    let cfg = spec.config;
    if images.is_empty() {
        return Err(Error::Dataset("autoencoder training needs at least one image".into()));
    }
    let resolution = (images[0].height, images[0].width);
    cfg.validate(resolution)?;
    let arch = AeArch::from_config(cfg, resolution);
    let mut model = Autoencoder::new(arch.clone(), spec.seed);
    if let Some(init) = spec.init {
        if init.arch != arch {
            return Err(Error::Config(
                "initial autoencoder architecture differs from the configuration".into(),
            ));
        }
        model.store.load_from(&init.store)?;
    }
    let mut opt = Adam::new(
        &model.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng: ChaCha8Rng = util::rng_for(spec.seed, "ae/train");
    let (lh, lw) = arch.latent_hw();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(spec.epochs);
    let ckpt = |model: Autoencoder, epoch: usize, history: &[AeEpoch]| AutoencoderCheckpoint {
        model,
        config_hash: spec.config_hash.clone(),
        epoch,
        finetuned: spec.finetuned,
        history: history.to_vec(),
    };
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let (mut rec_sum, mut kl_sum, mut loss_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
            let x = to_model_batch(&batch);
            let eps = Tensor::randn(&[batch.len(), arch.latent_dim, lh, lw], &mut rng);
            let mut g = Graph::new();
            let (loss, rec, kl) = model.loss_graph(&mut g, &x, &eps, cfg.kl_weight);
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "autoencoder loss is {lv} at epoch {epoch}, step {step}; lower ae.lr"
                )));
            }
            let grads = g.backward(loss);
            opt.step(&mut model.store, &grads);
            let k = batch.len();
            rec_sum += g.value(rec).data()[0] as f64 * k as f64;
            kl_sum += g.value(kl).data()[0] as f64 * k as f64;
            loss_sum += lv * k as f64;
            n += k;
        }
        let nf = n as f64;
        // The graph omits the constant -1/2 per latent element.
        let kl_const = 0.5 * (arch.latent_dim * lh * lw) as f64 / (3 * resolution.0 * resolution.1) as f64;
        let e = AeEpoch {
            epoch,
            rec: rec_sum / nf,
            kl: kl_sum / nf - kl_const,
            loss: loss_sum / nf - cfg.kl_weight * kl_const,
        };
        log::info!(
            "ae epoch {epoch}: loss {:.6} rec {:.6} kl {:.4} (weight {})",
            e.loss,
            e.rec,
            e.kl,
            cfg.kl_weight
        );
        history.push(e);
        if let Some(p) = spec.save_path {
            if cfg.save_every > 0 && (epoch + 1) % cfg.save_every == 0 && epoch + 1 < spec.epochs {
                let tmp = ckpt(clone_model(&model), epoch + 1, &history);
                tmp.save(p)?;
            }
        }
    }
    let out = ckpt(model, spec.epochs, &history);
    if let Some(p) = spec.save_path {
        out.save(p)?;
    }
    Ok(out)
}

fn clone_model(m: &Autoencoder) -> Autoencoder {
    let mut c = Autoencoder::new(m.arch.clone(), 0);
    c.store.load_from(&m.store).expect("same architecture");
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AeConfig {
        AeConfig {
            channels: vec![8, 8, 8],
            lr: 3e-3,
            batch: 4,
            ..Default::default()
        }
    }

    fn arch64() -> AeArch {
        AeArch::from_config(&AeConfig::default(), (64, 64))
    }

    #[test]
    fn latent_shape_arithmetic() {
        let ae = Autoencoder::new(arch64(), 1);
        let z = ae.encode_image(&Image::filled(64, 64, [0.2, 0.4, 0.6])).unwrap();
        assert_eq!(z.dims(), (8, 8, 4));
        assert!(z.values.is_finite());
        let back = ae.decode_latent(&z).unwrap();
        assert_eq!((back.height, back.width), (64, 64));
        assert!(back.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn encode_is_deterministic_and_order_preserving() {
        let ae = Autoencoder::new(arch64(), 1);
        let a = Image::filled(64, 64, [0.1, 0.2, 0.3]);
        let b = Image::filled(64, 64, [0.9, 0.5, 0.1]);
        let za = ae.encode_image(&a).unwrap();
        assert_eq!(za, ae.encode_image(&a).unwrap());
        let batch = ae.encode_batch(&[&b, &a]).unwrap();
        assert!(batch[1].values.max_abs_diff(&za.values) < 1e-5);
        assert!(batch[0].values.max_abs_diff(&ae.encode_image(&b).unwrap().values) < 1e-5);
    }

    #[test]
    fn zero_latent_decodes_finite() {
        let ae = Autoencoder::new(arch64(), 2);
        let z = LatentCode {
            values: Tensor::zeros(&[4, 8, 8]),
            source_resolution: (64, 64),
        };
        let im = ae.decode_latent(&z).unwrap();
        assert!(im.data.iter().all(|v| v.is_finite()));
        assert_eq!(im, ae.decode_latent(&z).unwrap());
    }

    #[test]
    fn shape_errors() {
        let ae = Autoencoder::new(arch64(), 1);
        assert!(matches!(ae.encode_image(&Image::filled(32, 32, [0.0; 3])), Err(Error::Shape(_))));
        let z = LatentCode {
            values: Tensor::zeros(&[4, 4, 4]),
            source_resolution: (32, 32),
        };
        assert!(matches!(ae.decode_latent(&z), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = AeConfig::default();
        assert!(c.validate((64, 64)).is_ok());
        assert!(c.validate((60, 64)).is_err());
        c.channels = vec![16, 32];
        assert!(c.validate((64, 64)).is_err());
        c = AeConfig {
            factor: 6,
            ..Default::default()
        };
        assert!(c.validate((64, 64)).is_err());
    }

    fn one_image() -> Image {
        let mut im = Image::filled(32, 32, [0.35, 0.35, 0.38]);
        for y in 8..24 {
            for x in 8..24 {
                im.set(y, x, [0.9, 0.2, 0.1]);
            }
        }
        im
    }

    #[test]
    fn overfits_one_image() {
        let cfg = tiny();
        let images = vec![one_image()];
        let ck = train_autoencoder(
            &images,
            AeTrainSpec {
                config: &cfg,
                epochs: 200,
                seed: 0,
                config_hash: "h".into(),
                finetuned: true,
                init: None,
                save_path: None,
            },
        )
        .unwrap();
        let h = &ck.history;
        assert_eq!(h.len(), 200);
        assert!(h.last().unwrap().rec < h[0].rec);
        assert!(h.iter().all(|e| e.loss.is_finite() && e.kl >= -1e-6));
    }

    #[test]
    fn zero_kl_weight_still_logs_kl() {
        let cfg = AeConfig {
            kl_weight: 0.0,
            ..tiny()
        };
        let ck = train_autoencoder(
            &[one_image()],
            AeTrainSpec {
                config: &cfg,
                epochs: 3,
                seed: 0,
                config_hash: "h".into(),
                finetuned: true,
                init: None,
                save_path: None,
            },
        )
        .unwrap();
        for e in &ck.history {
            assert!(e.kl > 0.0);
            assert!((e.loss - e.rec).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ae.ckpt");
        let cfg = tiny();
        let ck = train_autoencoder(
            &[one_image()],
            AeTrainSpec {
                config: &cfg,
                epochs: 2,
                seed: 3,
                config_hash: "abc".into(),
                finetuned: true,
                init: None,
                save_path: Some(&p),
            },
        )
        .unwrap();
        let loaded = AutoencoderCheckpoint::load(&p, Some("abc")).unwrap();
        assert_eq!(loaded.epoch, 2);
        assert!(loaded.finetuned);
        assert_eq!(loaded.history, ck.history);
        let im = one_image();
        assert_eq!(
            loaded.model.encode_image(&im).unwrap(),
            ck.model.encode_image(&im).unwrap()
        );
        assert!(matches!(
            AutoencoderCheckpoint::load(&p, Some("other")),
            Err(Error::Checkpoint { .. })
        ));
    }
}
