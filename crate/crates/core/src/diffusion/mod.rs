//! Latent denoising diffusion: schedule, forward noising, ε-prediction
//! training and deterministic (DDIM, η = 0) reconstruction.

mod unet;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vlmdiff_nn::{checkpoint, ema_update, Adam, AdamConfig, Graph, Tensor, Var};

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::text_encoder::{stack_conditions, truncate_caption, ConditionVector, TextEncoder};
use crate::util;

pub use unet::{UNet, UNetArch};

/// A network predicting the noise component of `z_t`.
pub trait EpsModel: Sync {
    /// `zt`: `[N, d, h, w]`; `t`: one timestep per sample; `cond`: `[N, L, D]`.
    fn predict(&self, g: &mut Graph, zt: Var, t: &[usize], cond: Var) -> Var;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("noise schedule needs T >= 1".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    #[allow(non_snake_case)]
    pub fn T(&self) -> usize {
        self.betas.len()
    }
}

pub fn build_schedule(
    kind: ScheduleKind,
    t: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::Config("diff.T must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear if t == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

fn mix(a: f64, x: &[f32], b: f64, y: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(y)
        .map(|(&x, &y)| (a * x as f64 + b * y as f64) as f32)
        .collect()
}

/// `√ᾱ_t · z + √(1 − ᾱ_t) · eps`.
pub fn forward_noise(z: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match latent {:?}",
            eps.shape(),
            z.shape()
        )));
    }
    let ab = *schedule.alpha_bars.get(t).ok_or_else(|| {
        Error::Shape(format!("timestep {t} outside [0, {})", schedule.T()))
    })?;
    Ok(Tensor::new(z.shape(), forward_noise_with(ab, z.data(), eps.data()))?)
}

/// [`forward_noise`] for an explicit `ᾱ`.
pub fn forward_noise_with(alpha_bar: f64, z: &[f32], eps: &[f32]) -> Vec<f32> {
    mix(alpha_bar.sqrt(), z, (1.0 - alpha_bar).sqrt(), eps)
}

/// Batch noising with one timestep per sample.
fn noise_batch(z: &Tensor, t: &[usize], eps: &Tensor, s: &NoiseSchedule) -> Tensor {
    let per = z.numel() / t.len();
    let mut out = Vec::with_capacity(z.numel());
    for (i, &ti) in t.iter().enumerate() {
        let r = i * per..(i + 1) * per;
        out.extend(forward_noise_with(s.alpha_bars[ti], &z.data()[r.clone()], &eps.data()[r]));
    }
    Tensor::new(z.shape(), out).unwrap()
}

/// Mean squared error between `eps` and the model's prediction at the
/// noised latents.
pub fn diffusion_loss(
    model: &dyn EpsModel,
    g: &mut Graph,
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    cond: &Tensor,
    schedule: &NoiseSchedule,
) -> Var {
    let zt = g.input(noise_batch(z0, t, eps, schedule));
    let c = g.input(cond.clone());
    let pred = model.predict(g, zt, t, c);
    let target = g.input(eps.clone());
    g.mse(pred, target)
}

/// One deterministic reverse step from `ᾱ_t` to `ᾱ_prev` given a noise
/// estimate. Returns `(z_prev, predicted z_0)`.
pub fn ddim_step(zt: &[f32], eps: &[f32], ab_t: f64, ab_prev: f64) -> (Vec<f32>, Vec<f32>) {
    let x0: Vec<f32> = zt
        .iter()
        .zip(eps)
        .map(|(&z, &e)| ((z as f64 - (1.0 - ab_t).sqrt() * e as f64) / ab_t.sqrt()) as f32)
        .collect();
    (forward_noise_with(ab_prev, &x0, eps), x0)
}

/// Zero-based timestep index where reconstruction starts.
pub fn t_start_index(t_start_frac: f64, t: usize) -> Result<usize> {
    if !(t_start_frac > 0.0 && t_start_frac <= 1.0) {
        return Err(Error::Config(format!(
            "diff.t_start_frac must be in (0, 1], got {t_start_frac}"
        )));
    }
    Ok(((t_start_frac * t as f64).ceil() as usize).clamp(1, t) - 1)
}

/// Evenly spaced, strictly decreasing timesteps from `t_start` down.
pub fn ddim_timesteps(t_start: usize, steps: usize) -> Vec<usize> {
    let steps = steps.max(1);
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| ((t_start * (steps - i)) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

/// Runs the reverse sampler on a single scaled latent `[1, d, h, w]` that
/// is already noised to `timesteps[0]`.
pub fn denoise_latent(
    model: &dyn EpsModel,
    zt: Tensor,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    timesteps: &[usize],
) -> Tensor {
    let shape = zt.shape().to_vec();
    let mut z = zt.into_data();
    for (i, &t) in timesteps.iter().enumerate() {
        let mut g = Graph::new();
        let zv = g.input(Tensor::new(&shape, z.clone()).unwrap());
        let c = g.input(cond.clone());
        let eps = model.predict(&mut g, zv, &[t], c);
        let ab_prev = timesteps.get(i + 1).map_or(1.0, |&p| schedule.alpha_bars[p]);
        z = ddim_step(&z, g.value(eps).data(), schedule.alpha_bars[t], ab_prev).0;
    }
    Tensor::new(&shape, z).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Reverse sampler steps.
    pub steps: usize,
    pub t_start_frac: f64,
    pub lr: f32,
    pub batch: usize,
    /// Optimizer steps.
    pub train_steps: usize,
    pub caption_drop_prob: f64,
    /// Condition training on captions; when false every step sees the null
    /// condition.
    pub train_conditioning: bool,
    pub channels: Vec<usize>,
    pub heads: usize,
    /// Exponential moving average of weights used for inference; 0 disables.
    pub ema_decay: f32,
}

impl Default for DiffConfig {
    fn default() -> Self {
        Self {
            t: 1000,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
            steps: 20,
            t_start_frac: 0.5,
            lr: 1e-5,
            batch: 12,
            train_steps: 2000,
            caption_drop_prob: 0.1,
            train_conditioning: true,
            channels: vec![32, 64],
            heads: 4,
            ema_decay: 0.0,
        }
    }
}

impl DiffConfig {
    pub fn validate(&self) -> Result<()> {
        build_schedule(self.schedule, self.t, self.beta_start, self.beta_end)?;
        t_start_index(self.t_start_frac, self.t)?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.steps == 0 {
            return bad("diff.steps must be >= 1");
        }
        if self.batch == 0 {
            return bad("diff.batch must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.caption_drop_prob) {
            return bad("diff.caption_drop_prob must be in [0, 1]");
        }
        if !(self.lr > 0.0) {
            return bad("diff.lr must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("diff.ema_decay must be in [0, 1)");
        }
        if self.heads == 0 {
            return bad("diff.heads must be >= 1");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.schedule, self.t, self.beta_start, self.beta_end)
    }
}

pub struct DenoiserCheckpoint {
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    /// Multiplies autoencoder latents before diffusion.
    pub latent_scale: f32,
    pub config_hash: String,
    pub encoder_fingerprint: String,
    pub conditioned: bool,
    pub loss_history: Vec<f32>,
}

impl DenoiserCheckpoint {
    const KIND: &'static str = "denoiser";

    pub fn condition_dim(&self) -> (usize, usize) {
        self.unet.arch.condition
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": Self::KIND,
            "arch": self.unet.arch,
            "betas": self.schedule.betas,
            "latent_scale": self.latent_scale,
            "config_hash": self.config_hash,
            "encoder_fingerprint": self.encoder_fingerprint,
            "conditioned": self.conditioned,
            "loss_history": self.loss_history,
        });
        checkpoint::save(path, &meta, &self.unet.store).map_err(Error::from)
    }

    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let ck = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let (meta, stored) = checkpoint::load(path).map_err(|e| ck(e.to_string()))?;
        if meta["kind"] != Self::KIND {
            return Err(ck("not a denoiser checkpoint".into()));
        }
        let config_hash = meta["config_hash"].as_str().unwrap_or_default().to_string();
        if let Some(h) = expected_hash {
            if h != config_hash {
                return Err(ck(format!(
                    "config hash {config_hash} does not match the current configuration ({h})"
                )));
            }
        }
        let arch: UNetArch = serde_json::from_value(meta["arch"].clone())?;
        let betas: Vec<f64> = serde_json::from_value(meta["betas"].clone())?;
        let mut unet = UNet::new(arch, 0);
        unet.store.load_from(&stored).map_err(|e| ck(e.to_string()))?;
        Ok(Self {
            unet,
            schedule: NoiseSchedule::from_betas(betas)?,
            latent_scale: meta["latent_scale"].as_f64().unwrap_or(1.0) as f32,
            config_hash,
            encoder_fingerprint: meta["encoder_fingerprint"].as_str().unwrap_or_default().to_string(),
            conditioned: meta["conditioned"].as_bool().unwrap_or(false),
            loss_history: serde_json::from_value(meta["loss_history"].clone()).unwrap_or_default(),
        })
    }

    /// Loss history as `step,loss` CSV.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.loss_history.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }

    /// Reconstructs `image`: encode, noise to the start step with a draw
    /// seeded by `noise_seed`, run the reverse sampler, decode.
    pub fn reconstruct(
        &self,
        image: &Image,
        ae: &Autoencoder,
        condition: &ConditionVector,
        t_start_frac: f64,
        steps: usize,
        noise_seed: u64,
    ) -> Result<Image> {
        if (condition.slots, condition.dim) != self.condition_dim() {
            return Err(Error::Shape(format!(
                "condition is {}×{}, denoiser expects {:?}",
                condition.slots,
                condition.dim,
                self.condition_dim()
            )));
        }
        if ae.arch.latent_dim != self.unet.arch.latent_dim {
            return Err(Error::Shape("autoencoder and denoiser latent widths differ".into()));
        }
        if steps == 0 {
            return Err(Error::Config("diff.steps must be >= 1".into()));
        }
        let t0 = t_start_index(t_start_frac, self.schedule.T())?;
        let z = ae.encode_image(image)?;
        let (d, h, w) = (z.values.dim(0), z.values.dim(1), z.values.dim(2));
        let z0 = z.values.scale(self.latent_scale).reshape(&[1, d, h, w])?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let eps = Tensor::randn(z0.shape(), &mut rng);
        let zt = forward_noise(&z0, t0, &eps, &self.schedule)?;
        let ts = ddim_timesteps(t0, steps);
        let out = denoise_latent(&self.unet, zt, &condition.to_tensor(), &self.schedule, &ts);
        let decoded = ae.decode_tensor(&out.scale(1.0 / self.latent_scale))?;
        Ok(Image::from_model_tensor(&decoded, 0))
    }
}

/// Per-image training inputs for the denoiser.
pub struct DenoiserData {
    /// Unscaled autoencoder latents, `[N, d, h, w]`.
    pub latents: Tensor,
    /// Caption per latent; `None` when none is available.
    pub captions: Vec<Option<String>>,
    /// Image path per latent, for diagnostics.
    pub names: Vec<PathBuf>,
}

pub struct DiffTrainSpec<'a> {
    pub config: &'a DiffConfig,
    pub encoder: &'a dyn TextEncoder,
    pub seed: u64,
    pub config_hash: String,
}

/// `1 / std` of all latent values.
pub fn latent_scale(latents: &Tensor) -> f32 {
    let n = latents.numel() as f64;
    let mean = latents.sum() / n;
    let var = latents.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        (1.0 / var.sqrt()) as f32
    } else {
        1.0
    }
}

/// Trains a single denoiser over every latent in `data`.
pub fn train_denoiser(data: &DenoiserData, spec: DiffTrainSpec<'_>) -> Result<DenoiserCheckpoint> {
    let cfg = spec.config;
    cfg.validate()?;
    let (n, d, h, w) = data.latents.nchw();
    if n == 0 || data.captions.len() != n || data.names.len() != n {
        return Err(Error::Dataset("denoiser training needs one caption slot per latent".into()));
    }
    let enc = spec.encoder;
    let null = enc.null_condition();
    let mut conds: Vec<ConditionVector> = Vec::with_capacity(n);
    for (cap, name) in data.captions.iter().zip(&data.names) {
        conds.push(match (cfg.train_conditioning, cap) {
            (false, _) => null.clone(),
            (true, Some(c)) => enc.encode(truncate_caption(c, enc.max_chars()))?,
            (true, None) if cfg.caption_drop_prob > 0.0 => {
                log::warn!("{}: no caption, training it unconditioned", name.display());
                null.clone()
            }
            (true, None) => return Err(Error::MissingCaption(name.clone())),
        });
    }

    let schedule = cfg.schedule()?;
    let arch = UNetArch {
        latent_dim: d,
        channels: cfg.channels.clone(),
        heads: cfg.heads,
        condition: (enc.slots(), enc.dim()),
    };
    arch.validate((h, w))?;
    let scale = latent_scale(&data.latents);
    let z = data.latents.clone().scale(scale);
    let mut unet = UNet::new(arch, spec.seed);
    let mut ema = (cfg.ema_decay > 0.0).then(|| unet.store.clone());
    let mut opt = Adam::new(
        &unet.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    // Separate streams so conditioned and unconditioned runs see the same
    // batches, timesteps and noise.
    let mut batch_rng = util::rng_for(spec.seed, "diff/batch");
    let mut noise_rng = util::rng_for(spec.seed, "diff/noise");
    let mut drop_rng = util::rng_for(spec.seed, "diff/drop");
    let per = d * h * w;
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.train_steps);
    for step in 0..cfg.train_steps {
        let mut ids = Vec::with_capacity(cfg.batch);
        while ids.len() < cfg.batch {
            if order.is_empty() {
                order = (0..n).collect();
                order.shuffle(&mut batch_rng);
            }
            ids.push(order.pop().unwrap());
        }
        let mut zb = Vec::with_capacity(cfg.batch * per);
        for &i in &ids {
            zb.extend_from_slice(&z.data()[i * per..(i + 1) * per]);
        }
        let zb = Tensor::new(&[cfg.batch, d, h, w], zb)?;
        let t: Vec<usize> = (0..cfg.batch).map(|_| noise_rng.random_range(0..schedule.T())).collect();
        let eps = Tensor::randn(zb.shape(), &mut noise_rng);
        let cb: Vec<&ConditionVector> = ids
            .iter()
            .map(|&i| {
                let dropped = drop_rng.random::<f64>() < cfg.caption_drop_prob;
                if dropped { &null } else { &conds[i] }
            })
            .collect();
        let cond = stack_conditions(&cb);
        let mut g = Graph::new();
        let loss = diffusion_loss(&unet, &mut g, &zb, &t, &eps, &cond, &schedule);
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged(format!(
                "denoiser loss is {lv} at step {step}; lower diff.lr"
            )));
        }
        let grads = g.backward(loss);
        opt.step(&mut unet.store, &grads);
        if let Some(e) = ema.as_mut() {
            ema_update(e, &unet.store, cfg.ema_decay);
        }
        history.push(lv);
        if step % 100 == 0 || step + 1 == cfg.train_steps {
            let k = history.len().min(100);
            let recent = history[history.len() - k..].iter().sum::<f32>() / k as f32;
            log::info!("diffusion step {step}: loss {lv:.4} (mean of last {k}: {recent:.4})");
        }
    }
    if let Some(e) = ema {
        unet.store = e;
    }
    Ok(DenoiserCheckpoint {
        unet,
        schedule,
        latent_scale: scale,
        config_hash: spec.config_hash,
        encoder_fingerprint: enc.fingerprint(),
        conditioned: cfg.train_conditioning,
        loss_history: history,
    })
}

/// Mean of the last `frac` of a loss history.
pub fn tail_mean(history: &[f32], frac: f64) -> f64 {
    let k = ((history.len() as f64 * frac).ceil() as usize).clamp(1, history.len().max(1));
    let tail = &history[history.len().saturating_sub(k)..];
    tail.iter().map(|&v| v as f64).sum::<f64>() / tail.len().max(1) as f64
}
