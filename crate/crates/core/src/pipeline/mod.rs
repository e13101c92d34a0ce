//! The stages behind each subcommand.
//!
//! Every stage writes under `<output_dir>/<stage>/<key>/`, where `key`
//! hashes the configuration that determines the stage's output and the keys
//! of the stages it consumes. An existing stage directory is reused. Each
//! command appends one JSON line to `<output_dir>/run.log`.

mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::Serialize;
use serde_json::json;
use vlmdiff_nn::{exec, Tensor};

use crate::autoencoder::{generic_corpus, train_autoencoder, AeTrainSpec, AutoencoderCheckpoint};
use crate::captioner::{
    caption_dataset, CaptionCache, CaptionProvider, CaptionStats, CommandProvider, HttpProvider,
    StubProvider,
};
use crate::config::{ProviderKind, RunConfig};
use crate::dataset::{scan_industrial_layout, synthesize_shapes_dataset, DatasetIndex, Label, Split};
use crate::diffusion::{tail_mean, train_denoiser, DenoiserCheckpoint, DenoiserData, DiffTrainSpec};
use crate::error::{Error, Result};
use crate::metrics::{amap_path, evaluate, EvalReport};
use crate::segmentation::{amap_to_bytes, amap_to_png, anomaly_map, build_extractor};
use crate::text_encoder::{build_encoder, truncate_caption};
use crate::util;

pub use report::contact_sheet;

pub const RUN_LOG: &str = "run.log";
pub const CAPTIONS: &str = "captions.jsonl";

/// What a stage produced.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub key: String,
    pub dir: PathBuf,
    /// `false` when an existing stage directory was reused.
    pub fresh: bool,
}

#[derive(Debug, Clone)]
pub struct DiffOutcome {
    pub stage: StageOutput,
    /// Mean of the last 20% of the training loss history.
    pub tail_loss: f64,
    pub conditioned: bool,
}

/// One reconstructed test image.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct InferRecord {
    pub key: String,
    /// `caption` or `null`.
    pub condition: String,
    pub caption: Option<String>,
    pub noise_seed: u64,
    pub image_score: f64,
    pub map: String,
}

#[derive(Debug, Clone)]
pub struct InferOutcome {
    pub stage: StageOutput,
    pub records: Vec<InferRecord>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub stage: StageOutput,
    pub report: EvalReport,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    config_hash: String,
}

fn stage_hash(v: serde_json::Value) -> String {
    util::json_hash(&v)[..16].to_string()
}

fn hashes_of(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), util::file_hash(p)?)))
        .collect()
}

fn secs(d: Duration) -> f64 {
    (d.as_secs_f64() * 1000.0).round() / 1000.0
}

/// Replaces `dst` with the fully written `tmp` directory.
fn commit_dir(tmp: &Path, dst: &Path) -> Result<()> {
    if dst.exists() {
        fs::remove_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    }
    fs::rename(tmp, dst).map_err(|e| Error::io(dst, e))
}

fn fresh_tmp(dir: &Path) -> Result<PathBuf> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    Ok(tmp)
}

impl Pipeline {
    /// Expects an already validated configuration.
    pub fn new(cfg: RunConfig) -> Self {
        let config_hash = cfg.hash();
        Self { cfg, config_hash }
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn out(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn run_log_path(&self) -> PathBuf {
        self.out().join(RUN_LOG)
    }

    pub fn captions_path(&self) -> PathBuf {
        self.out().join(CAPTIONS)
    }

    fn log_run(&self, command: &str, key: Option<&str>, inputs: BTreeMap<String, String>, extra: serde_json::Value) -> Result<()> {
        let out = self.out();
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let entry = json!({
            "time": Utc::now().to_rfc3339(),
            "command": command,
            "config_hash": self.config_hash,
            "seed": self.cfg.seed,
            "mode": self.cfg.mode,
            "stage_key": key,
            "inputs": inputs,
            "details": extra,
        });
        let path = self.run_log_path();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{entry}").map_err(|e| Error::io(&path, e))
    }

    pub fn index(&self) -> Result<DatasetIndex> {
        scan_industrial_layout(&self.cfg.dataset.root, self.cfg.dataset.resolution)
    }

    // ---- synth ---------------------------------------------------------

    pub fn synth(&self) -> Result<DatasetIndex> {
        let t = Instant::now();
        let index = synthesize_shapes_dataset(&self.cfg.dataset.synth, &self.cfg.dataset.root)?;
        let hash = index.content_hash()?;
        self.log_run(
            "synth",
            None,
            BTreeMap::new(),
            json!({
                "root": self.cfg.dataset.root,
                "dataset_hash": hash,
                "records": index.records.len(),
                "seconds": secs(t.elapsed()),
            }),
        )?;
        Ok(index)
    }

    // ---- caption -------------------------------------------------------

    pub fn provider_model_id(&self) -> String {
        let c = &self.cfg.captioner;
        match c.provider {
            ProviderKind::Stub => StubProvider::MODEL_ID.to_string(),
            ProviderKind::Http => c.model_id.clone().unwrap_or_else(|| c.endpoint.clone().unwrap_or_default()),
            ProviderKind::Command => c.model_id.clone().unwrap_or_else(|| c.program.clone().unwrap_or_default()),
        }
    }

    fn provider(&self) -> Result<Box<dyn CaptionProvider>> {
        let c = &self.cfg.captioner;
        let model_id = self.provider_model_id();
        Ok(match c.provider {
            ProviderKind::Stub => Box::new(StubProvider::from_root(&self.cfg.dataset.root)?),
            ProviderKind::Http => {
                let token = std::env::var(&c.token_env).ok().filter(|t| !t.is_empty());
                if token.is_none() {
                    log::warn!("{} is not set; calling the endpoint without a token", c.token_env);
                }
                Box::new(HttpProvider {
                    endpoint: c.endpoint.clone().unwrap_or_default(),
                    model_id,
                    token,
                    timeout: Duration::from_secs(c.timeout_secs),
                })
            }
            ProviderKind::Command => Box::new(CommandProvider {
                program: c.program.clone().unwrap_or_default(),
                args: c.args.clone(),
                model_id,
            }),
        })
    }

    pub fn caption(&self) -> Result<CaptionStats> {
        let t = Instant::now();
        let index = self.index()?;
        let provider = self.provider()?;
        let cache = CaptionCache::open(&self.captions_path())?;
        let prompts = self.cfg.prompts();
        let stats = caption_dataset(&index, &prompts, provider.as_ref(), &cache, self.cfg.captioner.concurrency)?;
        for (p, msg) in &stats.failures {
            log::warn!("no caption for {}: {msg}", p.display());
        }
        self.log_run(
            "caption",
            None,
            BTreeMap::new(),
            json!({
                "model_id": provider.model_id(),
                "prompts": prompts,
                "hits": stats.hits,
                "misses": stats.misses,
                "failures": stats.failures.iter().map(|(p, m)| json!({"image": p, "reason": m})).collect::<Vec<_>>(),
                "seconds": secs(t.elapsed()),
            }),
        )?;
        Ok(stats)
    }

    /// Cached captions for `split` under `prompt`, keyed by record key; an
    /// absent cache file yields an empty map without creating it.
    fn cached_captions(&self, index: &DatasetIndex, split: Split, prompt: &str) -> Result<BTreeMap<String, Option<String>>> {
        let path = self.captions_path();
        let cache = if path.is_file() { Some(CaptionCache::open(&path)?) } else { None };
        let model = self.provider_model_id();
        Ok(index
            .records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| {
                let key = r.key(&index.root);
                let cap = cache.as_ref().and_then(|c| c.get(&key, prompt, &model)).map(|c| c.caption);
                (key, cap)
            })
            .collect())
    }

    // ---- autoencoder ---------------------------------------------------

    fn ae_generic_key(&self) -> String {
        let a = &self.cfg.ae;
        stage_hash(json!({
            "stage": "ae-generic",
            "resolution": self.cfg.dataset.resolution,
            "factor": a.factor,
            "latent_dim": a.latent_dim,
            "channels": a.channels,
            "kl_weight": a.kl_weight,
            "lr": a.lr,
            "batch": a.batch,
            "generic_images": a.generic_images,
            "generic_epochs": a.generic_epochs,
            "seed": self.cfg.seed,
        }))
    }

    fn ae_key(&self, dataset_hash: &str) -> String {
        if !self.cfg.ae.finetune {
            return self.ae_generic_key();
        }
        stage_hash(json!({
            "stage": "ae-finetune",
            "generic": self.ae_generic_key(),
            "epochs": self.cfg.ae.epochs,
            "dataset": dataset_hash,
        }))
    }

    fn ae_ckpt(&self, key: &str) -> PathBuf {
        self.out().join("ae").join(key).join("ae.ckpt")
    }

    fn write_ae(&self, ck: &AutoencoderCheckpoint, key: &str) -> Result<PathBuf> {
        let dir = self.out().join("ae").join(key);
        let mut csv = String::from("epoch,loss,rec,kl\n");
        for e in &ck.history {
            csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.rec, e.kl));
        }
        util::write_atomic(&dir.join("history.csv"), csv.as_bytes())?;
        let p = dir.join("ae.ckpt");
        ck.save(&p)?;
        Ok(p)
    }

    /// Generic pretraining, then (unless disabled) finetuning on the
    /// dataset's normal training images.
    pub fn train_ae(&self) -> Result<StageOutput> {
        let t = Instant::now();
        let index = self.index()?;
        let dataset_hash = index.content_hash()?;
        let cfg = &self.cfg.ae;
        let res = self.cfg.dataset.resolution;
        let generic_key = self.ae_generic_key();
        let generic_path = self.ae_ckpt(&generic_key);
        let mut fresh = false;
        let generic = if generic_path.is_file() {
            log::info!("reusing generic autoencoder {generic_key}");
            AutoencoderCheckpoint::load(&generic_path, Some(&generic_key))?
        } else {
            log::info!("pretraining autoencoder on {} generic images", cfg.generic_images);
            let corpus = generic_corpus(cfg.generic_images, res, util::stage_seed(self.cfg.seed, "ae/generic-data"));
            let ck = train_autoencoder(
                &corpus,
                AeTrainSpec {
                    config: cfg,
                    epochs: cfg.generic_epochs,
                    seed: util::stage_seed(self.cfg.seed, "ae/generic"),
                    config_hash: generic_key.clone(),
                    finetuned: false,
                    init: None,
                    save_path: None,
                },
            )?;
            self.write_ae(&ck, &generic_key)?;
            fresh = true;
            ck
        };
        let key = self.ae_key(&dataset_hash);
        let path = self.ae_ckpt(&key);
        if cfg.finetune {
            if path.is_file() {
                log::info!("reusing finetuned autoencoder {key}");
            } else {
                let ids: Vec<usize> = index.train().map(|(i, _)| i).collect();
                let images = index.load_images(&ids)?;
                // Periodic snapshots go beside, never over, the final checkpoint.
                let snapshot = path.with_file_name("ae.snapshot.ckpt");
                log::info!("finetuning autoencoder on {} training images", images.len());
                let ck = train_autoencoder(
                    &images,
                    AeTrainSpec {
                        config: cfg,
                        epochs: cfg.epochs,
                        seed: util::stage_seed(self.cfg.seed, "ae/finetune"),
                        config_hash: key.clone(),
                        finetuned: true,
                        init: Some(&generic.model),
                        save_path: Some(&snapshot),
                    },
                )?;
                self.write_ae(&ck, &key)?;
                fresh = true;
            }
        }
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".to_string(), dataset_hash);
        inputs.extend(hashes_of(&[&path])?);
        self.log_run(
            "train-ae",
            Some(&key),
            inputs,
            json!({
                "generic_key": generic_key,
                "finetune": cfg.finetune,
                "fresh": fresh,
                "seconds": secs(t.elapsed()),
            }),
        )?;
        Ok(StageOutput {
            key,
            dir: path.parent().unwrap().to_path_buf(),
            fresh,
        })
    }

    fn require_ae(&self, index: &DatasetIndex) -> Result<(String, PathBuf)> {
        let key = self.ae_key(&index.content_hash()?);
        let path = self.ae_ckpt(&key);
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                what: "autoencoder checkpoint".into(),
                path,
                command: "train-ae",
            });
        }
        Ok((key, path))
    }

    // ---- diffusion -----------------------------------------------------

    fn train_captions(&self, index: &DatasetIndex) -> Result<BTreeMap<String, Option<String>>> {
        self.cached_captions(index, Split::Train, &self.cfg.prompts().train_prompt)
    }

    fn diff_key(&self, ae_key: &str, captions: &BTreeMap<String, Option<String>>) -> String {
        let mut d = self.cfg.diff.clone();
        // Sampler settings only affect inference.
        d.steps = 0;
        d.t_start_frac = 0.0;
        let caps = if d.train_conditioning {
            util::json_hash(captions)
        } else {
            "unconditioned".to_string()
        };
        stage_hash(json!({
            "stage": "diff",
            "diff": d,
            "encoder": self.cfg.encoder,
            "ae": ae_key,
            "captions": caps,
            "seed": self.cfg.seed,
        }))
    }

    fn diff_ckpt(&self, key: &str) -> PathBuf {
        self.out().join("diff").join(key).join("denoiser.ckpt")
    }

    pub fn train_diff(&self) -> Result<DiffOutcome> {
        let t = Instant::now();
        let index = self.index()?;
        let (ae_key, ae_path) = self.require_ae(&index)?;
        let cfg = &self.cfg.diff;
        if cfg.train_conditioning && !self.captions_path().is_file() {
            return Err(Error::MissingArtifact {
                what: "captions".into(),
                path: self.captions_path(),
                command: "caption",
            });
        }
        let captions = self.train_captions(&index)?;
        let key = self.diff_key(&ae_key, &captions);
        let path = self.diff_ckpt(&key);
        let encoder = build_encoder(&self.cfg.encoder)?;
        let (ck, fresh) = if path.is_file() {
            log::info!("reusing denoiser {key}");
            (DenoiserCheckpoint::load(&path, Some(&key))?, false)
        } else {
            let ae = AutoencoderCheckpoint::load(&ae_path, Some(&ae_key))?.model;
            let train: Vec<_> = index.train().collect();
            let ids: Vec<usize> = train.iter().map(|(i, _)| *i).collect();
            let images = index.load_images(&ids)?;
            let refs: Vec<_> = images.iter().collect();
            let codes = ae.encode_batch(&refs)?;
            let parts: Vec<Tensor> = codes
                .iter()
                .map(|c| {
                    let (d, h, w) = (c.values.dim(0), c.values.dim(1), c.values.dim(2));
                    c.values.clone().reshape(&[1, d, h, w])
                })
                .collect::<std::result::Result<_, _>>()?;
            let data = DenoiserData {
                latents: Tensor::stack_batch(&parts)?,
                captions: train
                    .iter()
                    .map(|(_, r)| captions.get(&r.key(&index.root)).cloned().flatten())
                    .collect(),
                names: train.iter().map(|(_, r)| r.path.clone()).collect(),
            };
            let ck = train_denoiser(
                &data,
                DiffTrainSpec {
                    config: cfg,
                    encoder: encoder.as_ref(),
                    seed: util::stage_seed(self.cfg.seed, "diff"),
                    config_hash: key.clone(),
                },
            )?;
            let dir = path.parent().unwrap();
            util::write_atomic(&dir.join("loss.csv"), ck.loss_csv().as_bytes())?;
            ck.save(&path)?;
            (ck, true)
        };
        let tail_loss = tail_mean(&ck.loss_history, 0.2);
        let mut inputs = hashes_of(&[&ae_path, &path])?;
        if cfg.train_conditioning {
            inputs.insert("captions".into(), util::json_hash(&captions));
        }
        self.log_run(
            "train-diff",
            Some(&key),
            inputs,
            json!({
                "ae_key": ae_key,
                "conditioned": ck.conditioned,
                "encoder": encoder.fingerprint(),
                "tail_loss": tail_loss,
                "fresh": fresh,
                "seconds": secs(t.elapsed()),
            }),
        )?;
        Ok(DiffOutcome {
            stage: StageOutput {
                key,
                dir: path.parent().unwrap().to_path_buf(),
                fresh,
            },
            tail_loss,
            conditioned: ck.conditioned,
        })
    }

    fn require_diff(&self, index: &DatasetIndex) -> Result<(String, PathBuf, String, PathBuf)> {
        let (ae_key, ae_path) = self.require_ae(index)?;
        let key = self.diff_key(&ae_key, &self.train_captions(index)?);
        let path = self.diff_ckpt(&key);
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                what: "denoiser checkpoint".into(),
                path,
                command: "train-diff",
            });
        }
        Ok((ae_key, ae_path, key, path))
    }

    // ---- inference -----------------------------------------------------

    fn infer_captions(&self, index: &DatasetIndex) -> Result<Option<BTreeMap<String, Option<String>>>> {
        if !self.cfg.infer_with_captions() {
            return Ok(None);
        }
        let prompt = self.cfg.prompts().inference_prompt.expect("validated");
        Ok(Some(self.cached_captions(index, Split::Test, &prompt)?))
    }

    fn infer_key(&self, diff_key: &str, captions: &Option<BTreeMap<String, Option<String>>>) -> String {
        stage_hash(json!({
            "stage": "infer",
            "diff": diff_key,
            "steps": self.cfg.diff.steps,
            "t_start_frac": self.cfg.diff.t_start_frac,
            "segmentation": self.cfg.segmentation,
            "with_captions": self.cfg.infer_with_captions(),
            "captions": captions.as_ref().map(util::json_hash),
            "seed": self.cfg.seed,
        }))
    }

    fn infer_dir(&self, key: &str) -> PathBuf {
        self.out().join("infer").join(key)
    }

    /// Reconstructs every test image and writes its anomaly map.
    pub fn infer(&self) -> Result<InferOutcome> {
        let t = Instant::now();
        let index = self.index()?;
        let (ae_key, ae_path, diff_key, diff_path) = self.require_diff(&index)?;
        let captions = self.infer_captions(&index)?;
        let key = self.infer_key(&diff_key, &captions);
        let dir = self.infer_dir(&key);
        let records_path = dir.join("images.jsonl");
        let (records, fresh) = if records_path.is_file() {
            log::info!("reusing inference {key}");
            let text = fs::read_to_string(&records_path).map_err(|e| Error::io(&records_path, e))?;
            let recs = text
                .lines()
                .map(serde_json::from_str::<InferRecord>)
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (recs, false)
        } else {
            (self.run_inference(&index, &ae_key, &ae_path, &diff_key, &diff_path, &captions, &dir)?, true)
        };
        let mut inputs = hashes_of(&[&ae_path, &diff_path])?;
        inputs.insert("dataset".into(), index.content_hash()?);
        if let Some(c) = &captions {
            inputs.insert("captions".into(), util::json_hash(c));
        }
        self.log_run(
            "infer",
            Some(&key),
            inputs,
            json!({
                "diff_key": diff_key,
                "mode": self.cfg.mode,
                "images": records.iter().map(|r| json!({
                    "key": r.key,
                    "condition": r.condition,
                    "noise_seed": r.noise_seed,
                    "image_score": r.image_score,
                })).collect::<Vec<_>>(),
                "fresh": fresh,
                "seconds": secs(t.elapsed()),
            }),
        )?;
        Ok(InferOutcome {
            stage: StageOutput { key, dir, fresh },
            records,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_inference(
        &self,
        index: &DatasetIndex,
        ae_key: &str,
        ae_path: &Path,
        diff_key: &str,
        diff_path: &Path,
        captions: &Option<BTreeMap<String, Option<String>>>,
        dir: &Path,
    ) -> Result<Vec<InferRecord>> {
        let ae = AutoencoderCheckpoint::load(ae_path, Some(ae_key))?.model;
        let den = DenoiserCheckpoint::load(diff_path, Some(diff_key))?;
        let encoder = build_encoder(&self.cfg.encoder)?;
        if encoder.fingerprint() != den.encoder_fingerprint {
            return Err(Error::Checkpoint {
                path: diff_path.to_path_buf(),
                msg: "denoiser was trained with a different text encoder".into(),
            });
        }
        let seg = &self.cfg.segmentation;
        let extractor = build_extractor(&seg.extractor, index.resolution)?;
        let tmp = fresh_tmp(dir)?;
        let maps_dir = tmp.join("maps");
        let test: Vec<_> = index.test().collect();
        let null = encoder.null_condition();
        let results = exec::map_slice(&test, |&(id, rec)| -> Result<(InferRecord, String)> {
            let key = rec.key(&index.root);
            let caption = match captions {
                None => None,
                Some(c) => Some(
                    c.get(&key)
                        .cloned()
                        .flatten()
                        .ok_or_else(|| Error::MissingCaption(rec.path.clone()))?,
                ),
            };
            let cond = match &caption {
                Some(c) => encoder.encode(truncate_caption(c, encoder.max_chars()))?,
                None => null.clone(),
            };
            let image = index.load_image(id)?;
            let noise_seed = util::stage_seed(self.cfg.seed, &format!("infer/{key}"));
            let rec_img = den.reconstruct(&image, &ae, &cond, self.cfg.diff.t_start_frac, self.cfg.diff.steps, noise_seed)?;
            let f = extractor.extract(&image)?;
            let f_rec = extractor.extract(&rec_img)?;
            let map = anomaly_map(&f, &f_rec, index.resolution, seg.sigma, seg.score)?;
            let map_path = amap_path(&maps_dir, &index.root, rec);
            util::write_atomic(&map_path, &amap_to_bytes(&map))?;
            util::write_atomic(&map_path.with_extension("png"), &amap_to_png(&map))?;
            let stem = map_path.file_name().unwrap().to_string_lossy().replace("_amap.bin", "");
            util::write_atomic(&map_path.with_file_name(format!("{stem}_rec.png")), &rec_img.to_png_bytes())?;
            let rel = map_path.strip_prefix(&tmp).unwrap().to_string_lossy().into_owned();
            let r = InferRecord {
                key,
                condition: if caption.is_some() { "caption" } else { "null" }.into(),
                caption,
                noise_seed,
                image_score: map.image_score,
                map: rel,
            };
            let line = serde_json::to_string(&r)?;
            Ok((r, line))
        });
        let mut records = Vec::with_capacity(results.len());
        let mut lines = String::new();
        for r in results {
            let (rec, line) = r?;
            lines.push_str(&line);
            lines.push('\n');
            records.push(rec);
        }
        util::write_atomic(&tmp.join("images.jsonl"), lines.as_bytes())?;
        commit_dir(&tmp, dir)?;
        let n_anom = test.iter().filter(|(_, r)| r.label == Label::Anomalous).count();
        log::info!("reconstructed {} test images ({n_anom} anomalous)", records.len());
        Ok(records)
    }

    // ---- evaluation ----------------------------------------------------

    fn eval_key(&self, infer_key: &str) -> String {
        stage_hash(json!({
            "stage": "eval",
            "infer": infer_key,
            "metrics": self.cfg.metrics,
            "score": self.cfg.segmentation.score,
        }))
    }

    /// Locates the maps of the current configuration.
    fn require_maps(&self, index: &DatasetIndex) -> Result<(String, PathBuf)> {
        let missing = |path: PathBuf| Error::MissingArtifact {
            what: "anomaly maps".into(),
            path,
            command: "infer",
        };
        let diff = match self.require_diff(index) {
            Ok((_, _, k, _)) => k,
            Err(Error::MissingArtifact { path, .. }) => return Err(missing(path)),
            Err(e) => return Err(e),
        };
        let key = self.infer_key(&diff, &self.infer_captions(index)?);
        let dir = self.infer_dir(&key);
        if !dir.join("images.jsonl").is_file() {
            return Err(missing(dir.join("maps")));
        }
        Ok((key, dir))
    }

    pub fn eval(&self) -> Result<EvalOutcome> {
        let t = Instant::now();
        let index = self.index()?;
        let (infer_key, infer_dir) = self.require_maps(&index)?;
        let report = evaluate(&index, &infer_dir.join("maps"), &self.cfg.metrics, self.cfg.segmentation.score)?;
        let key = self.eval_key(&infer_key);
        let dir = self.out().join("eval").join(&key);
        util::write_atomic(&dir.join("report.kv"), report.to_kv().as_bytes())?;
        util::write_atomic(&dir.join("curves.csv"), report.curves_csv().as_bytes())?;
        util::write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
        let images = infer_dir.join("images.jsonl");
        self.log_run(
            "eval",
            Some(&key),
            hashes_of(&[&images])?,
            json!({
                "infer_key": infer_key,
                "roc_i": report.roc_i,
                "roc_p": report.roc_p,
                "pro": report.pro,
                "seconds": secs(t.elapsed()),
            }),
        )?;
        Ok(EvalOutcome {
            stage: StageOutput { key, dir, fresh: true },
            report,
        })
    }

    // ---- report --------------------------------------------------------

    /// Copies the evaluation report and draws one contact sheet
    /// (input | reconstruction | map | mask) per test image.
    pub fn report(&self) -> Result<StageOutput> {
        let t = Instant::now();
        let index = self.index()?;
        let (infer_key, infer_dir) = self.require_maps(&index)?;
        let key = self.eval_key(&infer_key);
        let eval_dir = self.out().join("eval").join(&key);
        let kv_path = eval_dir.join("report.kv");
        if !kv_path.is_file() {
            return Err(Error::MissingArtifact {
                what: "evaluation report".into(),
                path: kv_path,
                command: "eval",
            });
        }
        let json_path = eval_dir.join("report.json");
        let bytes = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let report: EvalReport = serde_json::from_slice(&bytes)?;
        let dir = self.out().join("report").join(&key);
        let sheets = report::write_report(&index, &infer_dir, &report, &dir, self.cfg.segmentation.score)?;
        self.log_run(
            "report",
            Some(&key),
            hashes_of(&[&kv_path, &json_path])?,
            json!({"sheets": sheets, "seconds": secs(t.elapsed())}),
        )?;
        Ok(StageOutput { key, dir, fresh: true })
    }
}
