//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::AeConfig;
use crate::captioner::{Mode, PromptConfig};
use crate::dataset::SynthConfig;
use crate::diffusion::DiffConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::segmentation::{ExtractorBackend, ExtractorConfig, ScoreRule};
use crate::text_encoder::{Backend, EncoderConfig};
use crate::util;

pub const DEFAULT_TOKEN_ENV: &str = "VLMDIFF_VLM_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Industrial-layout root; `synth` writes here.
    pub root: PathBuf,
    /// `(height, width)` every image is resized to.
    pub resolution: (usize, usize),
    pub synth: SynthConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            resolution: (64, 64),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Reads descriptions from a synthetic dataset's manifest.
    #[default]
    Stub,
    Http,
    Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionerSection {
    pub provider: ProviderKind,
    pub endpoint: Option<String>,
    pub model_id: Option<String>,
    /// Environment variable holding the endpoint token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub program: Option<String>,
    pub args: Vec<String>,
    pub concurrency: usize,
    /// Industrial mode: also caption test images so inference can be
    /// conditioned.
    pub inference_captions: bool,
}

impl Default for CaptionerSection {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Stub,
            endpoint: None,
            model_id: None,
            token_env: DEFAULT_TOKEN_ENV.into(),
            timeout_secs: 60,
            program: None,
            args: Vec::new(),
            concurrency: 4,
            inference_captions: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InferCondition {
    /// Captions in natural mode, null condition in industrial mode.
    #[default]
    Auto,
    Caption,
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationSection {
    pub extractor: ExtractorConfig,
    /// Gaussian smoothing of the upsampled map; 0 disables.
    pub sigma: f64,
    pub score: ScoreRule,
    pub condition: InferCondition,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::default(),
            sigma: 4.0,
            score: ScoreRule::Max,
            condition: InferCondition::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    /// Stage artifacts and the run log live here.
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub captioner: CaptionerSection,
    pub encoder: EncoderConfig,
    pub ae: AeConfig,
    pub diff: DiffConfig,
    pub segmentation: SegmentationSection,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Industrial,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetSection::default(),
            captioner: CaptionerSection::default(),
            encoder: EncoderConfig::default(),
            ae: AeConfig::default(),
            diff: DiffConfig::default(),
            segmentation: SegmentationSection::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Sets `a.b.c = value` inside a TOML table, creating tables on the way.
fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    // Anything that does not parse as a TOML value is taken as a string.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text and applies `key=value` overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            apply_override(&mut table, k.trim(), v.trim())?;
        }
        table
            .try_into::<RunConfig>()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file. Relative paths in the file are
    /// resolved against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("config file {} not found", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.dataset.root);
        if let Some(w) = self.encoder.weights.as_mut() {
            fix(w);
        }
        if let Some(w) = self.segmentation.extractor.weights.as_mut() {
            fix(w);
        }
    }

    pub fn prompts(&self) -> PromptConfig {
        let p = PromptConfig::for_mode(self.mode);
        if self.captioner.inference_captions {
            p.with_inference_captions()
        } else {
            p
        }
    }

    /// Whether inference reconstructs with the test image's caption.
    pub fn infer_with_captions(&self) -> bool {
        match self.segmentation.condition {
            InferCondition::Auto => self.mode == Mode::Natural,
            InferCondition::Caption => true,
            InferCondition::Null => false,
        }
    }

    /// Checks everything a run depends on without touching the disk
    /// beyond existence checks of configured weight files.
    pub fn validate(&self) -> Result<()> {
        let res = self.dataset.resolution;
        if res.0 == 0 || res.1 == 0 {
            return Err(Error::Config("dataset.resolution must be positive".into()));
        }
        if self.dataset.synth.resolution != res {
            return Err(Error::Config(format!(
                "dataset.synth.resolution {:?} differs from dataset.resolution {res:?}",
                self.dataset.synth.resolution
            )));
        }
        self.dataset.synth.validate()?;
        let prompts = self.prompts();
        prompts.validate()?;
        let c = &self.captioner;
        if c.concurrency == 0 {
            return Err(Error::Config("captioner.concurrency must be >= 1".into()));
        }
        match c.provider {
            ProviderKind::Http if c.endpoint.as_deref().unwrap_or("").is_empty() => {
                return Err(Error::Config("captioner.endpoint is required for the http provider".into()));
            }
            ProviderKind::Command if c.program.as_deref().unwrap_or("").is_empty() => {
                return Err(Error::Config("captioner.program is required for the command provider".into()));
            }
            _ => {}
        }
        self.encoder.validate()?;
        if self.encoder.backend == Backend::Transformer {
            if let Some(w) = &self.encoder.weights {
                if !w.is_file() {
                    return Err(Error::ExtractorUnavailable(format!(
                        "text encoder weights {} not found",
                        w.display()
                    )));
                }
            }
        }
        self.ae.validate(res)?;
        self.diff.validate()?;
        let latent = (res.0 / self.ae.factor, res.1 / self.ae.factor);
        let down = 1usize << self.diff.channels.len().saturating_sub(1);
        if !latent.0.is_multiple_of(down) || !latent.1.is_multiple_of(down) {
            return Err(Error::Config(format!(
                "latent size {latent:?} cannot be halved {} times (diff.channels)",
                self.diff.channels.len() - 1
            )));
        }
        if self.diff.channels.iter().any(|&ch| ch == 0 || ch % 8 != 0 || ch % self.diff.heads != 0) {
            return Err(Error::Config("diff.channels must be multiples of 8 and of diff.heads".into()));
        }
        let ex = &self.segmentation.extractor;
        ex.validate(res)?;
        if ex.backend != ExtractorBackend::ConvStub {
            let name = if ex.backend == ExtractorBackend::Vit { "vit" } else { "cnn" };
            match &ex.weights {
                None => {
                    return Err(Error::ExtractorUnavailable(format!(
                        "{name} backend needs segmentation.extractor.weights"
                    )))
                }
                Some(w) if !w.is_file() => {
                    return Err(Error::ExtractorUnavailable(format!(
                        "{name} weights {} not found",
                        w.display()
                    )))
                }
                _ => {}
            }
        }
        if !(self.segmentation.sigma >= 0.0 && self.segmentation.sigma.is_finite()) {
            return Err(Error::Config("segmentation.sigma must be >= 0".into()));
        }
        if let ScoreRule::TopKMean { k: 0 } = self.segmentation.score {
            return Err(Error::Config("segmentation.score top-k-mean needs k >= 1".into()));
        }
        if self.infer_with_captions() && prompts.inference_prompt.is_none() {
            return Err(Error::Config(
                "conditioned inference in industrial mode needs captioner.inference_captions = true".into(),
            ));
        }
        self.metrics.validate()
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        util::json_hash(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = RunConfig::from_toml_str(
            "seed = 3\n[diff]\nT = 50\n",
            &[
                "diff.T=200".into(),
                "mode=natural".into(),
                "segmentation.extractor.backend=\"conv-stub\"".into(),
                "diff.channels=[16, 32]".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.diff.t, 200);
        assert_eq!(c.mode, Mode::Natural);
        assert_eq!(c.diff.channels, vec![16, 32]);
        assert_eq!(c.seed, 9);
        assert!(c.infer_with_captions());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[diff]\nsteps_typo = 3\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("", &["ae.nope=1".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["novalue".into()]).is_err());
    }

    #[test]
    fn validation_catches_cross_section_errors() {
        let mut c = RunConfig::default();
        c.segmentation.condition = InferCondition::Caption;
        assert!(c.validate().unwrap_err().to_string().contains("inference_captions"));
        c.captioner.inference_captions = true;
        c.validate().unwrap();

        let mut c = RunConfig::default();
        c.segmentation.extractor.backend = ExtractorBackend::Vit;
        let e = c.validate().unwrap_err();
        assert!(matches!(e, Error::ExtractorUnavailable(_)) && e.to_string().contains("vit"));

        let mut c = RunConfig::default();
        c.captioner.provider = ProviderKind::Http;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.dataset.resolution = (32, 32);
        assert!(c.validate().is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "output_dir = \"out\"\n[dataset]\nroot = \"d\"\n").unwrap();
        let c = RunConfig::load(&p, &[]).unwrap();
        assert_eq!(c.output_dir, dir.path().join("out"));
        assert_eq!(c.dataset.root, dir.path().join("d"));
        assert!(!c.output_dir.exists());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.diff.t = 999;
        assert_ne!(a.hash(), b.hash());
    }
}
