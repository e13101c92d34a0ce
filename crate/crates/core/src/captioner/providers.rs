use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use base64::Engine;

use super::CaptionProvider;
use crate::dataset::Manifest;
use crate::error::Result;

/// Offline provider for synthetic datasets: reads the generator's manifest.
#[derive(Debug, Clone)]
pub struct StubProvider {
    root: PathBuf,
    manifest: Manifest,
}

impl StubProvider {
    pub const MODEL_ID: &'static str = "stub-manifest";

    pub fn from_root(root: &Path) -> Result<Self> {
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Manifest::load(root)?,
        })
    }
}

impl CaptionProvider for StubProvider {
    fn model_id(&self) -> &str {
        Self::MODEL_ID
    }

    fn describe(&self, image: &Path, _prompt: &str) -> std::result::Result<String, String> {
        let key = image
            .strip_prefix(&self.root)
            .unwrap_or(image)
            .to_string_lossy()
            .replace('\\', "/");
        self.manifest
            .entry(&key)
            .map(|e| e.description())
            .ok_or_else(|| format!("{key} is not listed in the synthetic manifest"))
    }
}

/// JSON-over-HTTP endpoint. Sends
/// `{"model", "prompt", "image_name", "image_base64"}` and accepts either a
/// plain-text body or a JSON object with a `caption`, `text`, `response`
/// or `description` string field.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    pub endpoint: String,
    pub model_id: String,
    pub token: Option<String>,
    pub timeout: Duration,
}

impl HttpProvider {
    fn extract(body: &str) -> std::result::Result<String, String> {
        let Ok(v) = serde_json::from_str::<serde_json::Value>(body) else {
            return Ok(body.to_string());
        };
        match &v {
            serde_json::Value::String(s) => Ok(s.clone()),
            serde_json::Value::Object(m) => ["caption", "text", "response", "description"]
                .iter()
                .find_map(|k| m.get(*k).and_then(|x| x.as_str()))
                .map(str::to_string)
                .ok_or_else(|| "response JSON has no caption field".to_string()),
            _ => Err("unexpected response JSON".to_string()),
        }
    }
}

impl CaptionProvider for HttpProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn describe(&self, image: &Path, prompt: &str) -> std::result::Result<String, String> {
        let bytes = std::fs::read(image).map_err(|e| e.to_string())?;
        let body = serde_json::json!({
            "model": self.model_id,
            "prompt": prompt,
            "image_name": image.file_name().map(|n| n.to_string_lossy().into_owned()),
            "image_base64": base64::engine::general_purpose::STANDARD.encode(bytes),
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&self.endpoint).content_type("application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| e.to_string())?;
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Self::extract(&text)
    }
}

/// Runs a local program per image. `{image}` and `{prompt}` in the argument
/// template are substituted; stdout is the description.
#[derive(Debug, Clone)]
pub struct CommandProvider {
    pub program: String,
    pub args: Vec<String>,
    pub model_id: String,
}

impl CaptionProvider for CommandProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn describe(&self, image: &Path, prompt: &str) -> std::result::Result<String, String> {
        let img = image.to_string_lossy();
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| a.replace("{image}", &img).replace("{prompt}", prompt))
            .collect();
        let out = Command::new(&self.program)
            .args(&args)
            .output()
            .map_err(|e| format!("cannot run {}: {e}", self.program))?;
        if !out.status.success() {
            return Err(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
        String::from_utf8(out.stdout).map_err(|_| "output is not UTF-8".to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn http_response_shapes() {
        assert_eq!(HttpProvider::extract("a red cube").unwrap(), "a red cube");
        assert_eq!(HttpProvider::extract(r#"{"caption":"x"}"#).unwrap(), "x");
        assert_eq!(HttpProvider::extract(r#"{"response":"y"}"#).unwrap(), "y");
        assert_eq!(HttpProvider::extract(r#""z""#).unwrap(), "z");
        assert!(HttpProvider::extract(r#"{"other":1}"#).is_err());
    }

    #[test]
    fn command_provider_substitutes_template() {
        let p = CommandProvider {
            program: "echo".into(),
            args: vec!["{prompt}".into(), "--".into(), "{image}".into()],
            model_id: "echo".into(),
        };
        let out = p.describe(Path::new("/x/y.png"), "Describe it.").unwrap();
        assert_eq!(out.trim(), "Describe it. -- /x/y.png");
        let bad = CommandProvider {
            program: "false".into(),
            args: vec![],
            model_id: "f".into(),
        };
        assert!(bad.describe(Path::new("a"), "p").is_err());
    }

    #[test]
    fn unreachable_endpoint_fails_cleanly() {
        let p = HttpProvider {
            endpoint: "http://127.0.0.1:9/caption".into(),
            model_id: "m".into(),
            token: None,
            timeout: Duration::from_secs(2),
        };
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        std::fs::write(&img, b"not really a png").unwrap();
        assert!(p.describe(&img, "p").is_err());
    }
}
