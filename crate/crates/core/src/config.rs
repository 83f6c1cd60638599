//! Run configuration: defaults, a TOML file, `QADAPT_<SECTION>_<KEY>`
//! environment variables and explicit `section.key=value` overrides, applied
//! in that order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adaptation::TrainConfig;
use crate::error::{Error, Result};
use crate::llm::{HttpLlm, LlmBackend, PromptTemplates, StubRules};
use crate::selection::Stopwords;
use crate::text::{init_context, EncoderBackend, HttpTextEncoder, ToyEncoderConfig, ToyTextEncoder, TokenVocab};

pub const ENV_PREFIX: &str = "QADAPT_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextBackendKind {
    Toy,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub backend: TextBackendKind,
    pub seed: u64,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub token_scale: f32,
    pub context_phrase: String,
    pub endpoint: Option<String>,
    /// Expected embedding size of the remote encoder.
    pub dim: Option<usize>,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        let toy = ToyEncoderConfig::default();
        Self {
            backend: TextBackendKind::Toy,
            seed: toy.seed,
            token_dim: toy.token_dim,
            hidden_dim: toy.hidden_dim,
            output_dim: toy.output_dim,
            token_scale: toy.token_scale,
            context_phrase: "a photo of a".into(),
            endpoint: None,
            dim: None,
        }
    }
}

impl TextEncoderConfig {
    pub fn toy(&self) -> ToyEncoderConfig {
        ToyEncoderConfig {
            seed: self.seed,
            token_dim: self.token_dim,
            hidden_dim: self.hidden_dim,
            output_dim: self.output_dim,
            token_scale: self.token_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmBackendKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub backend: LlmBackendKind,
    /// Stub rules file.
    pub rules: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: String,
    /// Directory overriding the bundled prompt templates.
    pub prompts_dir: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: LlmBackendKind::Stub,
            rules: None,
            endpoint: None,
            model: "default".into(),
            prompts_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Replaces the bundled stopword list.
    pub stopwords: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub text_encoder: TextEncoderConfig,
    pub llm: LlmConfig,
    pub selection: SelectionConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("{origin}: {e}")))
    }

    /// Reads a TOML file. Relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.llm.rules, &mut cfg.llm.prompts_dir, &mut cfg.selection.stopwords]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn to_json_value(&self) -> Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    /// Defaults, then `path` if given, then the environment.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        base.with_env(|k| std::env::var(k).ok())
    }

    /// Applies `QADAPT_<SECTION>_<KEY>` variables looked up through `lookup`.
    pub fn with_env(self, lookup: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut value = self.to_json_value();
        let sections = value.as_object_mut().expect("object");
        for (section, fields) in sections.iter_mut() {
            let Some(fields) = fields.as_object_mut() else { continue };
            for (key, slot) in fields.iter_mut() {
                let mut vars = vec![format!("{ENV_PREFIX}{}_{}", section.to_uppercase(), key.to_uppercase())];
                // endpoints are also read from *_URL, which wins
                if key == "endpoint" {
                    vars.push(format!("{ENV_PREFIX}{}_URL", section.to_uppercase()));
                }
                for var in vars {
                    if let Some(raw) = lookup(&var) {
                        *slot = parse_like(slot, &raw, &var)?;
                    }
                }
            }
        }
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Applies one `section.key=value` override.
    pub fn with_override(self, assignment: &str) -> Result<Self> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::InvalidConfig(format!("override key {path:?} is not section.key")))?;
        let mut value = self.to_json_value();
        let slot = value
            .get_mut(section)
            .and_then(|s| s.as_object_mut())
            .and_then(|s| s.get_mut(key))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown setting {path}")))?;
        *slot = parse_like(slot, raw.trim(), path)?;
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn stopwords(&self) -> Result<Stopwords> {
        match &self.selection.stopwords {
            Some(p) => Stopwords::from_file(p),
            None => Ok(Stopwords::bundled()),
        }
    }

    pub fn llm_backend(&self) -> Result<LlmBackend> {
        match self.llm.backend {
            LlmBackendKind::Stub => Ok(LlmBackend::Stub(match &self.llm.rules {
                Some(p) => StubRules::load(p)?,
                None => StubRules::default(),
            })),
            LlmBackendKind::Http => {
                let url = self
                    .llm
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| Error::InvalidConfig("llm.endpoint is required for the http backend".into()))?;
                let templates = match &self.llm.prompts_dir {
                    Some(d) => PromptTemplates::load_dir(d)?,
                    None => PromptTemplates::default(),
                };
                Ok(LlmBackend::Http(HttpLlm::new(url, &self.llm.model, templates)))
            }
        }
    }

    /// Toy encoder whose vocabulary covers the context phrase and `texts`.
    pub fn toy_encoder<I, S>(&self, texts: I) -> ToyTextEncoder
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let vocab = TokenVocab::from_texts(texts).extended([self.text_encoder.context_phrase.as_str()]);
        ToyTextEncoder::new(self.text_encoder.toy(), vocab)
    }

    /// The configured text backend. `texts` seed the toy vocabulary.
    pub fn encoder_backend<I, S>(&self, texts: I) -> Result<EncoderBackend>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        match self.text_encoder.backend {
            TextBackendKind::Toy => {
                let encoder = self.toy_encoder(texts);
                let learner = init_context(&encoder, &self.text_encoder.context_phrase, self.train.m_context)?;
                Ok(EncoderBackend::toy(encoder, learner))
            }
            TextBackendKind::Http => {
                let url = self.text_encoder.endpoint.as_deref().ok_or_else(|| {
                    Error::InvalidConfig("text_encoder.endpoint is required for the http backend".into())
                })?;
                Ok(EncoderBackend::Http(HttpTextEncoder::new(url, self.text_encoder.dim)))
            }
        }
    }
}

/// Parses `raw` into the JSON type currently held by `slot`.
fn parse_like(slot: &Value, raw: &str, name: &str) -> Result<Value> {
    let bad = || Error::InvalidConfig(format!("{name}: cannot parse {raw:?}"));
    Ok(match slot {
        Value::Bool(_) => Value::Bool(match raw.to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "on" => true,
            "0" | "false" | "no" | "off" => false,
            _ => return Err(bad()),
        }),
        Value::Number(n) if n.is_f64() => serde_json::Number::from_f64(raw.parse().map_err(|_| bad())?)
            .map(Value::Number)
            .ok_or_else(bad)?,
        Value::Number(_) => Value::Number(raw.parse::<u64>().map_err(|_| bad())?.into()),
        Value::Null if raw.is_empty() => Value::Null,
        Value::Null => raw
            .parse::<u64>()
            .map(|n| Value::Number(n.into()))
            .unwrap_or_else(|_| Value::String(raw.to_string())),
        _ => Value::String(raw.to_string()),
    })
}
