//! Language-model gateway: query decomposition into target classes, synonym
//! filtering of negative classes, and affordance generation.
//!
//! The stub backend answers from a rules file and performs no I/O. The HTTP
//! backend sends `{"model", "prompt"}` and expects `{"text"}` back; replies are
//! accepted only if a JSON array of strings can be extracted from them.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::http::JsonClient;
use crate::text::canonical_class;

pub const LLM_URL_ENV: &str = "QADAPT_LLM_URL";

/// Number of extra attempts after an unparseable reply.
pub const LLM_RETRIES: usize = 2;

const DEFAULT_DECOMPOSE: &str = include_str!("../data/prompts/decompose.txt");
const DEFAULT_SYNONYMS: &str = include_str!("../data/prompts/synonyms.txt");
const DEFAULT_AFFORDANCE: &str = include_str!("../data/prompts/affordance.txt");

/// Stub rules file: `{"queries": {q: [cls]}, "synonyms": {a: b}}`, plus an
/// optional `"affordances": {cls: use}` table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StubRules {
    #[serde(default)]
    pub queries: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
    #[serde(default)]
    pub affordances: BTreeMap<String, String>,
}

impl StubRules {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))
    }

    fn lookup_query(&self, query: &str) -> Option<&Vec<String>> {
        let key = normalize_text(query);
        self.queries
            .iter()
            .find(|(q, _)| normalize_text(q) == key)
            .map(|(_, v)| v)
    }

    fn are_synonyms(&self, a: &str, b: &str) -> bool {
        let (ca, cb) = (canonical_class(a), canonical_class(b));
        self.synonyms.iter().any(|(x, y)| {
            let (cx, cy) = (canonical_class(x), canonical_class(y));
            (cx == ca && cy == cb) || (cx == cb && cy == ca)
        })
    }
}

/// Prompt templates with `{query}`, `{targets}`, `{negatives}` and `{classes}`
/// placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub decompose: String,
    pub synonyms: String,
    pub affordance: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            decompose: DEFAULT_DECOMPOSE.to_string(),
            synonyms: DEFAULT_SYNONYMS.to_string(),
            affordance: DEFAULT_AFFORDANCE.to_string(),
        }
    }
}

impl PromptTemplates {
    /// Bundled templates, overridden by `decompose.txt`, `synonyms.txt` or
    /// `affordance.txt` when present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut t = Self::default();
        for (name, slot) in [
            ("decompose.txt", &mut t.decompose),
            ("synonyms.txt", &mut t.synonyms),
            ("affordance.txt", &mut t.affordance),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(t)
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

#[derive(Debug, Clone)]
pub struct HttpLlm {
    pub endpoint: String,
    pub model: String,
    pub templates: PromptTemplates,
    client: JsonClient,
}

impl HttpLlm {
    pub fn new(endpoint: &str, model: &str, templates: PromptTemplates) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            templates,
            client: JsonClient::default(),
        }
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let resp: CompletionResponse = self.client.post(
            &self.endpoint,
            &CompletionRequest {
                model: &self.model,
                prompt,
                temperature: 0.0,
            },
        )?;
        Ok(resp.text)
    }

    /// Sends `prompt` until a JSON string array can be parsed from the reply.
    fn ask_for_array(&self, prompt: &str) -> Result<Vec<String>> {
        let mut last = String::new();
        for attempt in 0..=LLM_RETRIES {
            let reply = self.complete(prompt)?;
            if let Some(items) = extract_json_array(&reply) {
                return Ok(items);
            }
            log::warn!("unparseable language model reply (attempt {}): {reply:?}", attempt + 1);
            last = reply;
        }
        Err(Error::UnparseableLlmReply(last))
    }
}

#[derive(Debug, Clone)]
pub enum LlmBackend {
    Stub(StubRules),
    Http(HttpLlm),
}

impl LlmBackend {
    /// Target classes needed to fulfil `query`: lowercase, deduplicated, in
    /// the order the backend produced them.
    pub fn decompose_query(&self, query: &str) -> Result<Vec<String>> {
        if query.trim().is_empty() {
            return Err(Error::InvalidConfig("query must not be empty".into()));
        }
        let raw = match self {
            LlmBackend::Stub(rules) => rules
                .lookup_query(query)
                .cloned()
                .ok_or_else(|| Error::NoRuleForQuery(query.to_string()))?,
            LlmBackend::Http(llm) => llm.ask_for_array(&llm.templates.decompose.replace("{query}", query))?,
        };
        Ok(normalize_class_list(raw))
    }

    /// `negatives` without any entry that names the same class as a target.
    /// Exact and plural-folded matches are removed before the backend is
    /// consulted; the backend is not called when nothing remains.
    pub fn filter_synonyms(&self, negatives: &[String], targets: &[String]) -> Result<Vec<String>> {
        let target_keys: HashSet<String> = targets.iter().map(|t| canonical_class(t)).collect();
        let remaining: Vec<String> = negatives
            .iter()
            .filter(|n| !target_keys.contains(&canonical_class(n)))
            .cloned()
            .collect();
        if remaining.is_empty() {
            return Ok(remaining);
        }
        match self {
            LlmBackend::Stub(rules) => Ok(remaining
                .into_iter()
                .filter(|n| !targets.iter().any(|t| rules.are_synonyms(n, t)))
                .collect()),
            LlmBackend::Http(llm) => {
                let prompt = llm
                    .templates
                    .synonyms
                    .replace("{targets}", &json_list(targets))
                    .replace("{negatives}", &json_list(&remaining));
                let judged: HashSet<String> = llm
                    .ask_for_array(&prompt)?
                    .iter()
                    .map(|s| canonical_class(s))
                    .collect();
                Ok(remaining
                    .into_iter()
                    .filter(|n| !judged.contains(&canonical_class(n)))
                    .collect())
            }
        }
    }

    /// Most common use of each class, used to build affordance target sets.
    pub fn affordances(&self, classes: &[String]) -> Result<Vec<String>> {
        match self {
            LlmBackend::Stub(rules) => classes
                .iter()
                .map(|c| {
                    let key = canonical_class(c);
                    rules
                        .affordances
                        .iter()
                        .find(|(k, _)| canonical_class(k) == key)
                        .map(|(_, v)| normalize_text(v))
                        .ok_or_else(|| Error::NoRuleForQuery(c.clone()))
                })
                .collect(),
            LlmBackend::Http(llm) => {
                let prompt = llm.templates.affordance.replace("{classes}", &json_list(classes));
                let items = llm.ask_for_array(&prompt)?;
                if items.len() != classes.len() {
                    return Err(Error::UnparseableLlmReply(format!(
                        "expected {} affordances, got {}",
                        classes.len(),
                        items.len()
                    )));
                }
                Ok(items.iter().map(|s| normalize_text(s)).collect())
            }
        }
    }
}

fn json_list(items: &[String]) -> String {
    serde_json::to_string(items).expect("string lists serialize")
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Lowercased, whitespace-collapsed, deduplicated, empty entries dropped.
pub fn normalize_class_list(raw: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    raw.iter()
        .map(|s| normalize_text(s))
        .filter(|s| !s.is_empty() && seen.insert(s.clone()))
        .collect()
}

/// First JSON array of strings embedded anywhere in `reply`.
pub fn extract_json_array(reply: &str) -> Option<Vec<String>> {
    reply.char_indices().filter(|(_, c)| *c == '[').find_map(|(i, _)| {
        serde_json::Deserializer::from_str(&reply[i..])
            .into_iter::<Vec<String>>()
            .next()
            .and_then(|r| r.ok())
    })
}
