use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::http::JsonClient;
use crate::linalg::norm;

/// Environment variable overriding the text-encoder endpoint.
pub const TEXT_ENCODER_URL_ENV: &str = "QADAPT_TEXT_ENCODER_URL";

#[derive(Serialize)]
struct EncodeRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EncodeResponse {
    dim: u32,
    embeddings: Vec<Vec<f32>>,
}

/// Remote forward-only text encoder speaking the `/encode` contract.
///
/// Results are cached per exact input string for the lifetime of the client.
#[derive(Debug)]
pub struct HttpTextEncoder {
    url: String,
    expected_dim: Option<usize>,
    client: JsonClient,
    cache: Mutex<HashMap<String, Vec<f64>>>,
    calls: AtomicUsize,
}

impl HttpTextEncoder {
    /// `endpoint` is a base URL; `/encode` is appended unless already present.
    pub fn new(endpoint: &str, expected_dim: Option<usize>) -> Self {
        let trimmed = endpoint.trim_end_matches('/');
        let url = if trimmed.ends_with("/encode") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/encode")
        };
        Self {
            url,
            expected_dim,
            client: JsonClient::default(),
            cache: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn expected_dim(&self) -> Option<usize> {
        self.expected_dim
    }

    /// Number of network requests issued so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Unit features for `texts`, in order.
    pub fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let missing: Vec<String> = {
            let cache = self.cache.lock().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !cache.contains_key(*t) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let resp: EncodeResponse = self.client.post(&self.url, &EncodeRequest { texts: &missing })?;
            let dim = resp.dim as usize;
            if let Some(expected) = self.expected_dim {
                if dim != expected {
                    return Err(Error::DimMismatch { expected, got: dim });
                }
            }
            if resp.embeddings.len() != missing.len() {
                return Err(Error::Transport {
                    endpoint: self.url.clone(),
                    reason: format!("asked for {} embeddings, got {}", missing.len(), resp.embeddings.len()),
                });
            }
            let mut fresh = Vec::with_capacity(missing.len());
            for (text, emb) in missing.into_iter().zip(resp.embeddings) {
                if emb.len() != dim {
                    return Err(Error::DimMismatch { expected: dim, got: emb.len() });
                }
                let v: Vec<f64> = emb.iter().map(|x| f64::from(*x)).collect();
                let n = norm(&v);
                if !n.is_finite() || n == 0.0 {
                    return Err(Error::NonFinite("text embedding from server"));
                }
                fresh.push((text, v.iter().map(|x| x / n).collect::<Vec<_>>()));
            }
            self.cache.lock().expect("cache lock").extend(fresh);
        }
        let cache = self.cache.lock().expect("cache lock");
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }
}

/// Shorthand for a one-off query encoding against `endpoint`.
pub fn encode_query_http(encoder: &HttpTextEncoder, texts: &[String]) -> Result<Vec<Vec<f64>>> {
    encoder.encode(texts)
}
