//! Frozen desk-scale text encoder with a learnable prompt prefix.
//!
//! A prompt is the sequence `[V_1] .. [V_m] [CLASS tokens]`. The encoder
//! mean-pools the prompt rows, runs a two-layer tanh MLP and L2-normalizes the
//! output. Only the context rows `V_i` are ever trained.

use serde::{Deserialize, Serialize};

use super::vocab::{split_words, tokenize, TokenVocab, UNK_ID};
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize_backward, norm};
use crate::rng::{derive_seed, fnv1a64, seeded_weights, SplitMix64};


const UNK_LABEL: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyEncoderConfig {
    pub seed: u64,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Token rows are uniform in `[-token_scale, token_scale]`.
    pub token_scale: f32,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            token_dim: 32,
            hidden_dim: 64,
            output_dim: 32,
            token_scale: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder {
    config: ToyEncoderConfig,
    vocab: TokenVocab,
    embed: Vec<f32>,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub feature: Vec<f64>,
    hidden: Vec<f64>,
    pre_norm: f64,
    pool_count: usize,
    context_rows: usize,
}

fn token_row(seed: u64, token: &str, dim: usize, scale: f32) -> Vec<f32> {
    let mut rng = SplitMix64::new(derive_seed(seed, &format!("token:{token}")));
    (0..dim).map(|_| rng.next_symmetric(scale)).collect()
}

impl ToyTextEncoder {
    pub fn new(config: ToyEncoderConfig, vocab: TokenVocab) -> Self {
        let ToyEncoderConfig {
            seed,
            token_dim: d,
            hidden_dim: h,
            output_dim: out,
            token_scale,
        } = config;
        let mlp_seed = derive_seed(seed, "mlp");
        let w1 = seeded_weights(derive_seed(mlp_seed, "w1"), h * d, d);
        let b1 = seeded_weights(derive_seed(mlp_seed, "b1"), h, d);
        let w2 = seeded_weights(derive_seed(mlp_seed, "w2"), out * h, h);
        let b2 = seeded_weights(derive_seed(mlp_seed, "b2"), out, h);

        let mut embed = Vec::with_capacity(vocab.len() * d);
        embed.extend(token_row(seed, UNK_LABEL, d, token_scale));
        for t in vocab.tokens() {
            embed.extend(token_row(seed, t, d, token_scale));
        }
        Self {
            config,
            vocab,
            embed,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Same weights, vocabulary grown by every word in `texts`. Rows of
    /// existing tokens are unchanged because each row depends only on the
    /// seed and the token string.
    pub fn extended<I, S>(&self, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self::new(self.config.clone(), self.vocab.extended(texts))
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &TokenVocab {
        &self.vocab
    }

    pub fn token_dim(&self) -> usize {
        self.config.token_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn embedding_row(&self, id: u32) -> &[f32] {
        let d = self.config.token_dim;
        &self.embed[id as usize * d..(id as usize + 1) * d]
    }

    /// Hash over every frozen parameter, for detecting accidental mutation.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for part in [&self.embed, &self.w1, &self.b1, &self.w2, &self.b2] {
            for v in part.iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        for t in self.vocab.tokens() {
            bytes.extend_from_slice(t.as_bytes());
            bytes.push(0);
        }
        fnv1a64(&bytes)
    }

    /// Runs the encoder on `context` (row-major `m x token_dim`) followed by
    /// the class tokens.
    pub fn forward(&self, context: &[f64], class_ids: &[u32]) -> Result<ForwardTrace> {
        let d = self.config.token_dim;
        let h = self.config.hidden_dim;
        let out = self.config.output_dim;
        assert_eq!(context.len() % d, 0, "context is not a whole number of rows");
        let m = context.len() / d;
        let n = m + class_ids.len();
        if n == 0 {
            return Err(Error::NothingToPool(String::new()));
        }

        let mut pooled = vec![0.0f64; d];
        for row in context.chunks_exact(d) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        for &id in class_ids {
            for (p, v) in pooled.iter_mut().zip(self.embedding_row(id)) {
                *p += f64::from(*v);
            }
        }
        let inv_n = 1.0 / n as f64;
        pooled.iter_mut().for_each(|p| *p *= inv_n);

        let hidden: Vec<f64> = (0..h)
            .map(|i| {
                let w = &self.w1[i * d..(i + 1) * d];
                let z: f64 = w.iter().zip(&pooled).map(|(a, b)| f64::from(*a) * b).sum::<f64>()
                    + f64::from(self.b1[i]);
                z.tanh()
            })
            .collect();

        let z2: Vec<f64> = (0..out)
            .map(|i| {
                let w = &self.w2[i * h..(i + 1) * h];
                w.iter().zip(&hidden).map(|(a, b)| f64::from(*a) * b).sum::<f64>()
                    + f64::from(self.b2[i])
            })
            .collect();
        let pre_norm = norm(&z2);
        let feature = z2.iter().map(|v| v / pre_norm).collect();
        Ok(ForwardTrace {
            feature,
            hidden,
            pre_norm,
            pool_count: n,
            context_rows: m,
        })
    }

    /// Gradient of a scalar loss with respect to the context rows, given the
    /// gradient with respect to the output feature. Every context row receives
    /// the same gradient because pooling is a plain mean.
    pub fn backward_context(&self, trace: &ForwardTrace, upstream: &[f64]) -> Vec<f64> {
        let dpooled = self.backward_pooled(trace, upstream);
        let scale = 1.0 / trace.pool_count as f64;
        let row: Vec<f64> = dpooled.iter().map(|g| g * scale).collect();
        let mut grad = Vec::with_capacity(trace.context_rows * row.len());
        for _ in 0..trace.context_rows {
            grad.extend_from_slice(&row);
        }
        grad
    }

    fn backward_pooled(&self, trace: &ForwardTrace, upstream: &[f64]) -> Vec<f64> {
        let d = self.config.token_dim;
        let h = self.config.hidden_dim;
        let out = self.config.output_dim;
        let dz2 = l2_normalize_backward(&trace.feature, trace.pre_norm, upstream);

        let mut dz1 = vec![0.0f64; h];
        for i in 0..out {
            let w = &self.w2[i * h..(i + 1) * h];
            for (acc, wij) in dz1.iter_mut().zip(w) {
                *acc += f64::from(*wij) * dz2[i];
            }
        }
        for (g, a) in dz1.iter_mut().zip(&trace.hidden) {
            *g *= 1.0 - a * a;
        }

        let mut dpooled = vec![0.0f64; d];
        for i in 0..h {
            let w = &self.w1[i * d..(i + 1) * d];
            for (acc, wij) in dpooled.iter_mut().zip(w) {
                *acc += f64::from(*wij) * dz1[i];
            }
        }
        dpooled
    }

    /// Encodes `class_name` behind `context`.
    pub fn encode(&self, context: &[f64], class_name: &str) -> Result<Vec<f64>> {
        let ids = tokenize(class_name, &self.vocab);
        self.forward(context, &ids)
            .map(|t| t.feature)
            .map_err(|_| Error::NothingToPool(class_name.to_string()))
    }
}

/// Learnable context vectors `V_1 .. V_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLearner {
    rows: usize,
    dim: usize,
    context: Vec<f32>,
}

impl PromptLearner {
    pub fn new(rows: usize, dim: usize, context: Vec<f32>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::InvalidConfig("prompt learner needs at least one context vector".into()));
        }
        if context.len() != rows * dim {
            return Err(Error::DimMismatch {
                expected: rows * dim,
                got: context.len(),
            });
        }
        if context.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt context"));
        }
        Ok(Self { rows, dim, context })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context(&self) -> &[f32] {
        &self.context
    }

    pub fn context_f64(&self) -> Vec<f64> {
        self.context.iter().map(|v| f64::from(*v)).collect()
    }
}

/// Initializes `m` context rows from the embeddings of `phrase`. Extra tokens
/// are truncated, missing rows are zero-padded.
pub fn init_context(encoder: &ToyTextEncoder, phrase: &str, m: usize) -> Result<PromptLearner> {
    let d = encoder.token_dim();
    let words = split_words(phrase);
    if words.len() != m {
        log::warn!(
            "context phrase {phrase:?} has {} tokens for {m} context vectors; {}",
            words.len(),
            if words.len() < m { "zero-padding" } else { "truncating" }
        );
    }
    let mut context = vec![0.0f32; m * d];
    for (i, w) in words.iter().take(m).enumerate() {
        let id = encoder.vocab().id(w);
        if id == UNK_ID {
            log::warn!("context token {w:?} is not in the vocabulary; using the unknown row");
        }
        context[i * d..(i + 1) * d].copy_from_slice(encoder.embedding_row(id));
    }
    PromptLearner::new(m, d, context)
}

/// Analytic gradient of a loss with respect to the learner's context, given
/// `dL/dfeature` for one class.
pub fn context_gradient(
    encoder: &ToyTextEncoder,
    learner: &PromptLearner,
    class_name: &str,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let ids = tokenize(class_name, encoder.vocab());
    let trace = encoder.forward(&learner.context_f64(), &ids)?;
    Ok(encoder.backward_context(&trace, upstream))
}
