//! Text side of the vision-language model: tokenization, the frozen toy
//! encoder with its prompt learner, and the remote forward-only encoder.

mod http;
mod toy;
mod vocab;

pub use http::{encode_query_http, HttpTextEncoder, TEXT_ENCODER_URL_ENV};
pub use toy::{
    context_gradient, init_context, ForwardTrace, PromptLearner, ToyEncoderConfig, ToyTextEncoder,
};
pub use vocab::{canonical_class, fold_plural, split_words, tokenize, TokenVocab, UNK_ID};

use crate::error::Result;

/// Template used when the encoder cannot learn a prompt.
pub const HTTP_PROMPT_PREFIX: &str = "a photo of a";

pub fn http_prompt(class_name: &str) -> String {
    format!("{HTTP_PROMPT_PREFIX} {class_name}")
}

/// Text encoder used for class and query features.
#[derive(Debug)]
pub enum EncoderBackend {
    /// Toy encoder plus the current prompt context; supports gradients.
    Toy {
        encoder: ToyTextEncoder,
        learner: PromptLearner,
    },
    /// Remote encoder; forward only, prompt fixed to `"a photo of a {class}"`.
    Http(HttpTextEncoder),
}

impl EncoderBackend {
    pub fn toy(encoder: ToyTextEncoder, learner: PromptLearner) -> Self {
        EncoderBackend::Toy { encoder, learner }
    }

    pub fn output_dim(&self) -> Option<usize> {
        match self {
            EncoderBackend::Toy { encoder, .. } => Some(encoder.output_dim()),
            EncoderBackend::Http(h) => h.expected_dim(),
        }
    }

    pub fn encode_prompted_class(&self, class_name: &str) -> Result<Vec<f64>> {
        Ok(self.encode_classes(&[class_name.to_string()])?.remove(0))
    }

    pub fn encode_classes(&self, class_names: &[String]) -> Result<Vec<Vec<f64>>> {
        match self {
            EncoderBackend::Toy { encoder, learner } => {
                let ctx = learner.context_f64();
                class_names.iter().map(|c| encoder.encode(&ctx, c)).collect()
            }
            EncoderBackend::Http(h) => {
                let prompts: Vec<String> = class_names.iter().map(|c| http_prompt(c)).collect();
                h.encode(&prompts)
            }
        }
    }
}

/// Free-function form of [`EncoderBackend::encode_prompted_class`].
pub fn encode_prompted_class(backend: &EncoderBackend, class_name: &str) -> Result<Vec<f64>> {
    backend.encode_prompted_class(class_name)
}
