//! Per-scene brute-force cosine retrieval with pre-trained or adapted class
//! prompts.

use serde::{Deserialize, Serialize};

use crate::adaptation::AdapterCheckpoint;
use crate::error::{Error, Result};
use crate::linalg::{dot_f32_f64, l2_normalize};
use crate::store::SceneStore;
use crate::text::EncoderBackend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSegment {
    pub segment_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_class: String,
    pub ranked: Vec<RankedSegment>,
}

impl RetrievalResult {
    pub fn top(&self) -> Option<&RankedSegment> {
        self.ranked.first()
    }
}

/// Dot product of two vectors assumed to be unit norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ranks the segments of one scene by similarity to `query`, highest first,
/// ties by ascending segment id. Returns at most `top_k` entries.
pub fn retrieve(store: &SceneStore, scene_index: usize, query_class: &str, query: &[f64], top_k: usize) -> Result<RetrievalResult> {
    if top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    if query.len() != store.dim() {
        return Err(Error::DimMismatch {
            expected: store.dim(),
            got: query.len(),
        });
    }
    let scene = store.scene(scene_index);
    let mut ranked: Vec<RankedSegment> = scene
        .segments
        .iter()
        .map(|s| RankedSegment {
            segment_id: s.segment_id.clone(),
            score: dot_f32_f64(store.segment_embedding(s), query),
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.segment_id.cmp(&b.segment_id)));
    ranked.truncate(top_k);
    Ok(RetrievalResult {
        query_class: query_class.to_string(),
        ranked,
    })
}

/// Where class query features come from.
#[derive(Debug, Clone, Copy)]
pub enum QueryEncoder<'a> {
    Pretrained(&'a EncoderBackend),
    Adapted {
        checkpoint: &'a AdapterCheckpoint,
        /// Needed for residual checkpoints over a remote encoder.
        backend: Option<&'a EncoderBackend>,
    },
}

impl QueryEncoder<'_> {
    /// Unit-norm query features for `classes`, in order.
    pub fn class_features(&self, classes: &[String]) -> Result<Vec<Vec<f64>>> {
        match self {
            QueryEncoder::Pretrained(backend) => Ok(backend
                .encode_classes(classes)?
                .iter()
                .map(|f| l2_normalize(f))
                .collect()),
            QueryEncoder::Adapted { checkpoint, backend } => checkpoint.class_features(classes, *backend),
        }
    }

    pub fn output_dim(&self) -> Option<usize> {
        match self {
            QueryEncoder::Pretrained(b) => b.output_dim(),
            QueryEncoder::Adapted { checkpoint, .. } => Some(checkpoint.output_dim()),
        }
    }
}

fn check_dim(store: &SceneStore, encoder: &QueryEncoder<'_>) -> Result<()> {
    match encoder.output_dim() {
        Some(d) if d != store.dim() => Err(Error::DimMismatch {
            expected: store.dim(),
            got: d,
        }),
        _ => Ok(()),
    }
}

/// Encodes `class_name` with `encoder` and ranks one scene.
pub fn retrieve_class(
    store: &SceneStore,
    scene_index: usize,
    encoder: &QueryEncoder<'_>,
    class_name: &str,
    top_k: usize,
) -> Result<RetrievalResult> {
    check_dim(store, encoder)?;
    let query = encoder.class_features(&[class_name.to_string()])?.remove(0);
    retrieve(store, scene_index, class_name, &query, top_k)
}

pub fn retrieve_with_checkpoint(
    store: &SceneStore,
    scene_index: usize,
    checkpoint: &AdapterCheckpoint,
    backend: Option<&EncoderBackend>,
    class_name: &str,
    top_k: usize,
) -> Result<RetrievalResult> {
    retrieve_class(store, scene_index, &QueryEncoder::Adapted { checkpoint, backend }, class_name, top_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{SceneInput, SegmentInput};

    fn store(embs: &[[f32; 2]]) -> SceneStore {
        let segments = embs
            .iter()
            .enumerate()
            .map(|(i, e)| SegmentInput {
                segment_id: format!("s{}", i + 1),
                caption: "thing".into(),
                embedding: e.to_vec(),
                points: vec![[0.0; 3]],
                mask_ref: None,
                bbox: None,
            })
            .collect();
        SceneStore::new(2)
            .append_scene(SceneInput {
                scene_id: "room".into(),
                segments,
            })
            .unwrap()
    }

    fn unit(s: f64) -> [f32; 2] {
        [s as f32, (1.0 - s * s).sqrt() as f32]
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[0.6, 0.8], &[0.6, 0.8]), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn ranking_example() {
        let s = store(&[unit(0.1), unit(0.9), unit(0.5)]);
        let r = retrieve(&s, 0, "x", &[1.0, 0.0], 2).unwrap();
        let ids: Vec<&str> = r.ranked.iter().map(|x| x.segment_id.as_str()).collect();
        assert_eq!(ids, ["s2", "s3"]);
        assert_eq!(retrieve(&s, 0, "x", &[1.0, 0.0], 10).unwrap().ranked.len(), 3);
        assert!(retrieve(&s, 0, "x", &[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn ties_break_on_segment_id() {
        let s = store(&[unit(0.5), unit(0.5), unit(0.5)]);
        let r = retrieve(&s, 0, "x", &[1.0, 0.0], 3).unwrap();
        let ids: Vec<&str> = r.ranked.iter().map(|x| x.segment_id.as_str()).collect();
        assert_eq!(ids, ["s1", "s2", "s3"]);
    }

    #[test]
    fn single_segment_scene() {
        let s = store(&[unit(0.3)]);
        assert_eq!(retrieve(&s, 0, "x", &[0.0, 1.0], 1).unwrap().ranked[0].segment_id, "s1");
    }
}
