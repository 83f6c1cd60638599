//! Adaptation class set and top-k training data selection.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dot_f32_f64;
use crate::llm::LlmBackend;
use crate::store::SceneStore;
use crate::text::{canonical_class, fold_plural, split_words, EncoderBackend};

const BUNDLED_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Words ignored when mining negative classes from captions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_STOPWORDS)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        fs::read_to_string(path)
            .map(|s| Self::parse(&s))
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        Self(words.into_iter().map(|w| w.as_ref().trim().to_lowercase()).collect())
    }

    fn parse(text: &str) -> Self {
        Self::from_words(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }
}

impl Default for Stopwords {
    fn default() -> Self {
        Self::bundled()
    }
}

/// Folded caption nouns with their occurrence counts, most frequent first and
/// ties in lexicographic order.
pub fn caption_noun_counts(store: &SceneStore, stopwords: &Stopwords) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for seg in store.segments() {
        for word in split_words(&seg.caption) {
            if stopwords.contains(&word) || word.chars().all(|c| c.is_numeric()) {
                continue;
            }
            let stem = fold_plural(&word);
            if stopwords.contains(&stem) {
                continue;
            }
            *counts.entry(stem).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// The `n` most frequent caption nouns.
pub fn extract_negative_classes(store: &SceneStore, n: usize, stopwords: &Stopwords) -> Vec<String> {
    if n == 0 {
        return Vec::new();
    }
    let ranked = caption_noun_counts(store, stopwords);
    if ranked.len() < n && !store.is_empty() {
        log::warn!("only {} distinct caption nouns for {n} requested negative classes", ranked.len());
    }
    ranked.into_iter().take(n).map(|(w, _)| w).collect()
}

/// Target classes followed by negative classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet {
    pub targets: Vec<String>,
    pub negatives: Vec<String>,
}

impl ClassSet {
    /// Builds a class set, dropping duplicates across the union (first
    /// occurrence wins, comparison on canonical names).
    pub fn new(targets: Vec<String>, negatives: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        let targets: Vec<String> = targets
            .into_iter()
            .filter(|t| seen.insert(canonical_class(t)))
            .collect();
        if targets.is_empty() {
            return Err(Error::InvalidConfig("at least one target class is required".into()));
        }
        let negatives = negatives
            .into_iter()
            .filter(|n| seen.insert(canonical_class(n)))
            .collect();
        Ok(Self { targets, negatives })
    }

    pub fn targets_only(&self) -> Self {
        Self {
            targets: self.targets.clone(),
            negatives: Vec::new(),
        }
    }

    /// All adaptation classes, targets first.
    pub fn all(&self) -> Vec<String> {
        self.targets.iter().chain(&self.negatives).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.targets.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Filters `negatives` for synonyms of `targets` and concatenates.
pub fn build_class_set(targets: &[String], negatives: &[String], backend: &LlmBackend) -> Result<ClassSet> {
    if targets.is_empty() {
        return Err(Error::InvalidConfig("at least one target class is required".into()));
    }
    let filtered = backend.filter_synonyms(negatives, targets)?;
    ClassSet::new(targets.to_vec(), filtered)
}

/// One selected segment with its pseudo-label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingItem {
    pub scene_index: usize,
    pub segment_index: usize,
    pub segment_id: String,
    pub embedding_row: u32,
    /// Index into the class set's targets.
    pub class_index: usize,
    pub similarity: f64,
    /// Rank within its (scene, class) list, 0-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub items: Vec<TrainingItem>,
    pub k: usize,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn by_score_then_id(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// The top `k` segments of one scene for a query feature, as
/// `(segment index, similarity)` sorted by descending similarity and then
/// ascending segment id.
pub fn rank_scene(store: &SceneStore, scene_index: usize, feature: &[f64], k: usize) -> Vec<(usize, f64)> {
    let scene = store.scene(scene_index);
    let mut scored: Vec<(usize, f64)> = scene
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| (i, dot_f32_f64(store.segment_embedding(s), feature)))
        .collect();
    scored.sort_by(|a, b| {
        by_score_then_id(
            (a.1, &scene.segments[a.0].segment_id),
            (b.1, &scene.segments[b.0].segment_id),
        )
    });
    scored.truncate(k);
    scored
}

/// Per scene and per target feature, the top-`k` list before deduplication.
pub fn per_class_candidates(store: &SceneStore, target_features: &[Vec<f64>], k: usize) -> Vec<Vec<Vec<(usize, f64)>>> {
    (0..store.scenes().len())
        .map(|j| target_features.iter().map(|f| rank_scene(store, j, f, k)).collect())
        .collect()
}

/// Merges per-class candidate lists so that each segment appears once, under
/// the class where it scored highest (lower class index on ties). Output is
/// ordered by scene, class and rank.
pub fn merge_candidates(store: &SceneStore, candidates: &[Vec<Vec<(usize, f64)>>], k: usize) -> TrainingSet {
    let mut items = Vec::new();
    for (scene_index, per_class) in candidates.iter().enumerate() {
        let mut best: HashMap<usize, (usize, f64)> = HashMap::new();
        for (class_index, list) in per_class.iter().enumerate() {
            for &(seg, score) in list {
                best.entry(seg)
                    .and_modify(|cur| {
                        if score > cur.1 {
                            *cur = (class_index, score);
                        }
                    })
                    .or_insert((class_index, score));
            }
        }
        let scene = store.scene(scene_index);
        for (class_index, list) in per_class.iter().enumerate() {
            for (rank, &(seg, score)) in list.iter().enumerate() {
                if best[&seg].0 == class_index {
                    let rec = &scene.segments[seg];
                    items.push(TrainingItem {
                        scene_index,
                        segment_index: seg,
                        segment_id: rec.segment_id.clone(),
                        embedding_row: rec.embedding_row,
                        class_index,
                        similarity: score,
                        rank,
                    });
                }
            }
        }
    }
    TrainingSet { items, k }
}

/// Top-`k` selection from precomputed target features.
pub fn select_with_features(store: &SceneStore, target_features: &[Vec<f64>], k: usize) -> Result<TrainingSet> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if store.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    for f in target_features {
        if f.len() != store.dim() {
            return Err(Error::DimMismatch {
                expected: store.dim(),
                got: f.len(),
            });
        }
    }
    let candidates = per_class_candidates(store, target_features, k);
    Ok(merge_candidates(store, &candidates, k))
}

/// Selects the filtered training set using the backend's current prompt for
/// every target class.
pub fn select_training_data(
    store: &SceneStore,
    class_set: &ClassSet,
    backend: &EncoderBackend,
    k: usize,
) -> Result<TrainingSet> {
    let features = backend.encode_classes(&class_set.targets)?;
    select_with_features(store, &features, k)
}
