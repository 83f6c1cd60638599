//! End-to-end runs: adaptation for one target set, class-set benchmarks,
//! ablations and parameter sweeps.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{train, AdapterCheckpoint, LossKind, NegativeSource, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_classes, ClassHit, TruthSet};
use crate::llm::LlmBackend;
use crate::retrieval::QueryEncoder;
use crate::selection::{build_class_set, extract_negative_classes, select_training_data, ClassSet, Stopwords};
use crate::store::SceneStore;
use crate::synth::NamedClassSet;
use crate::text::EncoderBackend;

/// Mined caption negatives, computed once per adaptation archive.
pub fn mine_negatives(store: &SceneStore, config: &TrainConfig, stopwords: &Stopwords) -> Vec<String> {
    extract_negative_classes(store, config.n_negatives, stopwords)
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub checkpoint: AdapterCheckpoint,
    pub class_set: ClassSet,
    pub training_items: usize,
    pub train_seconds: f64,
}

/// Builds the class set, selects training data and trains.
pub fn adapt_targets(
    store: &SceneStore,
    targets: &[String],
    negatives: &[String],
    backend: &EncoderBackend,
    llm: &LlmBackend,
    config: &TrainConfig,
) -> Result<AdaptOutcome> {
    let class_set = build_class_set(targets, negatives, llm)?;
    let training_set = select_training_data(store, &class_set, backend, config.k)?;
    let start = Instant::now();
    let checkpoint = train(store, &class_set, &training_set, backend, config)?;
    Ok(AdaptOutcome {
        training_items: checkpoint.meta.training_items,
        checkpoint,
        class_set,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub name: String,
    pub pretrained_hits: Vec<ClassHit>,
    pub adapted_hits: Vec<ClassHit>,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub sets: Vec<SetResult>,
    /// Mean over every class query of every set.
    pub pretrained_recall_at_1: f64,
    pub adapted_recall_at_1: Option<f64>,
    pub train_seconds: f64,
}

fn hit_rate(hits: &[ClassHit]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().filter(|h| h.hit).count() as f64 / hits.len() as f64
}

/// What to compare against the pre-trained prompt for each class set.
pub struct BenchInputs<'a> {
    pub adapt: &'a SceneStore,
    pub eval: &'a SceneStore,
    pub truths: &'a TruthSet,
    pub class_sets: &'a [NamedClassSet],
    pub backend: &'a EncoderBackend,
    pub llm: &'a LlmBackend,
    pub negatives: &'a [String],
}

/// Adapts once per class set (unless `config` is `None`) and scores
/// recall@1 on the evaluation scenes, alongside the pre-trained prompt.
pub fn run_benchmark(inputs: &BenchInputs<'_>, config: Option<&TrainConfig>) -> Result<BenchResult> {
    if inputs.class_sets.is_empty() {
        return Err(Error::InvalidConfig("no class sets to evaluate".into()));
    }
    let sets: Vec<SetResult> = inputs
        .class_sets
        .par_iter()
        .map(|set| -> Result<SetResult> {
            let pre = evaluate_classes(inputs.eval, inputs.truths, &set.targets, &QueryEncoder::Pretrained(inputs.backend))?;
            let (adapted_hits, secs) = match config {
                None => (Vec::new(), 0.0),
                Some(cfg) => {
                    let out = adapt_targets(inputs.adapt, &set.targets, inputs.negatives, inputs.backend, inputs.llm, cfg)?;
                    let enc = QueryEncoder::Adapted {
                        checkpoint: &out.checkpoint,
                        backend: Some(inputs.backend),
                    };
                    (evaluate_classes(inputs.eval, inputs.truths, &set.targets, &enc)?.per_class, out.train_seconds)
                }
            };
            Ok(SetResult {
                name: set.name.clone(),
                pretrained_hits: pre.per_class,
                adapted_hits,
                train_seconds: secs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all_pre: Vec<ClassHit> = sets.iter().flat_map(|s| s.pretrained_hits.clone()).collect();
    let all_ad: Vec<ClassHit> = sets.iter().flat_map(|s| s.adapted_hits.clone()).collect();
    Ok(BenchResult {
        pretrained_recall_at_1: hit_rate(&all_pre),
        adapted_recall_at_1: config.map(|_| hit_rate(&all_ad)),
        train_seconds: sets.iter().map(|s| s.train_seconds).sum(),
        sets,
    })
}

/// The seven compared configurations, `None` standing for the pre-trained
/// prompt.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(&'static str, Option<TrainConfig>)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        Some(c)
    };
    vec![
        ("pretrained", None),
        (
            "upl",
            with(&|c| {
                c.loss_kind = LossKind::UplCe;
                c.use_negatives = false;
                c.use_topk = false;
            }),
        ),
        (
            "vanilla_ueo",
            with(&|c| {
                c.use_negatives = false;
                c.use_topk = false;
            }),
        ),
        ("topk_only", with(&|c| c.use_negatives = false)),
        ("negatives_only", with(&|c| c.use_topk = false)),
        ("random_words", with(&|c| c.negative_source = NegativeSource::RandomWords)),
        ("full", with(&|_| {})),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub recall_at_1: f64,
    pub pretrained_recall_at_1: f64,
    pub train_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
}

pub fn run_ablation(inputs: &BenchInputs<'_>, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    let pretrained = run_benchmark(inputs, None)?.pretrained_recall_at_1;
    ablation_variants(base)
        .into_iter()
        .map(|(name, cfg)| {
            let (recall, secs) = match &cfg {
                None => (pretrained, 0.0),
                Some(c) => {
                    let r = run_benchmark(inputs, Some(c))?;
                    (r.adapted_recall_at_1.expect("adapted"), r.train_seconds)
                }
            };
            Ok(AblationRow {
                variant: name.to_string(),
                recall_at_1: recall,
                pretrained_recall_at_1: pretrained,
                train_seconds: secs,
                config: cfg,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    K,
    Negatives,
    Scenes,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepParam::K),
            "negatives" => Ok(SweepParam::Negatives),
            "scenes" => Ok(SweepParam::Scenes),
            other => Err(Error::InvalidConfig(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub recall_at_1: f64,
    pub pretrained_recall_at_1: f64,
    pub train_seconds: f64,
}

/// One adapt-and-evaluate run per value. A scenes sweep adapts on the first
/// `value` scenes of the adaptation archive.
pub fn run_sweep(
    inputs: &BenchInputs<'_>,
    base: &TrainConfig,
    stopwords: &Stopwords,
    param: SweepParam,
    values: &[usize],
) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            let prefix;
            let mined;
            let mut run = BenchInputs { ..*inputs };
            match param {
                SweepParam::K => cfg.k = v,
                SweepParam::Negatives => {
                    cfg.n_negatives = v;
                    mined = mine_negatives(inputs.adapt, &cfg, stopwords);
                    run.negatives = &mined;
                }
                SweepParam::Scenes => {
                    prefix = inputs.adapt.prefix(v)?;
                    run.adapt = &prefix;
                }
            }
            let r = run_benchmark(&run, Some(&cfg))?;
            Ok(SweepRow {
                value: v,
                recall_at_1: r.adapted_recall_at_1.expect("adapted"),
                pretrained_recall_at_1: r.pretrained_recall_at_1,
                train_seconds: r.train_seconds,
            })
        })
        .collect()
}

pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

#[derive(Serialize)]
struct AblationCsv<'a> {
    variant: &'a str,
    recall_at_1: f64,
    pretrained_recall_at_1: f64,
    train_seconds: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let flat: Vec<AblationCsv<'_>> = rows
        .iter()
        .map(|r| AblationCsv {
            variant: &r.variant,
            recall_at_1: r.recall_at_1,
            pretrained_recall_at_1: r.pretrained_recall_at_1,
            train_seconds: r.train_seconds,
        })
        .collect();
    rows_to_csv(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_named_variants() {
        let v = ablation_variants(&TrainConfig::default());
        let names: Vec<&str> = v.iter().map(|x| x.0).collect();
        assert_eq!(
            names,
            ["pretrained", "upl", "vanilla_ueo", "topk_only", "negatives_only", "random_words", "full"]
        );
        assert_eq!(v[6].1.as_ref().unwrap(), &TrainConfig::default());
    }

    #[test]
    fn sweep_csv_header() {
        let rows = vec![SweepRow {
            value: 1,
            recall_at_1: 0.5,
            pretrained_recall_at_1: 0.25,
            train_seconds: 0.1,
        }];
        assert!(rows_to_csv(&rows).starts_with("value,recall_at_1,pretrained_recall_at_1,train_seconds\n"));
    }
}
