use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{
    AdapterCheckpoint, CheckpointMeta, EncoderSpec, Tensor, CHECKPOINT_VERSION, CONTEXT_TENSOR, RESIDUAL_BIAS_TENSOR,
    RESIDUAL_WEIGHT_TENSOR,
};
use super::loss::{class_probabilities, softmax_backward, ueo_loss, upl_cross_entropy, BatchPrediction};
use super::{adam_step, AdamParams, AdamState, AdapterMode, LossKind, NegativeSource, TrainConfig};
use crate::error::{Error, Result};
use crate::linalg::{dot, l2_normalize_backward, norm, to_f64, Mat};
use crate::rng::derive_seed;
use crate::selection::{ClassSet, TrainingSet};
use crate::store::SceneStore;
use crate::text::{canonical_class, tokenize, EncoderBackend, ToyTextEncoder};

const RANDOM_WORDS: &str = include_str!("../../data/random_words.txt");

/// `n` words drawn without replacement from the bundled random-word list,
/// skipping anything that names a target.
pub fn random_word_negatives(targets: &[String], n: usize, seed: u64) -> Vec<String> {
    let targets: Vec<String> = targets.iter().map(|t| canonical_class(t)).collect();
    let mut pool: Vec<&str> = RANDOM_WORDS
        .lines()
        .map(str::trim)
        .filter(|w| !w.is_empty() && !targets.contains(&canonical_class(w)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "random-words"));
    pool.shuffle(&mut rng);
    pool.into_iter().take(n).map(str::to_string).collect()
}

/// Classes the softmax runs over for `config`: the targets, then negatives
/// unless they are switched off.
pub fn effective_classes(class_set: &ClassSet, config: &TrainConfig) -> Vec<String> {
    let mut classes = class_set.targets.clone();
    if config.use_negatives {
        match config.negative_source {
            NegativeSource::Captions => classes.extend(class_set.negatives.iter().cloned()),
            NegativeSource::RandomWords => {
                classes.extend(random_word_negatives(&class_set.targets, config.n_negatives, config.seed))
            }
        }
    }
    classes
}

/// Row-major identity `M` followed by a zero bias.
pub fn identity_residual(dim: usize) -> Vec<f64> {
    let mut p = vec![0.0; dim * dim + dim];
    for i in 0..dim {
        p[i * dim + i] = 1.0;
    }
    p
}

/// `l2norm(M t + b)` for every base feature, with the pre-normalization norms.
pub fn residual_features(params: &[f64], base: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let Some(dim) = base.first().map(Vec::len) else {
        return (Vec::new(), Vec::new());
    };
    assert_eq!(params.len(), dim * dim + dim, "residual parameters do not match the feature size");
    let (m, b) = params.split_at(dim * dim);
    base.iter()
        .map(|t| {
            let z: Vec<f64> = (0..dim).map(|i| dot(&m[i * dim..(i + 1) * dim], t) + b[i]).collect();
            let n = norm(&z);
            (z.iter().map(|v| v / n).collect(), n)
        })
        .unzip()
}

/// Splits `n` items into consecutive batches. A trailing batch with fewer
/// than two items is merged into the one before it.
pub fn make_batches(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n).step_by(batch_size.max(1)).map(|s| s..(s + batch_size).min(n)).collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() < 2) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

enum FeatureSource<'a> {
    Prompt {
        encoder: &'a ToyTextEncoder,
        class_ids: Vec<Vec<u32>>,
    },
    Residual {
        base: Vec<Vec<f64>>,
    },
}

/// The batch objective as a function of the trainable parameters: prompt
/// context rows, or a row-major residual matrix followed by its bias.
pub struct Objective<'a> {
    source: FeatureSource<'a>,
    pub tau: f64,
    pub loss_kind: LossKind,
    pub detach_weights: bool,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub clamped: usize,
    pub prediction: BatchPrediction,
}

impl<'a> Objective<'a> {
    pub fn prompt(encoder: &'a ToyTextEncoder, classes: &[String], tau: f64, loss_kind: LossKind) -> Self {
        let class_ids = classes.iter().map(|c| tokenize(c, encoder.vocab())).collect();
        Self {
            source: FeatureSource::Prompt { encoder, class_ids },
            tau,
            loss_kind,
            detach_weights: false,
        }
    }

    pub fn residual(base: Vec<Vec<f64>>, tau: f64, loss_kind: LossKind) -> Self {
        Self {
            source: FeatureSource::Residual { base },
            tau,
            loss_kind,
            detach_weights: false,
        }
    }

    pub fn with_detached_weights(mut self, detach: bool) -> Self {
        self.detach_weights = detach;
        self
    }

    pub fn num_classes(&self) -> usize {
        match &self.source {
            FeatureSource::Prompt { class_ids, .. } => class_ids.len(),
            FeatureSource::Residual { base } => base.len(),
        }
    }

    pub fn class_features(&self, params: &[f64]) -> Result<Vec<Vec<f64>>> {
        match &self.source {
            FeatureSource::Prompt { encoder, class_ids } => class_ids
                .iter()
                .map(|ids| encoder.forward(params, ids).map(|t| t.feature))
                .collect(),
            FeatureSource::Residual { base } => Ok(residual_features(params, base).0),
        }
    }

    /// Loss and parameter gradient on one batch of image features.
    /// `labels` is only read by the cross-entropy objective.
    pub fn evaluate(&self, params: &[f64], images: &Mat, labels: &[usize]) -> Result<Evaluation> {
        let (features, traces, norms) = match &self.source {
            FeatureSource::Prompt { encoder, class_ids } => {
                let traces = class_ids
                    .iter()
                    .map(|ids| encoder.forward(params, ids))
                    .collect::<Result<Vec<_>>>()?;
                (traces.iter().map(|t| t.feature.clone()).collect::<Vec<_>>(), traces, Vec::new())
            }
            FeatureSource::Residual { base } => {
                let (f, n) = residual_features(params, base);
                (f, Vec::new(), n)
            }
        };
        let class_mat = Mat::from_rows(&features);
        if !class_mat.is_finite() {
            return Err(Error::NonFinite("class features"));
        }
        let pred = class_probabilities(images, &class_mat, self.tau);
        for i in 0..pred.batch_size() {
            let row = pred.probs.row(i);
            let sum: f64 = row.iter().sum();
            if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::NonFinite("class probabilities"));
            }
        }
        let lg = match self.loss_kind {
            LossKind::Ueo => ueo_loss(&pred, self.detach_weights)?,
            LossKind::UplCe => upl_cross_entropy(&pred, labels)?,
        };
        if !lg.loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let dsim = softmax_backward(&pred, &lg.grad_probs, self.tau);

        let dim = images.cols;
        let mut grad = vec![0.0; params.len()];
        for a in 0..class_mat.rows {
            let mut up = vec![0.0; dim];
            for x in 0..images.rows {
                let s = dsim.get(x, a);
                for (u, v) in up.iter_mut().zip(images.row(x)) {
                    *u += s * v;
                }
            }
            match &self.source {
                FeatureSource::Prompt { encoder, .. } => {
                    for (g, v) in grad.iter_mut().zip(encoder.backward_context(&traces[a], &up)) {
                        *g += v;
                    }
                }
                FeatureSource::Residual { base } => {
                    let dz = l2_normalize_backward(&features[a], norms[a], &up);
                    let t = &base[a];
                    for i in 0..dim {
                        let row = &mut grad[i * dim..(i + 1) * dim];
                        for (g, tj) in row.iter_mut().zip(t) {
                            *g += dz[i] * tj;
                        }
                    }
                    for (g, d) in grad[dim * dim..].iter_mut().zip(&dz) {
                        *g += d;
                    }
                }
            }
        }
        Ok(Evaluation {
            loss: lg.loss,
            grad,
            clamped: lg.clamped,
            prediction: pred,
        })
    }
}

fn round_to_f32(params: &mut [f64]) {
    for p in params.iter_mut() {
        *p = f64::from(*p as f32);
    }
}

/// Runs the adaptation loop and returns the resulting checkpoint.
///
/// With a toy backend the context rows (prompt mode) or a residual map over
/// the initial prompt features are trained; a remote backend always trains a
/// residual map. The encoder itself never changes.
pub fn train(
    store: &SceneStore,
    class_set: &ClassSet,
    training_set: &TrainingSet,
    backend: &EncoderBackend,
    config: &TrainConfig,
) -> Result<AdapterCheckpoint> {
    config.validate()?;
    let classes = effective_classes(class_set, config);
    let n_targets = class_set.targets.len();

    let extended;
    let (mode, spec, toy) = match backend {
        EncoderBackend::Toy { encoder, learner } => {
            extended = encoder.extended(&classes);
            let spec = EncoderSpec::Toy {
                config: extended.config().clone(),
                vocab: extended.vocab().clone(),
            };
            (config.mode, spec, Some((&extended, learner)))
        }
        EncoderBackend::Http(h) => {
            if config.mode == AdapterMode::Prompt {
                log::warn!("the remote text encoder cannot be prompt-tuned; training a residual adapter instead");
            }
            let spec = EncoderSpec::Http {
                endpoint: h.url().to_string(),
                dim: h.expected_dim().unwrap_or(store.dim()),
            };
            (AdapterMode::Residual, spec, None)
        }
    };

    let out_dim = match &spec {
        EncoderSpec::Toy { config, .. } => config.output_dim,
        EncoderSpec::Http { dim, .. } => *dim,
    };
    if out_dim != store.dim() {
        return Err(Error::DimMismatch {
            expected: store.dim(),
            got: out_dim,
        });
    }

    let (objective, mut params) = match (mode, toy) {
        (AdapterMode::Prompt, Some((encoder, learner))) => (
            Objective::prompt(encoder, &classes, config.tau, config.loss_kind),
            learner.context_f64(),
        ),
        (AdapterMode::Residual, Some((encoder, learner))) => {
            let ctx = learner.context_f64();
            let base = classes.iter().map(|c| encoder.encode(&ctx, c)).collect::<Result<Vec<_>>>()?;
            (Objective::residual(base, config.tau, config.loss_kind), identity_residual(out_dim))
        }
        (_, None) => {
            let base = backend.encode_classes(&classes)?;
            (Objective::residual(base, config.tau, config.loss_kind), identity_residual(out_dim))
        }
    };
    let objective = objective.with_detached_weights(config.detach_weights);

    let items: Vec<(u32, usize)> = if config.use_topk {
        training_set.items.iter().map(|it| (it.embedding_row, it.class_index)).collect()
    } else {
        let features = objective.class_features(&params)?;
        let targets = &features[..n_targets];
        store
            .segments()
            .map(|seg| {
                let x = to_f64(store.segment_embedding(seg));
                let label = targets
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (a, t)| {
                        let s = dot(&x, t);
                        if s > best.1 {
                            (a, s)
                        } else {
                            best
                        }
                    })
                    .0;
                (seg.embedding_row, label)
            })
            .collect()
    };
    if items.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if config.loss_kind == LossKind::Ueo && items.len() < 2 {
        return Err(Error::InvalidConfig(
            "the entropy objective needs at least 2 training items".into(),
        ));
    }

    let hp = match config.optimizer {
        super::Optimizer::Adam => AdamParams::with_lr(config.learning_rate),
    };
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut clamped = 0;
    let dim = store.dim();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for range in make_batches(order.len(), config.batch_size) {
            let batch = &order[range];
            let mut images = Mat::zeros(batch.len(), dim);
            let mut labels = Vec::with_capacity(batch.len());
            for (r, &i) in batch.iter().enumerate() {
                let (row, label) = items[i];
                for (dst, src) in images.row_mut(r).iter_mut().zip(store.embedding(row)) {
                    *dst = f64::from(*src);
                }
                labels.push(label);
            }
            let eval = objective.evaluate(&params, &images, &labels)?;
            adam_step(&mut params, &eval.grad, &mut state, &hp)?;
            round_to_f32(&mut params);
            total += eval.loss * batch.len() as f64;
            clamped += eval.clamped;
        }
        let mean = total / items.len() as f64;
        log::debug!("epoch {}: mean loss {mean:.6}", epoch + 1);
        trace.push(mean);
    }

    let mut tensors = Vec::new();
    if let Some((_, learner)) = toy {
        let context: Vec<f32> = match mode {
            AdapterMode::Prompt => params.iter().map(|v| *v as f32).collect(),
            AdapterMode::Residual => learner.context().to_vec(),
        };
        tensors.push(Tensor::new(CONTEXT_TENSOR, learner.rows(), learner.dim(), context));
    }
    if mode == AdapterMode::Residual {
        let (m, b) = params.split_at(out_dim * out_dim);
        tensors.push(Tensor::new(
            RESIDUAL_WEIGHT_TENSOR,
            out_dim,
            out_dim,
            m.iter().map(|v| *v as f32).collect(),
        ));
        tensors.push(Tensor::new(RESIDUAL_BIAS_TENSOR, 1, out_dim, b.iter().map(|v| *v as f32).collect()));
    }

    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        mode,
        seed: config.seed,
        config: config.clone(),
        class_set: class_set.clone(),
        classes,
        encoder: spec,
        loss_trace: trace,
        training_items: items.len(),
        clamped_weights: clamped,
        tensors: Vec::new(),
        run_config: None,
    };
    let mut ckpt = AdapterCheckpoint { meta, tensors };
    ckpt.meta.tensors = ckpt
        .tensors
        .iter()
        .map(|t| super::TensorSpec {
            name: t.name.clone(),
            rows: t.rows,
            cols: t.cols,
        })
        .collect();
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batching_merges_short_tail() {
        assert_eq!(make_batches(5, 2), vec![0..2, 2..5]);
        assert_eq!(make_batches(6, 2), vec![0..2, 2..4, 4..6]);
        assert_eq!(make_batches(7, 3), vec![0..3, 3..7]);
        assert_eq!(make_batches(8, 3), vec![0..3, 3..6, 6..8]);
        assert_eq!(make_batches(1, 256), vec![0..1]);
        assert_eq!(make_batches(0, 4), Vec::<Range<usize>>::new());
    }

    #[test]
    fn identity_residual_keeps_features() {
        let base = vec![vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]];
        let (out, norms) = residual_features(&identity_residual(3), &base);
        assert_eq!(out, base);
        assert_eq!(norms, vec![1.0, 1.0]);
    }

    #[test]
    fn random_words_exclude_targets_and_are_seeded() {
        let targets = vec!["apple".to_string()];
        let a = random_word_negatives(&targets, 20, 1);
        assert_eq!(a, random_word_negatives(&targets, 20, 1));
        assert_ne!(a, random_word_negatives(&targets, 20, 2));
        assert_eq!(a.len(), 20);
        assert!(!a.contains(&"apple".to_string()));
    }
}
