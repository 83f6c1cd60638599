//! Deterministic synthetic benchmark: scenes of target-class objects and
//! open-query distractors whose image embeddings are the toy encoder's text
//! features under a seeded domain shift.
//!
//! The shift fixes the mean text direction and rotates `shift_planes` planes
//! of a seeded orthonormal basis of its complement by `shift_degrees`. It then
//! adds a constant bias and isotropic noise and renormalizes.
//! A rotation that also moved the mean direction would shift every image
//! alike, which a softmax over classes cannot see.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adaptation::AdapterMode;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{save_tasks, TaskQuery};
use crate::linalg::{dot, l2_normalize, norm, to_f32};
use crate::llm::StubRules;
use crate::rng::derive_seed;
use crate::store::{save_gt_points, GroundTruth, Point, SceneInput, SceneStore, SegmentInput};
use crate::text::{init_context, ToyEncoderConfig, ToyTextEncoder, TokenVocab};

const TARGET_NOUNS: &str = include_str!("../data/synth_targets.txt");
const DISTRACTOR_NOUNS: &str = include_str!("../data/synth_distractors.txt");

pub const ADAPT_DIR: &str = "adapt";
pub const EVAL_DIR: &str = "eval";
pub const TASKS_FILE: &str = "tasks.json";
pub const CLASS_SETS_FILE: &str = "class_sets.json";
pub const LLM_RULES_FILE: &str = "llm_rules.json";
pub const SYNTH_CONFIG_FILE: &str = "synth_config.json";
pub const RUN_CONFIG_FILE: &str = "run.toml";

/// Spacing between segment centres on the scene grid.
const GRID_SPACING: f32 = 4.0;

fn noun_list(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
}

pub fn target_nouns() -> Vec<String> {
    noun_list(TARGET_NOUNS)
}

pub fn distractor_nouns() -> Vec<String> {
    noun_list(DISTRACTOR_NOUNS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub adapt_scenes: usize,
    pub eval_scenes: usize,
    pub class_sets: usize,
    pub classes_per_set: usize,
    pub segments_per_scene: usize,
    /// Fraction of segments drawn from the distractor vocabulary.
    pub distractor_fraction: f64,
    /// Number of bundled distractor nouns in use.
    pub distractor_vocab: usize,
    pub shift_degrees: f64,
    /// Number of complement planes rotated.
    pub shift_planes: usize,
    /// Norm of the constant bias added to every image embedding.
    pub bias_norm: f64,
    /// Expected norm of the per-segment Gaussian noise.
    pub noise_sigma: f64,
    pub points_per_segment: usize,
    pub seed: u64,
    pub encoder: ToyEncoderConfig,
    pub context_phrase: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            adapt_scenes: 8,
            eval_scenes: 2,
            class_sets: 8,
            classes_per_set: 6,
            segments_per_scene: 200,
            distractor_fraction: 0.7,
            distractor_vocab: 50,
            shift_degrees: 45.0,
            shift_planes: 6,
            bias_norm: 0.1,
            noise_sigma: 0.35,
            points_per_segment: 6,
            seed: 42,
            encoder: ToyEncoderConfig::default(),
            context_phrase: "a photo of a".to_string(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.distractor_fraction) {
            return fail(format!("distractor_fraction {} outside [0, 1)", self.distractor_fraction));
        }
        if !(self.noise_sigma >= 0.0) || !(self.bias_norm >= 0.0) || !self.shift_degrees.is_finite() {
            return fail("noise_sigma and bias_norm must be non-negative, shift_degrees finite".into());
        }
        let available = target_nouns().len();
        if self.class_sets * self.classes_per_set > available || self.class_sets * self.classes_per_set == 0 {
            return fail(format!(
                "{} class sets of {} need more than the {available} bundled target nouns",
                self.class_sets, self.classes_per_set
            ));
        }
        if self.adapt_scenes == 0 || self.eval_scenes == 0 || self.segments_per_scene == 0 {
            return fail("scene and segment counts must be positive".into());
        }
        if self.distractor_vocab == 0 || self.distractor_vocab > distractor_nouns().len() {
            return fail(format!(
                "distractor_vocab {} outside 1..={}",
                self.distractor_vocab,
                distractor_nouns().len()
            ));
        }
        if self.points_per_segment == 0 {
            return fail("points_per_segment must be positive".into());
        }
        if self.n_distractors() == self.segments_per_scene {
            return fail("every segment would be a distractor".into());
        }
        Ok(())
    }

    /// Run configuration matching this benchmark: the generating toy encoder
    /// and context phrase, the residual adapter, the benchmark seed, stub
    /// rules at `rules`. The copy written next to the benchmark names the
    /// rules file relatively.
    pub fn run_config(&self, rules: Option<&Path>) -> RunConfig {
        let mut run = RunConfig::default();
        let enc = &mut run.text_encoder;
        enc.seed = self.encoder.seed;
        enc.token_dim = self.encoder.token_dim;
        enc.hidden_dim = self.encoder.hidden_dim;
        enc.output_dim = self.encoder.output_dim;
        enc.token_scale = self.encoder.token_scale;
        enc.context_phrase = self.context_phrase.clone();
        run.train.mode = AdapterMode::Residual;
        run.train.seed = self.seed;
        run.llm.rules = rules.map(Path::to_path_buf);
        run
    }

    /// Distractors per scene: `round(fraction * segments)`.
    pub fn n_distractors(&self) -> usize {
        (self.distractor_fraction * self.segments_per_scene as f64).round() as usize
    }

    pub fn num_classes(&self) -> usize {
        self.class_sets * self.classes_per_set
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedClassSet {
    pub name: String,
    pub targets: Vec<String>,
}

/// Everything a benchmark run needs, in memory.
#[derive(Debug, Clone)]
pub struct SynthBench {
    pub config: SynthConfig,
    pub adapt: SceneStore,
    pub eval: SceneStore,
    /// Ground truth of each eval scene, in scene order.
    pub eval_truth: Vec<GroundTruth>,
    pub class_sets: Vec<NamedClassSet>,
    pub tasks: Vec<TaskQuery>,
    pub rules: StubRules,
}

/// Paths written by [`SynthBench::write`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub adapt: PathBuf,
    pub eval: PathBuf,
    pub tasks: PathBuf,
    pub class_sets: PathBuf,
    pub rules: PathBuf,
    pub run_config: PathBuf,
}

impl SynthPaths {
    pub fn under(dir: &Path) -> Self {
        Self {
            adapt: dir.join(ADAPT_DIR),
            eval: dir.join(EVAL_DIR),
            tasks: dir.join(TASKS_FILE),
            class_sets: dir.join(CLASS_SETS_FILE),
            rules: dir.join(LLM_RULES_FILE),
            run_config: dir.join(RUN_CONFIG_FILE),
        }
    }
}

impl SynthBench {
    pub fn write(&self, dir: &Path) -> Result<SynthPaths> {
        let paths = SynthPaths::under(dir);
        self.adapt.save(&paths.adapt)?;
        self.eval.save(&paths.eval)?;
        for (scene, gt) in self.eval.scenes().iter().zip(&self.eval_truth) {
            save_gt_points(&paths.eval, &scene.scene_id, gt)?;
        }
        save_tasks(&paths.tasks, &self.tasks)?;
        write_json(&paths.class_sets, &self.class_sets)?;
        write_json(&paths.rules, &self.rules)?;
        write_json(&dir.join(SYNTH_CONFIG_FILE), &self.config)?;
        let run = self.config.run_config(Some(Path::new(LLM_RULES_FILE))).to_toml();
        fs::write(&paths.run_config, run).map_err(|e| Error::io(&paths.run_config, e))?;
        Ok(paths)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_class_sets(path: &Path) -> Result<Vec<NamedClassSet>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))
}

/// Rotates `x` by `theta` radians in the plane of orthonormal `p`, `q`.
pub fn rotate_in_plane(x: &[f64], p: &[f64], q: &[f64], theta: f64) -> Vec<f64> {
    let a = dot(x, p);
    let b = dot(x, q);
    let (s, c) = theta.sin_cos();
    let da = a * c - b * s - a;
    let db = a * s + b * c - b;
    x.iter().zip(p.iter().zip(q)).map(|(xi, (pi, qi))| xi + da * pi + db * qi).collect()
}

/// Image-space domain shift applied to clean features.
#[derive(Debug, Clone)]
pub struct DomainShift {
    /// Orthonormal pairs, mutually orthogonal, each rotated by `theta`.
    pub planes: Vec<(Vec<f64>, Vec<f64>)>,
    pub theta: f64,
    pub bias: Vec<f64>,
    pub noise_sigma: f64,
}

impl DomainShift {
    pub fn apply(&self, clean: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let dim = clean.len() as f64;
        let mut x = clean.to_vec();
        for (p, q) in &self.planes {
            x = rotate_in_plane(&x, p, q, self.theta);
        }
        for (xi, bi) in x.iter_mut().zip(&self.bias) {
            let n: f64 = rng.sample(StandardNormal);
            *xi += bi + self.noise_sigma / dim.sqrt() * n;
        }
        l2_normalize(&x)
    }
}

fn gaussian_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    l2_normalize(&v)
}

/// Removes the components of `v` along each (orthonormal) vector of `basis`.
fn orthogonalize(v: &[f64], basis: &[&[f64]]) -> Vec<f64> {
    let mut out = v.to_vec();
    for b in basis {
        let c = dot(&out, b);
        out.iter_mut().zip(b.iter()).for_each(|(o, bi)| *o -= c * bi);
    }
    l2_normalize(&out)
}

/// Toy encoder over every noun the benchmark can emit.
pub fn synth_encoder(config: &SynthConfig) -> ToyTextEncoder {
    let mut words = target_nouns();
    words.extend(distractor_nouns());
    words.push(config.context_phrase.clone());
    ToyTextEncoder::new(config.encoder.clone(), TokenVocab::from_texts(&words))
}

/// Generates the benchmark. Fully determined by `config`.
pub fn generate(config: &SynthConfig) -> Result<SynthBench> {
    config.validate()?;
    let encoder = synth_encoder(config);
    let learner = init_context(&encoder, &config.context_phrase, config.encoder_context_rows())?;
    let ctx = learner.context_f64();

    let classes: Vec<String> = target_nouns().into_iter().take(config.num_classes()).collect();
    let distractors: Vec<String> = distractor_nouns().into_iter().take(config.distractor_vocab).collect();
    let class_feats = classes.iter().map(|c| encoder.encode(&ctx, c)).collect::<Result<Vec<_>>>()?;
    let distractor_feats = distractors.iter().map(|c| encoder.encode(&ctx, c)).collect::<Result<Vec<_>>>()?;

    let dim = encoder.output_dim();
    let mut shift_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shift"));
    let mut all_feats = class_feats.clone();
    all_feats.extend(distractor_feats.iter().cloned());
    let mean = l2_normalize(&(0..dim).map(|j| all_feats.iter().map(|r| r[j]).sum::<f64>()).collect::<Vec<_>>());
    let mut basis: Vec<Vec<f64>> = vec![mean];
    while basis.len() < dim {
        let refs: Vec<&[f64]> = basis.iter().map(|b| b.as_slice()).collect();
        basis.push(orthogonalize(&gaussian_unit(&mut shift_rng, dim), &refs));
    }
    let planes = basis[1..].chunks_exact(2).take(config.shift_planes).map(|c| (c[0].clone(), c[1].clone())).collect();
    let bias: Vec<f64> = gaussian_unit(&mut shift_rng, dim).iter().map(|v| v * config.bias_norm).collect();
    let shift = DomainShift {
        planes,
        theta: config.shift_degrees.to_radians(),
        bias,
        noise_sigma: config.noise_sigma,
    };

    let mut set_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "class-sets"));
    let mut shuffled = classes.clone();
    shuffled.shuffle(&mut set_rng);
    let class_sets: Vec<NamedClassSet> = shuffled
        .chunks(config.classes_per_set)
        .enumerate()
        .map(|(i, chunk)| NamedClassSet {
            name: format!("set{}", i + 1),
            targets: chunk.to_vec(),
        })
        .collect();

    let scene_gen = SceneGenerator {
        config,
        classes: &classes,
        class_feats: &class_feats,
        distractors: &distractors,
        distractor_feats: &distractor_feats,
        shift: &shift,
        dim,
    };

    let mut adapt = SceneStore::new(dim);
    for j in 0..config.adapt_scenes {
        let (scene, _) = scene_gen.scene(&format!("adapt_{:03}", j + 1), derive_seed(config.seed, &format!("adapt:{j}")));
        adapt = adapt.append_scene(scene)?;
    }
    let mut eval = SceneStore::new(dim);
    let mut eval_truth = Vec::new();
    for j in 0..config.eval_scenes {
        let (scene, gt) = scene_gen.scene(&format!("eval_{:03}", j + 1), derive_seed(config.seed, &format!("eval:{j}")));
        eval = eval.append_scene(scene)?;
        eval_truth.push(gt);
    }

    let mut tasks = Vec::new();
    let mut rules = StubRules::default();
    let mut task_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "tasks"));
    for scene in eval.scenes() {
        for set in &class_sets {
            let n = set.targets.len().min(3);
            let relevant: Vec<String> = set.targets.choose_multiple(&mut task_rng, n).cloned().collect();
            let task = format!("bring the {}", relevant.join(" and the "));
            rules.queries.insert(task.clone(), relevant.clone());
            tasks.push(TaskQuery {
                task,
                scene_id: scene.scene_id.clone(),
                relevant_classes: relevant,
            });
        }
    }
    for set in &class_sets {
        rules.queries.insert(format!("find the {}", set.targets.join(" and the ")), set.targets.clone());
    }

    Ok(SynthBench {
        config: config.clone(),
        adapt,
        eval,
        eval_truth,
        class_sets,
        tasks,
        rules,
    })
}

impl SynthConfig {
    fn encoder_context_rows(&self) -> usize {
        crate::text::split_words(&self.context_phrase).len().max(1)
    }
}

struct SceneGenerator<'a> {
    config: &'a SynthConfig,
    classes: &'a [String],
    class_feats: &'a [Vec<f64>],
    distractors: &'a [String],
    distractor_feats: &'a [Vec<f64>],
    shift: &'a DomainShift,
    dim: usize,
}

impl SceneGenerator<'_> {
    fn scene(&self, scene_id: &str, seed: u64) -> (SceneInput, GroundTruth) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.config.segments_per_scene;
        let n_distractors = self.config.n_distractors();
        let n_targets = n - n_distractors;

        // every class once when there is room, then uniform draws
        let mut labels: Vec<(bool, usize)> = Vec::with_capacity(n);
        let mut order: Vec<usize> = (0..self.classes.len()).collect();
        order.shuffle(&mut rng);
        for i in 0..n_targets {
            let c = if i < order.len() {
                order[i]
            } else {
                rng.random_range(0..self.classes.len())
            };
            labels.push((true, c));
        }
        for _ in 0..n_distractors {
            labels.push((false, rng.random_range(0..self.distractors.len())));
        }
        labels.shuffle(&mut rng);

        let grid = (n as f64).sqrt().ceil() as usize;
        let mut segments = Vec::with_capacity(n);
        let mut gt_points: Vec<Point> = Vec::new();
        let mut gt_labels = Vec::new();
        for (i, &(is_target, c)) in labels.iter().enumerate() {
            let (name, clean) = if is_target {
                (&self.classes[c], &self.class_feats[c])
            } else {
                (&self.distractors[c], &self.distractor_feats[c])
            };
            let emb = to_f32(&self.shift.apply(clean, &mut rng));
            debug_assert_eq!(emb.len(), self.dim);
            let centre = [
                (i % grid) as f32 * GRID_SPACING,
                (i / grid) as f32 * GRID_SPACING,
                0.0f32,
            ];
            let points: Vec<Point> = (0..self.config.points_per_segment)
                .map(|_| {
                    [
                        centre[0] + rng.random_range(-1.0f32..1.0),
                        centre[1] + rng.random_range(-1.0f32..1.0),
                        centre[2] + rng.random_range(0.0f32..1.0),
                    ]
                })
                .collect();
            for pt in &points {
                gt_points.push([pt[0], pt[1], pt[2] + 0.01]);
                gt_labels.push(name.clone());
            }
            segments.push(SegmentInput {
                segment_id: format!("{scene_id}_{:04}", i + 1),
                caption: format!("a photo of a {name}"),
                embedding: renormalize_f32(emb),
                points,
                mask_ref: None,
                bbox: None,
            });
        }
        let gt = GroundTruth::new(gt_points, gt_labels).expect("matching lengths");
        (
            SceneInput {
                scene_id: scene_id.to_string(),
                segments,
            },
            gt,
        )
    }
}

/// Rounding to `f32` can leave the norm a few ulps off; one more pass keeps
/// stored embeddings well inside the archive tolerance.
fn renormalize_f32(v: Vec<f32>) -> Vec<f32> {
    let n = norm(&v.iter().map(|x| f64::from(*x)).collect::<Vec<_>>());
    v.iter().map(|x| (f64::from(*x) / n) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            adapt_scenes: 2,
            eval_scenes: 1,
            class_sets: 2,
            classes_per_set: 3,
            segments_per_scene: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rotation_preserves_norm_and_angle() {
        let p = vec![1.0, 0.0, 0.0];
        let q = vec![0.0, 1.0, 0.0];
        let r = rotate_in_plane(&[1.0, 0.0, 0.5], &p, &q, std::f64::consts::FRAC_PI_2);
        assert!((r[0]).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12 && (r[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exact_distractor_count() {
        let cfg = SynthConfig {
            segments_per_scene: 1000,
            adapt_scenes: 1,
            ..small()
        };
        let bench = generate(&cfg).unwrap();
        let distractors: Vec<String> = distractor_nouns();
        let count = bench
            .adapt
            .segments()
            .filter(|s| distractors.iter().any(|d| s.caption.ends_with(&format!(" {d}"))))
            .count();
        assert_eq!(count, 700);
    }

    #[test]
    fn same_seed_same_archives() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.adapt, b.adapt);
        assert_eq!(a.eval, b.eval);
        assert_eq!(a.eval_truth, b.eval_truth);
        let c = generate(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.adapt, c.adapt);
    }

    #[test]
    fn class_sets_partition_the_classes() {
        let bench = generate(&small()).unwrap();
        assert_eq!(bench.class_sets.len(), 2);
        let mut all: Vec<String> = bench.class_sets.iter().flat_map(|s| s.targets.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 6);
        assert_eq!(bench.tasks.len(), 2);
    }

    #[test]
    fn unshifted_scenes_are_retrieved_perfectly() {
        use crate::evaluation::{evaluate_classes, SceneTruth, TruthSet};
        use crate::retrieval::QueryEncoder;

        let cfg = SynthConfig {
            shift_degrees: 0.0,
            noise_sigma: 0.0,
            bias_norm: 0.0,
            ..small()
        };
        let bench = generate(&cfg).unwrap();
        let run = cfg.run_config(None);
        let texts: Vec<String> = bench.eval.segments().map(|s| s.caption.clone()).collect();
        let backend = run.encoder_backend(&texts).unwrap();
        let truths: TruthSet = bench
            .eval
            .scenes()
            .iter()
            .zip(&bench.eval_truth)
            .map(|(s, g)| (s.scene_id.clone(), SceneTruth::Points(g.clone())))
            .collect();
        let classes: Vec<String> = bench.class_sets.iter().flat_map(|s| s.targets.clone()).collect();
        let report = evaluate_classes(&bench.eval, &truths, &classes, &QueryEncoder::Pretrained(&backend)).unwrap();
        assert_eq!(report.per_class.len(), 6);
        assert_eq!(report.recall_at_1, Some(1.0));
    }

    #[test]
    fn run_config_matches_the_generator() {
        let cfg = SynthConfig { seed: 9, ..small() };
        let run = cfg.run_config(Some(Path::new("rules.json")));
        assert_eq!(run.text_encoder.toy(), cfg.encoder);
        assert_eq!(run.text_encoder.context_phrase, cfg.context_phrase);
        assert_eq!(run.train.mode, AdapterMode::Residual);
        assert_eq!(run.train.seed, 9);
        assert_eq!(run.llm.rules.as_deref(), Some(Path::new("rules.json")));
        let defaults = RunConfig::default().train;
        assert_eq!(run.train.k, defaults.k);
        assert_eq!(run.train.epochs, defaults.epochs);
        assert_eq!(run.train.learning_rate, defaults.learning_rate);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate(&SynthConfig {
            distractor_fraction: 1.0,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            noise_sigma: -0.1,
            ..small()
        })
        .is_err());
    }
}
