#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use qadapt_core::adaptation::{identity_residual, LossKind, Objective};
use qadapt_core::config::RunConfig;
use qadapt_core::linalg::{l2_normalize, Mat};
use qadapt_core::selection::{select_training_data, ClassSet, TrainingItem};
use qadapt_core::store::{SceneInput, SceneStore, SegmentInput};
use qadapt_core::text::{init_context, EncoderBackend, ToyEncoderConfig, ToyTextEncoder, TokenVocab};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;

// ---------------------------------------------------------------- mock server

/// One-thread HTTP server answering JSON POSTs with `handler`. Request
/// paths and bodies are recorded in order.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<(String, serde_json::Value)>>>,
    _thread: JoinHandle<()>,
}

impl MockServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&serde_json::Value) -> (u16, String) + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = requests.clone();
        let thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap_or(0);
                let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                let json: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
                let (status, reply) = handler(&json);
                seen.lock().unwrap().push((path, json));
                let head = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    reply.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        Self {
            url,
            requests,
            _thread: thread,
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    pub fn request(&self, i: usize) -> (String, serde_json::Value) {
        self.requests.lock().unwrap()[i].clone()
    }
}

// ---------------------------------------------------------------- stores

pub fn gaussian_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    l2_normalize(&v)
}

/// Random store with `scenes` scenes of up to `max_segments` segments each.
/// A coarse embedding palette makes exact score ties common.
pub fn random_store(rng: &mut impl Rng, dim: usize, scenes: usize, max_segments: usize) -> SceneStore {
    let palette: Vec<Vec<f32>> = (0..rng.random_range(3..12))
        .map(|_| gaussian_unit(rng, dim).iter().map(|x| *x as f32).collect())
        .collect();
    let mut store = SceneStore::new(dim);
    for s in 0..scenes {
        let n = rng.random_range(1..=max_segments);
        // ids in shuffled order so that id order and insertion order differ
        let mut ids: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let segments = ids
            .into_iter()
            .map(|i| {
                let embedding = if rng.random_bool(0.5) {
                    palette.choose(rng).unwrap().clone()
                } else {
                    gaussian_unit(rng, dim).iter().map(|x| *x as f32).collect()
                };
                SegmentInput {
                    segment_id: format!("s{s}_{i:04}"),
                    caption: "a thing".into(),
                    embedding,
                    points: vec![[i as f32, 0.0, 0.0]],
                    mask_ref: None,
                    bbox: None,
                }
            })
            .collect();
        store = store
            .append_scene(SceneInput {
                scene_id: format!("scene{s}"),
                segments,
            })
            .unwrap();
    }
    store
}

// ---------------------------------------------------------------- selection

const CLASSES: &[&str] = &["mug", "plant", "chair", "lamp", "book", "cup", "kettle", "shoe"];

/// Exhaustive reference: score everything, sort by (score desc, id asc),
/// slice k per (scene, class), then keep each segment once under the class
/// that scored it highest among the lists it made, lowest class on ties.
pub fn brute_force_selection(store: &SceneStore, features: &[Vec<f64>], k: usize) -> Vec<(usize, usize, String, usize, usize)> {
    let mut out = Vec::new();
    for (si, scene) in store.scenes().iter().enumerate() {
        let lists: Vec<Vec<(usize, f64)>> = features
            .iter()
            .map(|f| {
                let mut all: Vec<(usize, f64)> = scene
                    .segments
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let e = store.segment_embedding(s);
                        let mut acc = 0.0;
                        for j in 0..e.len() {
                            acc += f64::from(e[j]) * f[j];
                        }
                        (i, acc)
                    })
                    .collect();
                all.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1)
                        .unwrap()
                        .then(scene.segments[a.0].segment_id.cmp(&scene.segments[b.0].segment_id))
                });
                all.into_iter().take(k).collect()
            })
            .collect();
        let mut owner: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for (c, list) in lists.iter().enumerate() {
            for &(seg, score) in list {
                let e = owner.entry(seg).or_insert((c, score));
                if score > e.1 {
                    *e = (c, score);
                }
            }
        }
        for (c, list) in lists.iter().enumerate() {
            for (rank, &(seg, _)) in list.iter().enumerate() {
                if owner[&seg].0 == c {
                    out.push((si, seg, scene.segments[seg].segment_id.clone(), c, rank));
                }
            }
        }
    }
    out
}

fn item_key(item: &TrainingItem) -> (usize, usize, String, usize, usize) {
    (item.scene_index, item.segment_index, item.segment_id.clone(), item.class_index, item.rank)
}

pub fn toy_backend(classes: &[String]) -> EncoderBackend {
    RunConfig::default().encoder_backend(classes).unwrap()
}

/// Runs `n` random stores with at most 1000 segments in total.
pub fn run_selection_oracle(seed: u64, n: usize) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut ties_seen = 0;
    for trial in 0..n {
        let scenes = rng.random_range(1..=5);
        let store = random_store(&mut rng, 32, scenes, 1000 / scenes);
        let t = rng.random_range(1..=5);
        let targets: Vec<String> = CLASSES
            .choose_multiple(&mut rng, t)
            .map(|c| c.to_string())
            .collect();
        let k = if trial % 2 == 0 { 1 } else { 8 };
        let be = toy_backend(&targets);
        let class_set = ClassSet::new(targets.clone(), Vec::new()).unwrap();
        let got = select_training_data(&store, &class_set, &be, k).unwrap();
        let feats = be.encode_classes(&targets).unwrap();
        let want = brute_force_selection(&store, &feats, k);
        if got.items.iter().map(item_key).collect::<Vec<_>>() != want {
            mismatches += 1;
        }
        // duplicate embeddings give equal scores, so the id tie-break is exercised
        let mut scores: Vec<f64> = got.items.iter().map(|i| i.similarity).collect();
        scores.sort_by(f64::total_cmp);
        ties_seen += scores.windows(2).filter(|w| w[0] == w[1]).count();
    }
    (mismatches, ties_seen)
}

// ---------------------------------------------------------------- gradients

const WORDS: &[&str] = &[
    "mug", "plant", "chair", "lamp", "book", "cup", "kettle", "shoe", "clock", "towel", "sofa", "desk", "pen", "bowl",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Context,
    Residual,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdStats {
    pub instances: usize,
    pub failures: usize,
    pub skipped: usize,
    pub worst: f64,
}

/// `||a - n|| / max(||a||, ||n||)` over the full parameter vector.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn)
}

/// Central differences of `objective` around `params`, or `None` when a
/// stencil point changes some row's argmax: the confidence weight
/// `max_a p_a` has a kink there and the quotient straddles it.
pub fn numeric_gradient(objective: &Objective<'_>, params: &[f64], images: &Mat, labels: &[usize]) -> Option<Vec<f64>> {
    let argmax = objective.evaluate(params, images, labels).unwrap().prediction.argmax;
    let mut p = params.to_vec();
    let at = |p: &[f64]| {
        let e = objective.evaluate(p, images, labels).unwrap();
        (e.prediction.argmax == argmax).then_some(e.loss)
    };
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = at(&p)?;
            p[i] = orig - FD_STEP;
            let down = at(&p)?;
            p[i] = orig;
            Some((up - down) / (2.0 * FD_STEP))
        })
        .collect()
}

/// Batch of unit image features near random class features.
fn images_near(rng: &mut impl Rng, class_feats: &[Vec<f64>], b: usize) -> Mat {
    let dim = class_feats[0].len();
    let rows: Vec<Vec<f64>> = (0..b)
        .map(|_| {
            let c = class_feats.choose(rng).unwrap();
            let noise = gaussian_unit(rng, dim);
            let mix = rng.random_range(0.3..1.0);
            l2_normalize(&c.iter().zip(&noise).map(|(x, n)| mix * x + (1.0 - mix) * n).collect::<Vec<_>>())
        })
        .collect();
    Mat::from_rows(&rows)
}

/// Checks one random instance; returns its relative error, or `None` when
/// the instance is ill-conditioned: a clamped weight, a stencil across an
/// argmax change, or a gradient under the quotient's round-off floor.
pub fn fd_instance(rng: &mut ChaCha8Rng, kind: LossKind, param: Param) -> Option<f64> {
    let tau = *[0.01, 0.02, 0.05, 0.1, 0.5].choose(rng).unwrap();
    let a = rng.random_range(2..=6);
    let b = rng.random_range(2..=12);
    let classes: Vec<String> = WORDS.choose_multiple(rng, a).map(|w| w.to_string()).collect();

    let encoder;
    let (objective, params) = match param {
        Param::Context => {
            let config = ToyEncoderConfig {
                seed: rng.random(),
                token_dim: *[8, 16].choose(rng).unwrap(),
                hidden_dim: *[16, 32].choose(rng).unwrap(),
                output_dim: *[8, 16].choose(rng).unwrap(),
                token_scale: *[1.0, 4.0].choose(rng).unwrap(),
            };
            encoder = ToyTextEncoder::new(config, TokenVocab::from_texts(classes.iter().chain(["a photo of a".to_string()].iter())));
            let m = rng.random_range(1..=4);
            let learner = init_context(&encoder, "a photo of a", m).unwrap();
            let params: Vec<f64> = learner
                .context_f64()
                .iter()
                .map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (Objective::prompt(&encoder, &classes, tau, kind), params)
        }
        Param::Residual => {
            let dim = *[4, 8, 16].choose(rng).unwrap();
            let base: Vec<Vec<f64>> = (0..a).map(|_| gaussian_unit(rng, dim)).collect();
            let params: Vec<f64> = identity_residual(dim)
                .iter()
                .map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (Objective::residual(base, tau, kind), params)
        }
    };
    let feats = objective.class_features(&params).unwrap();
    let images = images_near(rng, &feats, b);
    let probe = objective.evaluate(&params, &images, &vec![0; b]).unwrap();
    if probe.clamped > 0 {
        return None;
    }
    let labels = probe.prediction.argmax.clone();
    let eval = objective.evaluate(&params, &images, &labels).unwrap();
    let numeric = numeric_gradient(&objective, &params, &images, &labels)?;
    // Central differences cannot resolve a gradient below their own
    // round-off floor; such saturated instances are counted, not checked.
    let gnorm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let floor = f64::EPSILON * eval.loss.abs().max(1.0) / FD_STEP * (params.len() as f64).sqrt();
    if floor > 0.1 * FD_TOLERANCE * gnorm {
        return None;
    }
    Some(relative_error(&eval.grad, &numeric))
}

/// `n` non-degenerate instances from one seed.
pub fn fd_trials(seed: u64, kind: LossKind, param: Param, n: usize) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = FdStats::default();
    while stats.instances < n {
        let Some(err) = fd_instance(&mut rng, kind, param) else {
            stats.skipped += 1;
            continue;
        };
        stats.instances += 1;
        stats.worst = stats.worst.max(err);
        if !(err <= FD_TOLERANCE) {
            stats.failures += 1;
        }
    }
    stats
}


// ---------------------------------------------------------------- synth runs

use qadapt_core::evaluation::{SceneTruth, TruthSet};
use qadapt_core::llm::LlmBackend;
use qadapt_core::pipeline::{mine_negatives, BenchInputs};
use qadapt_core::synth::{generate, SynthBench, SynthConfig};

/// A generated benchmark with everything a run needs.
pub struct SynthRun {
    pub bench: SynthBench,
    pub run: RunConfig,
    pub truths: TruthSet,
    pub backend: EncoderBackend,
    pub llm: LlmBackend,
    pub negatives: Vec<String>,
}

impl SynthRun {
    pub fn new(config: &SynthConfig) -> Self {
        let bench = generate(config).unwrap();
        let run = config.run_config(None);
        let texts: Vec<String> = bench
            .adapt
            .segments()
            .chain(bench.eval.segments())
            .map(|s| s.caption.clone())
            .collect();
        let backend = run.encoder_backend(&texts).unwrap();
        let truths = bench
            .eval
            .scenes()
            .iter()
            .zip(&bench.eval_truth)
            .map(|(s, g)| (s.scene_id.clone(), SceneTruth::Points(g.clone())))
            .collect();
        let negatives = mine_negatives(&bench.adapt, &run.train, &run.stopwords().unwrap());
        Self {
            bench,
            run,
            truths,
            backend,
            llm: LlmBackend::Stub(Default::default()),
            negatives,
        }
    }

    pub fn inputs(&self) -> BenchInputs<'_> {
        BenchInputs {
            adapt: &self.bench.adapt,
            eval: &self.bench.eval,
            truths: &self.truths,
            class_sets: &self.bench.class_sets,
            backend: &self.backend,
            llm: &self.llm,
            negatives: &self.negatives,
        }
    }
}

pub fn small_synth() -> SynthConfig {
    SynthConfig {
        adapt_scenes: 2,
        eval_scenes: 1,
        class_sets: 2,
        classes_per_set: 3,
        segments_per_scene: 60,
        ..SynthConfig::default()
    }
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn tree_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
