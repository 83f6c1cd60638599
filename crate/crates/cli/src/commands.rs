//! Subcommand implementations.

use std::fs;
use std::path::Path;

use qadapt_core::adaptation::{AdapterCheckpoint, AdapterMode, META_FILE};
use qadapt_core::config::{LlmBackendKind, RunConfig};
use qadapt_core::evaluation::{average_task_recall, evaluate_classes, load_tasks, load_truth, EvalReport, SceneTruth, TruthSet};
use qadapt_core::llm::{normalize_class_list, LlmBackend, StubRules};
use qadapt_core::pipeline::{
    ablation_csv, adapt_targets, mine_negatives, rows_to_csv, run_ablation, run_sweep, BenchInputs, SweepParam,
};
use qadapt_core::retrieval::{retrieve_class, QueryEncoder};
use qadapt_core::selection::ClassSet;
use qadapt_core::store::{save_gt_boxes, save_gt_points, SceneStore};
use qadapt_core::synth::{generate, load_class_sets, NamedClassSet, SynthConfig};
use qadapt_core::text::EncoderBackend;
use qadapt_core::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{AdaptArgs, BenchArgs, ReportOut, SynthArgs};

pub const RUN_REPORT_FILE: &str = "run_report.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Runs `write` into a scratch directory beside `out` and moves the result
/// into place only on success. An existing `out` is replaced only when it
/// is empty or holds a previous checkpoint.
fn write_dir_atomically(out: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if out.exists() {
        let replaceable = out.join(META_FILE).is_file()
            || fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_none();
        if !replaceable {
            return Err(Error::InvalidConfig(format!(
                "{} exists and is not a checkpoint directory",
                out.display()
            )));
        }
    }
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let scratch = parent.join(format!(".{name}.partial-{}", std::process::id()));
    let _ = fs::remove_dir_all(&scratch);
    if let Err(e) = write(&scratch) {
        let _ = fs::remove_dir_all(&scratch);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::rename(&scratch, out).map_err(|e| Error::io(out, e))
}

/// Toy vocabulary covers every caption and the extra names.
fn backend_for(config: &RunConfig, stores: &[&SceneStore], extra: &[String]) -> Result<EncoderBackend> {
    let mut texts: Vec<String> = stores
        .iter()
        .flat_map(|s| s.segments().map(|seg| seg.caption.clone()))
        .collect();
    texts.extend(extra.iter().cloned());
    config.encoder_backend(&texts)
}

/// Backend for runs given explicit class lists: the stub rules when
/// configured, never a remote model.
fn class_list_llm(config: &RunConfig) -> Result<LlmBackend> {
    match config.llm.backend {
        LlmBackendKind::Stub => config.llm_backend(),
        LlmBackendKind::Http => {
            log::info!("explicit class list: the language model is not consulted");
            Ok(LlmBackend::Stub(StubRules::default()))
        }
    }
}

fn load_checkpoint(path: Option<&Path>) -> Result<Option<AdapterCheckpoint>> {
    path.map(AdapterCheckpoint::load).transpose()
}

fn query_encoder<'a>(checkpoint: &'a Option<AdapterCheckpoint>, backend: &'a EncoderBackend) -> QueryEncoder<'a> {
    match checkpoint {
        Some(c) => QueryEncoder::Adapted {
            checkpoint: c,
            backend: Some(backend),
        },
        None => QueryEncoder::Pretrained(backend),
    }
}

pub fn ingest(archive: &Path, out: Option<&Path>) -> Result<()> {
    let (store, report) = SceneStore::load_with_report(archive)?;
    let truth = load_truth(archive, &store)?;
    if let Some(out) = out {
        if out.exists() && fs::canonicalize(out).ok() == fs::canonicalize(archive).ok() {
            return Err(Error::InvalidConfig("ingest would overwrite its input".into()));
        }
        write_dir_atomically(out, |dir| {
            store.save(dir)?;
            for (scene_id, t) in &truth {
                match t {
                    SceneTruth::Points(gt) => save_gt_points(dir, scene_id, gt)?,
                    SceneTruth::Boxes(b) => save_gt_boxes(dir, scene_id, b)?,
                }
            }
            Ok(())
        })?;
    }
    print!(
        "{}",
        to_json(&json!({
            "scenes": store.scenes().len(),
            "segments": store.num_segments(),
            "dim": store.dim(),
            "renormalized": report.renormalized,
            "scenes_with_ground_truth": truth.len(),
        }))
    );
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = match &args.synth_config {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.shift_degrees {
        cfg.shift_degrees = v;
    }
    if let Some(v) = args.noise_sigma {
        cfg.noise_sigma = v;
    }
    if let Some(v) = args.distractor_fraction {
        cfg.distractor_fraction = v;
    }
    let bench = generate(&cfg)?;
    let paths = bench.write(&args.out)?;
    log::info!(
        "wrote {} adaptation and {} evaluation scenes to {}",
        bench.adapt.scenes().len(),
        bench.eval.scenes().len(),
        args.out.display()
    );
    println!("{}", paths.run_config.display());
    Ok(())
}

#[derive(Serialize)]
struct AdaptReport<'a> {
    store: &'a Path,
    query: Option<&'a str>,
    targets: &'a [String],
    class_set: &'a ClassSet,
    mode: AdapterMode,
    training_items: usize,
    loss_trace: &'a [f64],
    clamped_weights: usize,
    config: Value,
}

pub fn adapt(config: &RunConfig, args: &AdaptArgs) -> Result<()> {
    let store = SceneStore::load(&args.store)?;
    let (targets, llm) = match &args.query {
        Some(q) => {
            let llm = config.llm_backend()?;
            (llm.decompose_query(q)?, llm)
        }
        None => (normalize_class_list(args.classes.clone()), class_list_llm(config)?),
    };
    if targets.is_empty() {
        return Err(Error::InvalidConfig("no target classes".into()));
    }
    log::info!("targets: {}", targets.join(", "));
    let negatives = mine_negatives(&store, &config.train, &config.stopwords()?);
    let backend = backend_for(config, &[&store], &targets)?;
    let outcome = adapt_targets(&store, &targets, &negatives, &backend, &llm, &config.train)?;
    log::info!(
        "trained on {} items in {:.2}s",
        outcome.training_items,
        outcome.train_seconds
    );

    let mut checkpoint = outcome.checkpoint;
    checkpoint.meta.run_config = Some(config.to_json_value());
    let report = AdaptReport {
        store: &args.store,
        query: args.query.as_deref(),
        targets: &targets,
        class_set: &outcome.class_set,
        mode: checkpoint.mode(),
        training_items: outcome.training_items,
        loss_trace: &checkpoint.meta.loss_trace,
        clamped_weights: checkpoint.meta.clamped_weights,
        config: config.to_json_value(),
    };
    let report = to_json(&report);
    write_dir_atomically(&args.out, |dir| {
        checkpoint.save(dir)?;
        write_file(&dir.join(RUN_REPORT_FILE), &report)
    })?;
    println!("{}", args.out.display());
    Ok(())
}

pub fn retrieve(
    config: &RunConfig,
    store_path: &Path,
    scene: &str,
    class_name: &str,
    checkpoint: Option<&Path>,
    top_k: usize,
) -> Result<()> {
    let store = SceneStore::load(store_path)?;
    let si = store
        .scene_index(scene)
        .ok_or_else(|| Error::UnknownScene(scene.to_string()))?;
    let checkpoint = load_checkpoint(checkpoint)?;
    let backend = backend_for(config, &[&store], &[class_name.to_string()])?;
    let result = retrieve_class(&store, si, &query_encoder(&checkpoint, &backend), class_name, top_k)?;
    print!("{}", to_json(&result));
    Ok(())
}

fn emit_report(mut report: EvalReport, config: &RunConfig, checkpoint: Option<&Path>, out: &ReportOut) -> Result<()> {
    report.config = Some(json!({
        "run": config.to_json_value(),
        "checkpoint": checkpoint,
    }));
    if let Some(p) = &out.csv {
        write_file(p, &report.to_csv())?;
    }
    match &out.json {
        Some(p) => write_file(p, &report.to_json()),
        None => {
            print!("{}", report.to_json());
            Ok(())
        }
    }
}

pub fn eval_classes(
    config: &RunConfig,
    store_path: &Path,
    classes: Vec<String>,
    class_sets: Option<&Path>,
    checkpoint_path: Option<&Path>,
    out: &ReportOut,
) -> Result<()> {
    let store = SceneStore::load(store_path)?;
    let truths = load_truth(store_path, &store)?;
    let classes = match class_sets {
        Some(p) => load_class_sets(p)?.into_iter().flat_map(|s| s.targets).collect(),
        None => normalize_class_list(classes),
    };
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let backend = backend_for(config, &[&store], &classes)?;
    let report = evaluate_classes(&store, &truths, &classes, &query_encoder(&checkpoint, &backend))?;
    emit_report(report, config, checkpoint_path, out)
}

pub fn eval_tasks(
    config: &RunConfig,
    store_path: &Path,
    tasks_path: &Path,
    checkpoint_path: Option<&Path>,
    out: &ReportOut,
) -> Result<()> {
    let store = SceneStore::load(store_path)?;
    let truths = load_truth(store_path, &store)?;
    let tasks = load_tasks(tasks_path)?;
    let classes: Vec<String> = tasks.iter().flat_map(|t| t.relevant_classes.iter().cloned()).collect();
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let backend = backend_for(config, &[&store], &classes)?;
    let report = average_task_recall(&tasks, &store, &truths, &query_encoder(&checkpoint, &backend))?;
    emit_report(report, config, checkpoint_path, out)
}

struct Bench {
    adapt: SceneStore,
    eval: SceneStore,
    truths: TruthSet,
    class_sets: Vec<NamedClassSet>,
}

fn load_bench(args: &BenchArgs) -> Result<Bench> {
    let adapt = SceneStore::load(&args.adapt)?;
    let eval = SceneStore::load(&args.eval)?;
    let truths = load_truth(&args.eval, &eval)?;
    if truths.is_empty() {
        return Err(Error::NoGroundTruth(args.eval.display().to_string()));
    }
    let class_sets = load_class_sets(&args.class_sets)?;
    Ok(Bench {
        adapt,
        eval,
        truths,
        class_sets,
    })
}

fn with_inputs<T>(config: &RunConfig, args: &BenchArgs, f: impl FnOnce(&BenchInputs<'_>) -> Result<T>) -> Result<T> {
    let bench = load_bench(args)?;
    let targets: Vec<String> = bench.class_sets.iter().flat_map(|s| s.targets.iter().cloned()).collect();
    let backend = backend_for(config, &[&bench.adapt, &bench.eval], &targets)?;
    let llm = class_list_llm(config)?;
    let negatives = mine_negatives(&bench.adapt, &config.train, &config.stopwords()?);
    f(&BenchInputs {
        adapt: &bench.adapt,
        eval: &bench.eval,
        truths: &bench.truths,
        class_sets: &bench.class_sets,
        backend: &backend,
        llm: &llm,
        negatives: &negatives,
    })
}

pub fn ablate(config: &RunConfig, args: &BenchArgs, out: &Path) -> Result<()> {
    let rows = with_inputs(config, args, |inputs| run_ablation(inputs, &config.train))?;
    let report = json!({
        "adapt": args.adapt,
        "eval": args.eval,
        "class_sets": args.class_sets,
        "config": config.to_json_value(),
        "rows": rows,
    });
    let csv = ablation_csv(&rows);
    write_file(&out.join(ABLATION_JSON), &to_json(&report))?;
    write_file(&out.join(ABLATION_CSV), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn sweep(config: &RunConfig, args: &BenchArgs, param: SweepParam, values: &[usize], out: Option<&Path>) -> Result<()> {
    let stopwords = config.stopwords()?;
    let rows = with_inputs(config, args, |inputs| run_sweep(inputs, &config.train, &stopwords, param, values))?;
    let csv = rows_to_csv(&rows);
    match out {
        Some(p) => write_file(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
