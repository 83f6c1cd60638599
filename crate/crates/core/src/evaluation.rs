//! Ground-truth label assignment, recall@1, Average Task Recall and
//! bounding-box association.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{retrieve, QueryEncoder};
use crate::store::{load_gt_boxes, load_gt_points, BBox, GroundTruth, LabeledBox, Point, SceneStore, SegmentRecord};
use crate::text::canonical_class;

/// Minimum IoU for a box to count as matched.
pub const IOU_MATCH: f64 = 0.5;

/// Majority label of the nearest ground-truth point of every segment point.
/// Ties in the vote go to the lexicographically smallest label.
pub fn assign_gt_label(segment_id: &str, points: &[Point], gt: &GroundTruth) -> Result<String> {
    if points.is_empty() {
        return Err(Error::EmptySegment(segment_id.to_string()));
    }
    if gt.is_empty() {
        return Err(Error::NoGroundTruth(segment_id.to_string()));
    }
    let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
    for p in points {
        let mut best = (f64::INFINITY, 0);
        for (i, q) in gt.points().iter().enumerate() {
            let d: f64 = (0..3).map(|k| (f64::from(p[k]) - f64::from(q[k])).powi(2)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        *votes.entry(gt.labels()[best.1].as_str()).or_default() += 1;
    }
    let top = votes.values().copied().max().expect("at least one vote");
    Ok(votes
        .into_iter()
        .find(|(_, n)| *n == top)
        .map(|(l, _)| l.to_string())
        .expect("a label reached the maximum"))
}

/// Axis-aligned IoU of `[x0, y0, x1, y1]` boxes; zero-area boxes give 0.
pub fn iou_bbox(a: &BBox, b: &BBox) -> f64 {
    let area = |r: &BBox| f64::from(r[2] - r[0]).max(0.0) * f64::from(r[3] - r[1]).max(0.0);
    let (aa, ab) = (area(a), area(b));
    if aa == 0.0 || ab == 0.0 {
        return 0.0;
    }
    let w = (f64::from(a[2].min(b[2])) - f64::from(a[0].max(b[0]))).max(0.0);
    let h = (f64::from(a[3].min(b[3])) - f64::from(a[1].max(b[1]))).max(0.0);
    let inter = w * h;
    inter / (aa + ab - inter)
}

pub fn boxes_match(pred: &BBox, gt: &BBox) -> bool {
    iou_bbox(pred, gt) >= IOU_MATCH
}

/// Label of the best-overlapping box with IoU at least [`IOU_MATCH`]; equal
/// overlaps go to the smaller label.
pub fn assign_box_label(pred: &BBox, boxes: &[LabeledBox]) -> Option<String> {
    boxes
        .iter()
        .map(|b| (iou_bbox(pred, &b.bbox), &b.label))
        .filter(|(iou, _)| *iou >= IOU_MATCH)
        .min_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)))
        .map(|(_, l)| l.clone())
}

/// Lexical class match after lowercasing and plural folding.
pub fn labels_match(a: &str, b: &str) -> bool {
    canonical_class(a) == canonical_class(b)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneTruth {
    Points(GroundTruth),
    Boxes(Vec<LabeledBox>),
}

impl SceneTruth {
    /// Ground-truth label of `segment`, or `None` when no box matches.
    pub fn label_of(&self, store: &SceneStore, segment: &SegmentRecord) -> Result<Option<String>> {
        match self {
            SceneTruth::Points(gt) => {
                assign_gt_label(&segment.segment_id, store.segment_points(segment), gt).map(Some)
            }
            SceneTruth::Boxes(boxes) => match &segment.bbox {
                Some(b) => Ok(assign_box_label(b, boxes)),
                None => Err(Error::EmptySegment(segment.segment_id.clone())),
            },
        }
    }

    /// Canonical names of every label present.
    pub fn label_set(&self) -> Vec<String> {
        let mut out: Vec<String> = match self {
            SceneTruth::Points(gt) => gt.labels().iter().map(|l| canonical_class(l)).collect(),
            SceneTruth::Boxes(b) => b.iter().map(|x| canonical_class(&x.label)).collect(),
        };
        out.sort();
        out.dedup();
        out
    }
}

/// Ground truth keyed by scene id.
pub type TruthSet = BTreeMap<String, SceneTruth>;

/// Loads whatever ground truth `archive` carries for the scenes of `store`.
/// Point ground truth wins over boxes when both are present.
pub fn load_truth(archive: &Path, store: &SceneStore) -> Result<TruthSet> {
    let mut out = TruthSet::new();
    for scene in store.scenes() {
        if let Some(gt) = load_gt_points(archive, &scene.scene_id)? {
            out.insert(scene.scene_id.clone(), SceneTruth::Points(gt));
        } else if let Some(boxes) = load_gt_boxes(archive, &scene.scene_id)? {
            out.insert(scene.scene_id.clone(), SceneTruth::Boxes(boxes));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskQuery {
    pub task: String,
    pub scene_id: String,
    pub relevant_classes: Vec<String>,
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskQuery>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))
}

pub fn save_tasks(path: &Path, tasks: &[TaskQuery]) -> Result<()> {
    let json = serde_json::to_string_pretty(tasks).expect("tasks serialize");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassHit {
    pub scene_id: String,
    pub class: String,
    pub segment_id: String,
    pub score: f64,
    pub gt_label: Option<String>,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecall {
    pub task: String,
    pub scene_id: String,
    pub recalled: Vec<String>,
    pub missed: Vec<String>,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub scene_id: String,
    pub query: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassHit>,
    pub recall_at_1: Option<f64>,
    pub per_task: Vec<TaskRecall>,
    pub atr: Option<f64>,
    pub skipped: Vec<Skipped>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Caches query features per class name for one evaluation.
struct FeatureCache<'a, 'b> {
    encoder: &'a QueryEncoder<'b>,
    cache: HashMap<String, Vec<f64>>,
}

impl<'a, 'b> FeatureCache<'a, 'b> {
    fn new(encoder: &'a QueryEncoder<'b>, classes: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut unique: Vec<String> = classes.into_iter().collect();
        unique.sort();
        unique.dedup();
        let feats = if unique.is_empty() {
            Vec::new()
        } else {
            encoder.class_features(&unique)?
        };
        Ok(Self {
            encoder,
            cache: unique.into_iter().zip(feats).collect(),
        })
    }

    fn get(&mut self, class: &str) -> Result<&[f64]> {
        if !self.cache.contains_key(class) {
            let f = self.encoder.class_features(&[class.to_string()])?.remove(0);
            self.cache.insert(class.to_string(), f);
        }
        Ok(&self.cache[class])
    }
}

fn top1_hit(
    store: &SceneStore,
    scene_index: usize,
    truth: &SceneTruth,
    class: &str,
    query: &[f64],
) -> Result<Option<ClassHit>> {
    let result = retrieve(store, scene_index, class, query, 1)?;
    let Some(top) = result.top() else {
        return Ok(None);
    };
    let scene = store.scene(scene_index);
    let segment = scene
        .segments
        .iter()
        .find(|s| s.segment_id == top.segment_id)
        .expect("retrieved segment belongs to the scene");
    let gt_label = truth.label_of(store, segment)?;
    let hit = gt_label.as_deref().is_some_and(|l| labels_match(l, class));
    Ok(Some(ClassHit {
        scene_id: scene.scene_id.clone(),
        class: class.to_string(),
        segment_id: top.segment_id.clone(),
        score: top.score,
        gt_label,
        hit,
    }))
}

/// Per-class top-1 hits in one scene and their mean.
pub fn recall_at_1(
    store: &SceneStore,
    scene_index: usize,
    truth: Option<&SceneTruth>,
    classes: &[String],
    encoder: &QueryEncoder<'_>,
) -> Result<(Vec<ClassHit>, f64)> {
    if classes.is_empty() {
        return Err(Error::InvalidConfig("recall@1 needs at least one class".into()));
    }
    let scene_id = &store.scene(scene_index).scene_id;
    let truth = truth.ok_or_else(|| Error::NoGroundTruth(scene_id.clone()))?;
    let mut cache = FeatureCache::new(encoder, classes.iter().cloned())?;
    let mut hits = Vec::with_capacity(classes.len());
    for c in classes {
        let q = cache.get(c)?.to_vec();
        if let Some(h) = top1_hit(store, scene_index, truth, c, &q)? {
            hits.push(h);
        }
    }
    let m = mean(hits.iter().map(|h| f64::from(u8::from(h.hit)))).unwrap_or(0.0);
    Ok((hits, m))
}

/// recall@1 over every scene with ground truth. Each class is queried in the
/// scenes whose ground truth contains it; other pairs are listed as skipped.
pub fn evaluate_classes(
    store: &SceneStore,
    truths: &TruthSet,
    classes: &[String],
    encoder: &QueryEncoder<'_>,
) -> Result<EvalReport> {
    if classes.is_empty() {
        return Err(Error::InvalidConfig("recall@1 needs at least one class".into()));
    }
    let mut cache = FeatureCache::new(encoder, classes.iter().cloned())?;
    let mut report = EvalReport::default();
    for (si, scene) in store.scenes().iter().enumerate() {
        let Some(truth) = truths.get(&scene.scene_id) else {
            report.skipped.push(Skipped {
                scene_id: scene.scene_id.clone(),
                query: String::new(),
                reason: "no ground truth".into(),
            });
            continue;
        };
        let present = truth.label_set();
        for c in classes {
            if !present.contains(&canonical_class(c)) {
                report.skipped.push(Skipped {
                    scene_id: scene.scene_id.clone(),
                    query: c.clone(),
                    reason: "class absent from scene".into(),
                });
                continue;
            }
            let q = cache.get(c)?.to_vec();
            if let Some(h) = top1_hit(store, si, truth, c, &q)? {
                report.per_class.push(h);
            }
        }
    }
    report.recall_at_1 = mean(report.per_class.iter().map(|h| f64::from(u8::from(h.hit))));
    Ok(report)
}

/// Average Task Recall: each relevant class is recalled when the top-1
/// segment for its prompt carries its label.
pub fn average_task_recall(
    tasks: &[TaskQuery],
    store: &SceneStore,
    truths: &TruthSet,
    encoder: &QueryEncoder<'_>,
) -> Result<EvalReport> {
    let mut cache = FeatureCache::new(encoder, tasks.iter().flat_map(|t| t.relevant_classes.iter().cloned()))?;
    let mut report = EvalReport::default();
    for task in tasks {
        let si = store
            .scene_index(&task.scene_id)
            .ok_or_else(|| Error::UnknownScene(task.scene_id.clone()))?;
        let truth = truths
            .get(&task.scene_id)
            .ok_or_else(|| Error::NoGroundTruth(task.scene_id.clone()))?;
        if task.relevant_classes.is_empty() {
            report.skipped.push(Skipped {
                scene_id: task.scene_id.clone(),
                query: task.task.clone(),
                reason: "task has no relevant classes".into(),
            });
            continue;
        }
        let mut recalled = Vec::new();
        let mut missed = Vec::new();
        for c in &task.relevant_classes {
            let q = cache.get(c)?.to_vec();
            let hit = top1_hit(store, si, truth, c, &q)?;
            if let Some(h) = &hit {
                report.per_class.push(h.clone());
            }
            if hit.is_some_and(|h| h.hit) {
                recalled.push(c.clone());
            } else {
                missed.push(c.clone());
            }
        }
        let recall = recalled.len() as f64 / task.relevant_classes.len() as f64;
        report.per_task.push(TaskRecall {
            task: task.task.clone(),
            scene_id: task.scene_id.clone(),
            recalled,
            missed,
            recall,
        });
    }
    report.recall_at_1 = mean(report.per_class.iter().map(|h| f64::from(u8::from(h.hit))));
    report.atr = mean(report.per_task.iter().map(|t| t.recall));
    Ok(report)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    kind: &'a str,
    scene_id: &'a str,
    query: &'a str,
    segment_id: &'a str,
    gt_label: &'a str,
    value: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per class query and one per task.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for h in &self.per_class {
            w.serialize(CsvRow {
                kind: "class",
                scene_id: &h.scene_id,
                query: &h.class,
                segment_id: &h.segment_id,
                gt_label: h.gt_label.as_deref().unwrap_or(""),
                value: f64::from(u8::from(h.hit)),
            })
            .expect("in-memory csv");
        }
        for t in &self.per_task {
            w.serialize(CsvRow {
                kind: "task",
                scene_id: &t.scene_id,
                query: &t.task,
                segment_id: "",
                gt_label: "",
                value: t.recall,
            })
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(points: &[([f32; 3], &str)]) -> GroundTruth {
        GroundTruth::new(
            points.iter().map(|p| p.0).collect(),
            points.iter().map(|p| p.1.to_string()).collect(),
        )
        .unwrap()
    }

    fn table_and_chair() -> GroundTruth {
        gt(&[([0.0, 0.0, 0.0], "chair"), ([10.0, 0.0, 0.0], "table")])
    }

    #[test]
    fn label_majority_and_ties() {
        let g = table_and_chair();
        assert_eq!(assign_gt_label("s", &[[0.1, 0.0, 0.0], [0.2, 0.0, 0.0]], &g).unwrap(), "chair");
        assert_eq!(
            assign_gt_label("s", &[[0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [9.0, 0.0, 0.0]], &g).unwrap(),
            "chair"
        );
        assert_eq!(assign_gt_label("s", &[[0.1, 0.0, 0.0], [9.0, 0.0, 0.0]], &g).unwrap(), "chair");
        let flipped = gt(&[([0.0, 0.0, 0.0], "table"), ([10.0, 0.0, 0.0], "chair")]);
        assert_eq!(assign_gt_label("s", &[[0.1, 0.0, 0.0], [9.0, 0.0, 0.0]], &flipped).unwrap(), "chair");
        assert!(matches!(assign_gt_label("s", &[], &g), Err(Error::EmptySegment(_))));
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou_bbox(&[0.0, 0.0, 2.0, 2.0], &[0.0, 0.0, 2.0, 2.0]), 1.0);
        assert_eq!(iou_bbox(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]), 0.0);
        assert!((iou_bbox(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs() < 1e-9);
        assert_eq!(iou_bbox(&[1.0, 1.0, 1.0, 3.0], &[0.0, 0.0, 2.0, 2.0]), 0.0);
        assert!(boxes_match(&[0.0, 0.0, 2.0, 2.0], &[0.0, 0.0, 2.0, 1.0]));
        assert!(!boxes_match(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]));
    }

    #[test]
    fn box_labels() {
        let boxes = vec![
            LabeledBox {
                label: "mug".into(),
                bbox: [0.0, 0.0, 2.0, 2.0],
            },
            LabeledBox {
                label: "cup".into(),
                bbox: [0.0, 0.0, 2.0, 2.0],
            },
        ];
        assert_eq!(assign_box_label(&[0.0, 0.0, 2.0, 2.0], &boxes).as_deref(), Some("cup"));
        assert_eq!(assign_box_label(&[5.0, 5.0, 6.0, 6.0], &boxes), None);
    }

    #[test]
    fn plural_insensitive_matching() {
        assert!(labels_match("Chairs", "chair"));
        assert!(!labels_match("chair", "table"));
    }
}
