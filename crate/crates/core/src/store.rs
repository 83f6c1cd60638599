//! Segment archive: the data model for previously observed objects and its
//! on-disk layout.
//!
//! An archive is a directory holding
//!
//! * `segments.jsonl`: one [`SegmentRecord`] per line, grouped by scene,
//! * `embeddings.bin`: `"QAEB"`, `u32` version, `u32` count, `u32` dim, then
//!   `count * dim` little-endian `f32`,
//! * `points.bin`: `"QAPC"`, `u32` version, `u32` count, then `count * 3` `f32`,
//! * optionally `gt/<scene_id>/gt_points.bin` (`"QAGT"`) and
//!   `gt/<scene_id>/gt_boxes.json` with evaluation ground truth.
//!
//! Image crops are never stored. Embeddings are kept unit-norm so cosine
//! similarity is a dot product.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm_f32;

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"QAEB";
pub const POINTS_MAGIC: &[u8; 4] = b"QAPC";
pub const GT_MAGIC: &[u8; 4] = b"QAGT";
pub const FORMAT_VERSION: u32 = 1;

pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const POINTS_FILE: &str = "points.bin";
pub const GT_DIR: &str = "gt";
pub const GT_POINTS_FILE: &str = "gt_points.bin";
pub const GT_BOXES_FILE: &str = "gt_boxes.json";

/// Norms within this distance of 1 are accepted untouched.
pub const NORM_TOLERANCE: f64 = 1e-4;
/// Norms within this distance of 1 are renormalized; anything further is rejected.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;

pub type Point = [f32; 3];

/// Axis-aligned 2D box in pixels, `[x0, y0, x1, y1]`.
pub type BBox = [f32; 4];

/// One observed object segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub segment_id: String,
    pub scene_id: String,
    pub caption: String,
    pub embedding_row: u32,
    pub point_offset: u32,
    pub point_count: u32,
    pub mask_ref: Option<String>,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub segments: Vec<SegmentRecord>,
}

/// Input for [`SceneStore::append_scene`]: one segment with its own embedding
/// and points. Offsets are assigned on append.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentInput {
    pub segment_id: String,
    pub caption: String,
    pub embedding: Vec<f32>,
    pub points: Vec<Point>,
    pub mask_ref: Option<String>,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneInput {
    pub scene_id: String,
    pub segments: Vec<SegmentInput>,
}

/// Ordered collection of scenes sharing one embedding matrix and one point
/// buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneStore {
    dim: usize,
    scenes: Vec<Scene>,
    embeddings: Vec<f32>,
    points: Vec<Point>,
}

/// Counters collected while validating an archive.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub renormalized: usize,
}

impl SceneStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            scenes: Vec::new(),
            embeddings: Vec::new(),
            points: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn scene(&self, index: usize) -> &Scene {
        &self.scenes[index]
    }

    pub fn scene_index(&self, scene_id: &str) -> Option<usize> {
        self.scenes.iter().position(|s| s.scene_id == scene_id)
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn num_segments(&self) -> usize {
        self.scenes.iter().map(|s| s.segments.len()).sum()
    }

    pub fn num_embeddings(&self) -> usize {
        self.embeddings.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn embedding(&self, row: u32) -> &[f32] {
        let start = row as usize * self.dim;
        &self.embeddings[start..start + self.dim]
    }

    pub fn segment_embedding(&self, segment: &SegmentRecord) -> &[f32] {
        self.embedding(segment.embedding_row)
    }

    pub fn segment_points(&self, segment: &SegmentRecord) -> &[Point] {
        let start = segment.point_offset as usize;
        &self.points[start..start + segment.point_count as usize]
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn raw_embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    /// All segments in archive order.
    pub fn segments(&self) -> impl Iterator<Item = &SegmentRecord> {
        self.scenes.iter().flat_map(|s| s.segments.iter())
    }

    /// A store holding only the first `n` scenes, with embeddings and points
    /// compacted.
    pub fn prefix(&self, n: usize) -> Result<SceneStore> {
        self.subset(|i, _| i < n)
    }

    /// A store holding the scenes accepted by `keep`, in order.
    pub fn subset(&self, mut keep: impl FnMut(usize, &Scene) -> bool) -> Result<SceneStore> {
        let mut out = SceneStore::new(self.dim);
        for (i, scene) in self.scenes.iter().enumerate() {
            if keep(i, scene) {
                out = out.append_scene(self.scene_input(i))?;
            }
        }
        Ok(out)
    }

    /// Reconstructs the append input for one scene.
    pub fn scene_input(&self, index: usize) -> SceneInput {
        let scene = &self.scenes[index];
        SceneInput {
            scene_id: scene.scene_id.clone(),
            segments: scene
                .segments
                .iter()
                .map(|s| SegmentInput {
                    segment_id: s.segment_id.clone(),
                    caption: s.caption.clone(),
                    embedding: self.segment_embedding(s).to_vec(),
                    points: self.segment_points(s).to_vec(),
                    mask_ref: s.mask_ref.clone(),
                    bbox: s.bbox,
                })
                .collect(),
        }
    }

    /// Appends one scene at the end of the store. Prior scenes are untouched.
    ///
    /// An empty store adopts the dimension of the first scene.
    pub fn append_scene(mut self, scene: SceneInput) -> Result<SceneStore> {
        if self.scene_index(&scene.scene_id).is_some() {
            return Err(Error::DuplicateScene(scene.scene_id));
        }
        if scene.segments.is_empty() {
            return Err(Error::EmptyScene(scene.scene_id));
        }
        let dim = if self.scenes.is_empty() && self.embeddings.is_empty() {
            scene.segments[0].embedding.len()
        } else {
            self.dim
        };
        let mut seen: HashSet<&str> = self.segments().map(|s| s.segment_id.as_str()).collect();
        let mut normalized = Vec::with_capacity(scene.segments.len());
        for seg in &scene.segments {
            if seg.embedding.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: seg.embedding.len(),
                });
            }
            if !seen.insert(seg.segment_id.as_str()) {
                return Err(Error::DuplicateSegment(seg.segment_id.clone()));
            }
            let mut emb = seg.embedding.clone();
            normalize_embedding(&seg.segment_id, &mut emb)?;
            normalized.push(emb);
        }

        self.dim = dim;
        let mut records = Vec::with_capacity(scene.segments.len());
        for (seg, emb) in scene.segments.into_iter().zip(normalized) {
            let row = u32::try_from(self.num_embeddings()).expect("embedding count fits u32");
            let offset = u32::try_from(self.points.len()).expect("point count fits u32");
            let count = u32::try_from(seg.points.len()).expect("point count fits u32");
            self.embeddings.extend_from_slice(&emb);
            self.points.extend_from_slice(&seg.points);
            records.push(SegmentRecord {
                segment_id: seg.segment_id,
                scene_id: scene.scene_id.clone(),
                caption: seg.caption,
                embedding_row: row,
                point_offset: offset,
                point_count: count,
                mask_ref: seg.mask_ref,
                bbox: seg.bbox,
            });
        }
        self.scenes.push(Scene {
            scene_id: scene.scene_id,
            segments: records,
        });
        Ok(self)
    }

    /// Reads and validates an archive directory.
    pub fn load(dir: &Path) -> Result<SceneStore> {
        Self::load_with_report(dir).map(|(s, _)| s)
    }

    pub fn load_with_report(dir: &Path) -> Result<(SceneStore, LoadReport)> {
        if !dir.is_dir() {
            return Err(Error::NotFound(dir.to_path_buf()));
        }
        let (dim, mut embeddings) = read_embeddings(&dir.join(EMBEDDINGS_FILE))?;
        let points = read_points(&dir.join(POINTS_FILE))?;
        let records = read_segments(&dir.join(SEGMENTS_FILE))?;

        let count = embeddings.len().checked_div(dim).unwrap_or(0);
        let mut scenes: Vec<Scene> = Vec::new();
        let mut closed: HashSet<String> = HashSet::new();
        let mut ids: HashSet<String> = HashSet::new();
        let mut report = LoadReport::default();
        let mut renormalized_rows: HashSet<u32> = HashSet::new();

        for rec in records {
            if !ids.insert(rec.segment_id.clone()) {
                return Err(Error::DuplicateSegment(rec.segment_id));
            }
            if rec.embedding_row as usize >= count {
                return Err(Error::malformed(
                    SEGMENTS_FILE,
                    format!(
                        "segment {} references embedding row {} of {count}",
                        rec.segment_id, rec.embedding_row
                    ),
                ));
            }
            let end = rec.point_offset as u64 + rec.point_count as u64;
            if end > points.len() as u64 {
                return Err(Error::malformed(
                    SEGMENTS_FILE,
                    format!(
                        "segment {} point range {}+{} exceeds buffer of {}",
                        rec.segment_id,
                        rec.point_offset,
                        rec.point_count,
                        points.len()
                    ),
                ));
            }
            if let Some(b) = rec.bbox {
                if !(b[0] <= b[2] && b[1] <= b[3]) {
                    return Err(Error::malformed(
                        SEGMENTS_FILE,
                        format!("segment {} has an inverted bbox", rec.segment_id),
                    ));
                }
            }
            let row = rec.embedding_row as usize;
            let emb = &mut embeddings[row * dim..(row + 1) * dim];
            if normalize_embedding(&rec.segment_id, emb)? && renormalized_rows.insert(rec.embedding_row) {
                report.renormalized += 1;
            }

            match scenes.last_mut() {
                Some(scene) if scene.scene_id == rec.scene_id => scene.segments.push(rec),
                _ => {
                    if let Some(prev) = scenes.last() {
                        closed.insert(prev.scene_id.clone());
                    }
                    if closed.contains(&rec.scene_id) {
                        return Err(Error::malformed(
                            SEGMENTS_FILE,
                            format!("segments of scene {} are not contiguous", rec.scene_id),
                        ));
                    }
                    scenes.push(Scene {
                        scene_id: rec.scene_id.clone(),
                        segments: vec![rec],
                    });
                }
            }
        }
        if report.renormalized > 0 {
            log::warn!(
                "{}: renormalized {} embeddings that were off unit norm",
                dir.display(),
                report.renormalized
            );
        }
        Ok((
            SceneStore {
                dim,
                scenes,
                embeddings,
                points,
            },
            report,
        ))
    }

    /// Writes the archive files into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut jsonl = Vec::new();
        for seg in self.segments() {
            serde_json::to_writer(&mut jsonl, seg).expect("segment records serialize");
            jsonl.push(b'\n');
        }
        write_file(&dir.join(SEGMENTS_FILE), &jsonl)?;

        let count = self.num_embeddings() as u32;
        let mut buf = Vec::with_capacity(16 + self.embeddings.len() * 4);
        buf.extend_from_slice(EMBEDDINGS_MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_u32(&mut buf, count);
        put_u32(&mut buf, self.dim as u32);
        for v in &self.embeddings {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_file(&dir.join(EMBEDDINGS_FILE), &buf)?;

        write_file(&dir.join(POINTS_FILE), &encode_points(POINTS_MAGIC, &self.points))?;
        Ok(())
    }
}

/// Returns `true` when the vector was renormalized.
fn normalize_embedding(segment_id: &str, emb: &mut [f32]) -> Result<bool> {
    let n = norm_f32(emb);
    let deviation = (n - 1.0).abs();
    if !n.is_finite() || deviation > RENORMALIZE_TOLERANCE {
        return Err(Error::NormOutOfTolerance {
            segment_id: segment_id.to_string(),
            norm: n,
        });
    }
    if deviation > NORM_TOLERANCE {
        for v in emb.iter_mut() {
            *v = (f64::from(*v) / n) as f32;
        }
        return Ok(true);
    }
    Ok(false)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Little-endian cursor over a binary file with named errors.
struct Reader<'a> {
    file: String,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(file: &Path, bytes: &'a [u8]) -> Self {
        Self {
            file: file
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            bytes,
            pos: 0,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::malformed(&self.file, "unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::malformed(&self.file, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4).ok() != Some(&magic[..]) {
            return Err(Error::BadMagic {
                file: self.file.clone(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                file: self.file.clone(),
                found: version,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::malformed(
                &self.file,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_embeddings(path: &Path) -> Result<(usize, Vec<f32>)> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.header(EMBEDDINGS_MAGIC)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let data = r.f32s(count * dim)?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::malformed(EMBEDDINGS_FILE, "non-finite embedding value"));
    }
    Ok((dim, data))
}

fn read_points(path: &Path) -> Result<Vec<Point>> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.header(POINTS_MAGIC)?;
    let count = r.u32()? as usize;
    let flat = r.f32s(count * 3)?;
    r.finish()?;
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn read_segments(path: &Path) -> Result<Vec<SegmentRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SegmentRecord = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(SEGMENTS_FILE, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn encode_points(magic: &[u8; 4], points: &[Point]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + points.len() * 12);
    buf.extend_from_slice(magic);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, points.len() as u32);
    for p in points {
        for c in p {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    buf
}

/// Labeled ground-truth point cloud for one evaluation scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    points: Vec<Point>,
    labels: Vec<String>,
}

impl GroundTruth {
    pub fn new(points: Vec<Point>, labels: Vec<String>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::malformed(
                GT_POINTS_FILE,
                format!("{} points but {} labels", points.len(), labels.len()),
            ));
        }
        Ok(Self { points, labels })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = encode_points(GT_MAGIC, &self.points);
        for label in &self.labels {
            let bytes = label.as_bytes();
            let len = u16::try_from(bytes.len()).expect("label shorter than 64 KiB");
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(bytes);
        }
        buf
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.header(GT_MAGIC)?;
        let count = r.u32()? as usize;
        let flat = r.f32s(count * 3)?;
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let raw = r.take(len)?;
            let s = std::str::from_utf8(raw)
                .map_err(|_| Error::malformed(GT_POINTS_FILE, "label is not UTF-8"))?;
            labels.push(s.to_string());
        }
        r.finish()?;
        let points = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        GroundTruth::new(points, labels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(path, &bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_file(path, &self.to_bytes())
    }
}

/// Labeled ground-truth box, used when an archive carries no depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: String,
    pub bbox: BBox,
}

pub fn gt_scene_dir(archive: &Path, scene_id: &str) -> PathBuf {
    archive.join(GT_DIR).join(scene_id)
}

pub fn save_gt_points(archive: &Path, scene_id: &str, gt: &GroundTruth) -> Result<()> {
    gt.save(&gt_scene_dir(archive, scene_id).join(GT_POINTS_FILE))
}

/// Point ground truth of one scene, or `None` when the archive has none.
pub fn load_gt_points(archive: &Path, scene_id: &str) -> Result<Option<GroundTruth>> {
    let path = gt_scene_dir(archive, scene_id).join(GT_POINTS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    GroundTruth::load(&path).map(Some)
}

pub fn save_gt_boxes(archive: &Path, scene_id: &str, boxes: &[LabeledBox]) -> Result<()> {
    let dir = gt_scene_dir(archive, scene_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let json = serde_json::to_vec_pretty(boxes).expect("boxes serialize");
    write_file(&dir.join(GT_BOXES_FILE), &json)
}

pub fn load_gt_boxes(archive: &Path, scene_id: &str) -> Result<Option<Vec<LabeledBox>>> {
    let path = gt_scene_dir(archive, scene_id).join(GT_BOXES_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = read_file(&path)?;
    serde_json::from_slice(&bytes)
        .map(Some)
        .map_err(|e| Error::malformed(GT_BOXES_FILE, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, axis: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    fn seg(id: &str, emb: Vec<f32>, npts: usize) -> SegmentInput {
        SegmentInput {
            segment_id: id.into(),
            caption: format!("a photo of {id}"),
            embedding: emb,
            points: (0..npts).map(|i| [i as f32, 0.5, -1.0]).collect(),
            mask_ref: None,
            bbox: None,
        }
    }

    fn two_scene_store() -> SceneStore {
        SceneStore::new(4)
            .append_scene(SceneInput {
                scene_id: "s1".into(),
                segments: vec![seg("a", unit(4, 0), 2), seg("b", unit(4, 1), 1)],
            })
            .unwrap()
            .append_scene(SceneInput {
                scene_id: "s2".into(),
                segments: vec![seg("c", unit(4, 2), 3)],
            })
            .unwrap()
    }

    #[test]
    fn append_to_empty_store() {
        let store = SceneStore::new(0)
            .append_scene(SceneInput {
                scene_id: "s1".into(),
                segments: vec![seg("a", unit(3, 0), 1)],
            })
            .unwrap();
        assert_eq!(store.scenes().len(), 1);
        assert_eq!(store.dim(), 3);
    }

    #[test]
    fn append_keeps_order_and_rebases_offsets() {
        let store = two_scene_store();
        let ids: Vec<_> = store.scenes().iter().map(|s| s.scene_id.as_str()).collect();
        assert_eq!(ids, ["s1", "s2"]);
        let c = &store.scene(1).segments[0];
        assert_eq!(c.embedding_row, 2);
        assert_eq!(c.point_offset, 3);
        assert_eq!(store.segment_points(c).len(), 3);
    }

    #[test]
    fn duplicate_scene_rejected() {
        let err = two_scene_store()
            .append_scene(SceneInput {
                scene_id: "s1".into(),
                segments: vec![seg("z", unit(4, 0), 1)],
            })
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateScene(id) if id == "s1"));
    }

    #[test]
    fn dim_mismatch_rejected() {
        let err = two_scene_store()
            .append_scene(SceneInput {
                scene_id: "s3".into(),
                segments: vec![seg("z", unit(5, 0), 1)],
            })
            .unwrap_err();
        assert!(matches!(err, Error::DimMismatch { expected: 4, got: 5 }));
    }

    #[test]
    fn embeddings_file_size_follows_format() {
        let dir = tempfile::tempdir().unwrap();
        two_scene_store().save(dir.path()).unwrap();
        let bytes = fs::read(dir.path().join(EMBEDDINGS_FILE)).unwrap();
        assert_eq!(bytes.len(), 16 + 3 * 4 * 4);
        assert_eq!(&bytes[..4], b"QAEB");
    }

    #[test]
    fn empty_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        SceneStore::new(8).save(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(EMBEDDINGS_FILE)).unwrap().len(), 16);
        assert_eq!(fs::read(dir.path().join(POINTS_FILE)).unwrap().len(), 12);
        assert!(fs::read(dir.path().join(SEGMENTS_FILE)).unwrap().is_empty());
        let loaded = SceneStore::load(dir.path()).unwrap();
        assert_eq!(loaded.dim(), 8);
        assert!(loaded.is_empty());
    }

    #[test]
    fn off_norm_embedding_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let store = two_scene_store();
        store.save(dir.path()).unwrap();
        // overwrite row 0 with a vector of norm 0.5
        let mut bytes = fs::read(dir.path().join(EMBEDDINGS_FILE)).unwrap();
        bytes[16..20].copy_from_slice(&0.5f32.to_le_bytes());
        fs::write(dir.path().join(EMBEDDINGS_FILE), bytes).unwrap();
        let err = SceneStore::load(dir.path()).unwrap_err();
        match err {
            Error::NormOutOfTolerance { segment_id, norm } => {
                assert_eq!(segment_id, "a");
                assert!((norm - 0.5).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn slightly_off_norm_is_renormalized() {
        let dir = tempfile::tempdir().unwrap();
        two_scene_store().save(dir.path()).unwrap();
        let mut bytes = fs::read(dir.path().join(EMBEDDINGS_FILE)).unwrap();
        bytes[16..20].copy_from_slice(&1.0005f32.to_le_bytes());
        fs::write(dir.path().join(EMBEDDINGS_FILE), bytes).unwrap();
        let (store, report) = SceneStore::load_with_report(dir.path()).unwrap();
        assert_eq!(report.renormalized, 1);
        assert!((norm_f32(store.embedding(0)) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        two_scene_store().save(dir.path()).unwrap();
        let path = dir.path().join(POINTS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 2;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            SceneStore::load(dir.path()).unwrap_err(),
            Error::UnsupportedVersion { found: 2, .. }
        ));
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(SceneStore::load(dir.path()).unwrap_err(), Error::BadMagic { .. }));
    }

    #[test]
    fn point_range_out_of_bounds() {
        let dir = tempfile::tempdir().unwrap();
        two_scene_store().save(dir.path()).unwrap();
        let path = dir.path().join(SEGMENTS_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"point_count\":3", "\"point_count\":9");
        fs::write(&path, text).unwrap();
        assert!(matches!(SceneStore::load(dir.path()).unwrap_err(), Error::Malformed { .. }));
    }

    #[test]
    fn missing_directory_is_not_found() {
        let err = SceneStore::load(Path::new("/nonexistent/archive")).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }

    #[test]
    fn ground_truth_round_trip() {
        let gt = GroundTruth::new(
            vec![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]],
            vec!["chair".into(), "coffee mug".into()],
        )
        .unwrap();
        let bytes = gt.to_bytes();
        assert_eq!(&bytes[..4], b"QAGT");
        let back = GroundTruth::from_bytes(Path::new("gt_points.bin"), &bytes).unwrap();
        assert_eq!(back, gt);
    }

    #[test]
    fn ground_truth_label_count_checked() {
        assert!(GroundTruth::new(vec![[0.0; 3]], vec![]).is_err());
    }
}
