//! Segmentation (SEG), tracking (TRA via AOGM) and Fréchet distance
//! between embedding distributions.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LineageRow;
use crate::raster::{label_components, otsu_threshold, ImagePlane, LabelMask};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("sequences are not congruent: {0}")]
    Congruence(String),
    #[error("ground truth holds no objects")]
    EmptyGroundTruth,
    #[error("embedding dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("need at least 2 embeddings, got {0}")]
    TooFewEmbeddings(usize),
    #[error("embedding {0} has a non-finite entry")]
    NonFinite(usize),
    #[error("unknown embedder `{0}`")]
    UnknownEmbedder(String),
    #[error("embedder `{id}` needs at least {needed} frames, got {got}")]
    TooFewFrames { id: String, needed: usize, got: usize },
}

fn check_congruent(gt: &[LabelMask], pred: &[LabelMask]) -> Result<(), MetricsError> {
    if gt.len() != pred.len() {
        return Err(MetricsError::Congruence(format!(
            "{} ground-truth frames vs {} predicted",
            gt.len(),
            pred.len()
        )));
    }
    for (f, (g, p)) in gt.iter().zip(pred).enumerate() {
        if g.size() != p.size() {
            return Err(MetricsError::Congruence(format!(
                "frame {f}: {:?} vs {:?}",
                g.size(),
                p.size()
            )));
        }
    }
    Ok(())
}

/// Overlap statistics of one frame: label areas and pairwise intersections.
struct FrameOverlap {
    gt_area: BTreeMap<u16, usize>,
    pred_area: BTreeMap<u16, usize>,
    inter: HashMap<(u16, u16), usize>,
}

impl FrameOverlap {
    fn new(gt: &LabelMask, pred: &LabelMask) -> Self {
        let mut gt_area = BTreeMap::new();
        let mut pred_area = BTreeMap::new();
        let mut inter = HashMap::new();
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            if g != 0 {
                *gt_area.entry(g).or_insert(0) += 1;
            }
            if p != 0 {
                *pred_area.entry(p).or_insert(0) += 1;
            }
            if g != 0 && p != 0 {
                *inter.entry((g, p)).or_insert(0) += 1;
            }
        }
        Self {
            gt_area,
            pred_area,
            inter,
        }
    }

    /// The prediction covering more than half of `g`, if any.
    fn matched(&self, g: u16) -> Option<(u16, usize)> {
        let area = self.gt_area[&g];
        self.inter
            .iter()
            .filter(|((gl, _), &n)| *gl == g && 2 * n > area)
            .map(|((_, p), &n)| (*p, n))
            .next()
    }
}

/// Per-frame matches of ground-truth objects to predictions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchTable {
    /// `(gt_label, pred_label, jaccard)` per frame.
    pub matches: Vec<Vec<(u16, u16, f64)>>,
    pub unmatched: Vec<Vec<u16>>,
}

impl MatchTable {
    pub fn build(gt: &[LabelMask], pred: &[LabelMask]) -> Result<Self, MetricsError> {
        check_congruent(gt, pred)?;
        let mut table = MatchTable::default();
        for (g, p) in gt.iter().zip(pred) {
            let ov = FrameOverlap::new(g, p);
            let mut matches = Vec::new();
            let mut unmatched = Vec::new();
            for (&gl, &ga) in &ov.gt_area {
                match ov.matched(gl) {
                    Some((pl, n)) => {
                        let union = ga + ov.pred_area[&pl] - n;
                        matches.push((gl, pl, n as f64 / union as f64));
                    }
                    None => unmatched.push(gl),
                }
            }
            table.matches.push(matches);
            table.unmatched.push(unmatched);
        }
        Ok(table)
    }

    pub fn object_count(&self) -> usize {
        self.matches.iter().map(Vec::len).sum::<usize>() + self.unmatched.iter().map(Vec::len).sum::<usize>()
    }

    /// Mean Jaccard over all ground-truth objects, unmatched ones scoring 0.
    pub fn seg(&self) -> Result<f64, MetricsError> {
        let n = self.object_count();
        if n == 0 {
            return Err(MetricsError::EmptyGroundTruth);
        }
        let total: f64 = self.matches.iter().flatten().map(|m| m.2).sum();
        Ok(total / n as f64)
    }
}

pub fn seg_score(gt: &[LabelMask], pred: &[LabelMask]) -> Result<f64, MetricsError> {
    MatchTable::build(gt, pred)?.seg()
}

/// Kind of temporal link.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    /// Same track in successive detections.
    Track,
    /// Last detection of a parent to the first detection of a daughter.
    Division,
}

pub type Vertex = (usize, u16);

/// Detections and temporal links of a labelled sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingGraph {
    pub masks: Vec<LabelMask>,
    pub vertices: BTreeSet<Vertex>,
    pub edges: BTreeMap<(Vertex, Vertex), EdgeKind>,
}

impl TrackingGraph {
    /// Vertices are `(frame, label)` detections. Successive detections of
    /// a label are linked; every lineage row with a parent links the
    /// parent's last detection before the daughter starts to the daughter's
    /// first detection.
    pub fn from_masks(masks: Vec<LabelMask>, lineage: &[LineageRow]) -> Self {
        let mut vertices = BTreeSet::new();
        let mut frames_of: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for (f, m) in masks.iter().enumerate() {
            for l in m.labels() {
                vertices.insert((f, l));
                frames_of.entry(l).or_default().push(f);
            }
        }
        let mut edges = BTreeMap::new();
        for (&l, frames) in &frames_of {
            for pair in frames.windows(2) {
                edges.insert(((pair[0], l), (pair[1], l)), EdgeKind::Track);
            }
        }
        for row in lineage.iter().filter(|r| r.parent != 0) {
            let (Some(pf), Some(df)) = (frames_of.get(&row.parent), frames_of.get(&row.label)) else {
                continue;
            };
            let first_daughter = df[0];
            if let Some(&last_parent) = pf.iter().filter(|&&f| f < first_daughter).last() {
                edges.insert(
                    ((last_parent, row.parent), (first_daughter, row.label)),
                    EdgeKind::Division,
                );
            }
        }
        Self {
            masks,
            vertices,
            edges,
        }
    }
}

/// Costs of the graph edit operations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AogmWeights {
    pub split: f64,
    pub false_negative: f64,
    pub false_positive: f64,
    pub edge_delete: f64,
    pub edge_add: f64,
    pub edge_change: f64,
}

impl Default for AogmWeights {
    fn default() -> Self {
        Self {
            split: 5.0,
            false_negative: 10.0,
            false_positive: 1.0,
            edge_delete: 1.0,
            edge_add: 1.5,
            edge_change: 1.0,
        }
    }
}

/// Operation counts behind an AOGM value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AogmCounts {
    pub splits: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub edges_deleted: usize,
    pub edges_added: usize,
    pub edges_changed: usize,
}

impl AogmCounts {
    pub fn cost(&self, w: &AogmWeights) -> f64 {
        w.split * self.splits as f64
            + w.false_negative * self.false_negatives as f64
            + w.false_positive * self.false_positives as f64
            + w.edge_delete * self.edges_deleted as f64
            + w.edge_add * self.edges_added as f64
            + w.edge_change * self.edges_changed as f64
    }
}

/// Count the edits turning `pred` into `gt`.
pub fn aogm_counts(gt: &TrackingGraph, pred: &TrackingGraph) -> Result<AogmCounts, MetricsError> {
    check_congruent(&gt.masks, &pred.masks)?;
    let mut counts = AogmCounts::default();
    // pred vertex -> matched gt vertices
    let mut assigned: BTreeMap<Vertex, Vec<Vertex>> = BTreeMap::new();
    for (f, (g, p)) in gt.masks.iter().zip(&pred.masks).enumerate() {
        let ov = FrameOverlap::new(g, p);
        for &gl in ov.gt_area.keys() {
            match ov.matched(gl) {
                Some((pl, _)) => assigned.entry((f, pl)).or_default().push((f, gl)),
                None => counts.false_negatives += 1,
            }
        }
    }
    for v in &pred.vertices {
        match assigned.get(v).map(Vec::len) {
            None | Some(0) => counts.false_positives += 1,
            Some(k) => counts.splits += k - 1,
        }
    }
    let mut gt_of: HashMap<Vertex, Vertex> = HashMap::new();
    for (p, gs) in &assigned {
        for g in gs {
            gt_of.insert(*g, *p);
        }
    }
    let mut supported: BTreeSet<(Vertex, Vertex)> = BTreeSet::new();
    for (&(a, b), &gt_kind) in &gt.edges {
        let pred_edge = gt_of.get(&a).zip(gt_of.get(&b)).and_then(|(pa, pb)| {
            pred.edges.get(&(*pa, *pb)).map(|k| ((*pa, *pb), *k))
        });
        match pred_edge {
            Some((e, kind)) => {
                supported.insert(e);
                if kind != gt_kind {
                    counts.edges_changed += 1;
                }
            }
            None => counts.edges_added += 1,
        }
    }
    counts.edges_deleted = pred.edges.keys().filter(|e| !supported.contains(e)).count();
    Ok(counts)
}

/// `1 - min(AOGM, AOGM_0)/AOGM_0`, where `AOGM_0` is the cost of building
/// the ground-truth graph from nothing.
pub fn tra_score(gt: &TrackingGraph, pred: &TrackingGraph, weights: &AogmWeights) -> Result<f64, MetricsError> {
    let aogm0 = weights.false_negative * gt.vertices.len() as f64 + weights.edge_add * gt.edges.len() as f64;
    if gt.vertices.is_empty() || aogm0 <= 0.0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let aogm = aogm_counts(gt, pred)?.cost(weights);
    Ok(1.0 - aogm.min(aogm0) / aogm0)
}

/// Feature vectors with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub source: String,
    pub embedder: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>, source: &str, embedder: &str) -> Result<Self, MetricsError> {
        if vectors.len() < 2 {
            return Err(MetricsError::TooFewEmbeddings(vectors.len()));
        }
        let d = vectors[0].len();
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != d {
                return Err(MetricsError::Dimension(d, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(MetricsError::NonFinite(i));
            }
        }
        Ok(Self {
            vectors,
            source: source.into(),
            embedder: embedder.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    /// Mean and unbiased (`N - 1`) covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.vectors.len();
        let d = self.dim();
        let data = DMatrix::from_fn(n, d, |i, j| self.vectors[i][j]);
        let mean = DVector::from_fn(d, |j, _| data.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
        let cov = centered.transpose() * centered / (n as f64 - 1.0);
        (mean, cov)
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa - μb‖² + Tr(Σa + Σb - 2(Σa Σb)^½)`. The trace of the root is taken
/// from the symmetric matrix `Σa^½ Σb Σa^½`, which shares its eigenvalues
/// with `Σa Σb`; small negative eigenvalues are clipped to zero.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Dimension(a.dim(), b.dim()));
    }
    let (ma, ca) = a.moments();
    let (mb, cb) = b.moments();
    let root_a = psd_sqrt(&ca);
    let inner = &root_a * &cb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Maps frames to feature vectors.
pub trait Embedder {
    fn id(&self) -> &str;
    /// Frames per vector for video embedders; `None` for image embedders.
    fn clip_length(&self) -> Option<usize>;
    fn embed_frames(&self, frames: &[ImagePlane]) -> Vec<Vec<f64>>;
}

/// Block-average a frame onto a `grid`×`grid` lattice.
pub fn downsample(frame: &ImagePlane, grid: usize) -> Vec<f64> {
    let (w, h) = frame.size();
    let mut sum = vec![0.0; grid * grid];
    let mut count = vec![0usize; grid * grid];
    for y in 0..h {
        let gy = y * grid / h;
        for x in 0..w {
            let gx = x * grid / w;
            sum[gy * grid + gx] += frame.get(x, y);
            count[gy * grid + gx] += 1;
        }
    }
    (0..grid * grid)
        .map(|i| {
            if count[i] > 0 {
                sum[i] / count[i] as f64
            } else {
                let (gx, gy) = (i % grid, i / grid);
                frame.get(((2 * gx + 1) * w / (2 * grid)).min(w - 1), ((2 * gy + 1) * h / (2 * grid)).min(h - 1))
            }
        })
        .collect()
}

/// Image embedder: 8×8 block means, 64-D.
#[derive(Clone, Copy, Debug, Default)]
pub struct DownsampleFlatten;

impl Embedder for DownsampleFlatten {
    fn id(&self) -> &str {
        "downsample-flatten"
    }

    fn clip_length(&self) -> Option<usize> {
        None
    }

    fn embed_frames(&self, frames: &[ImagePlane]) -> Vec<Vec<f64>> {
        frames.iter().map(|f| downsample(f, 8)).collect()
    }
}

/// Video embedder: non-overlapping clips of four frames, each frame
/// reduced to 4×4 block means, concatenated to 64-D.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClipDownsample;

impl Embedder for ClipDownsample {
    fn id(&self) -> &str {
        "clip-downsample"
    }

    fn clip_length(&self) -> Option<usize> {
        Some(4)
    }

    fn embed_frames(&self, frames: &[ImagePlane]) -> Vec<Vec<f64>> {
        frames
            .chunks_exact(4)
            .map(|clip| clip.iter().flat_map(|f| downsample(f, 4)).collect())
            .collect()
    }
}

/// Embedders addressable by id.
pub struct EmbedderRegistry {
    entries: BTreeMap<String, Box<dyn Embedder + Send + Sync>>,
}

impl Default for EmbedderRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl EmbedderRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(DownsampleFlatten));
        r.register(Box::new(ClipDownsample));
        r
    }

    pub fn register(&mut self, embedder: Box<dyn Embedder + Send + Sync>) {
        self.entries.insert(embedder.id().to_string(), embedder);
    }

    pub fn get(&self, id: &str) -> Result<&(dyn Embedder + Send + Sync), MetricsError> {
        self.entries
            .get(id)
            .map(|b| b.as_ref())
            .ok_or_else(|| MetricsError::UnknownEmbedder(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// One vector per frame, or per clip for video embedders.
pub fn embed(frames: &[ImagePlane], embedder: &dyn Embedder, source: &str) -> Result<EmbeddingSet, MetricsError> {
    let vectors = embedder.embed_frames(frames);
    if vectors.len() < 2 {
        let needed = 2 * embedder.clip_length().unwrap_or(1);
        return Err(MetricsError::TooFewFrames {
            id: embedder.id().to_string(),
            needed,
            got: frames.len(),
        });
    }
    EmbeddingSet::new(vectors, source, embedder.id())
}

/// Otsu threshold over the whole sequence, then connected components per
/// frame. A simple reference segmenter for synthetic data.
pub fn segment_sequence(frames: &[ImagePlane]) -> Vec<LabelMask> {
    let all: Vec<f64> = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    let t = otsu_threshold(&all);
    frames.iter().map(|f| label_components(f, t)).collect()
}

/// Link detections frame to frame by greatest overlap. Each detection
/// continues the track of the previous-frame object it overlaps most
/// (ties and second claimants start new tracks). Returns relabelled masks
/// and their lineage.
pub fn link_by_overlap(masks: &[LabelMask]) -> (Vec<LabelMask>, Vec<LineageRow>) {
    let mut out = Vec::with_capacity(masks.len());
    let mut rows: BTreeMap<u16, LineageRow> = BTreeMap::new();
    let mut next_id: u16 = 1;
    let mut prev: Option<(LabelMask, BTreeMap<u16, u16>)> = None;
    for (f, m) in masks.iter().enumerate() {
        let mut map: BTreeMap<u16, u16> = BTreeMap::new();
        let mut taken = BTreeSet::new();
        for l in m.labels() {
            let mut track = None;
            if let Some((pm, pmap)) = &prev {
                let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
                for (&a, &b) in m.data().iter().zip(pm.data()) {
                    if a == l && b != 0 {
                        *counts.entry(b).or_insert(0) += 1;
                    }
                }
                if let Some((&best, _)) = counts.iter().max_by_key(|(k, &c)| (c, std::cmp::Reverse(**k))) {
                    let id = pmap[&best];
                    if taken.insert(id) {
                        track = Some(id);
                    }
                }
            }
            let id = match track {
                Some(id) => id,
                None => {
                    let id = next_id;
                    next_id = next_id.saturating_add(1);
                    rows.insert(
                        id,
                        LineageRow {
                            label: id,
                            begin: f,
                            end: f,
                            parent: 0,
                        },
                    );
                    id
                }
            };
            rows.get_mut(&id).expect("track row").end = f;
            map.insert(l, id);
        }
        let relabelled = m.map_labels(|l| if l == 0 { 0 } else { map[&l] });
        prev = Some((m.clone(), map));
        out.push(relabelled);
    }
    (out, rows.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(size: usize, rects: &[(usize, usize, usize, usize, u16)]) -> LabelMask {
        let mut m = LabelMask::empty(size, size);
        for &(x0, y0, w, h, l) in rects {
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    m.set(x, y, l);
                }
            }
        }
        m
    }

    #[test]
    fn seg_examples() {
        let gt = vec![mask_with(8, &[(1, 1, 4, 4, 1)])];
        assert_eq!(seg_score(&gt, &gt).unwrap(), 1.0);
        let pred = vec![mask_with(8, &[(1, 1, 4, 3, 9)])];
        assert!((seg_score(&gt, &pred).unwrap() - 0.75).abs() < 1e-12);
        let empty = vec![LabelMask::empty(8, 8)];
        assert_eq!(seg_score(&gt, &empty).unwrap(), 0.0);
        assert_eq!(seg_score(&empty, &empty), Err(MetricsError::EmptyGroundTruth));
    }

    #[test]
    fn tra_examples() {
        let w = AogmWeights::default();
        let one = TrackingGraph::from_masks(vec![mask_with(6, &[(0, 0, 2, 2, 1)])], &[]);
        let none = TrackingGraph::from_masks(vec![LabelMask::empty(6, 6)], &[]);
        assert_eq!(tra_score(&one, &one, &w).unwrap(), 1.0);
        assert_eq!(tra_score(&one, &none, &w).unwrap(), 0.0);

        let m = mask_with(6, &[(0, 0, 2, 2, 1)]);
        let gt = TrackingGraph::from_masks(vec![m.clone(), m.clone()], &[]);
        assert_eq!(gt.edges.len(), 1);
        // same detections, but the prediction breaks the track
        let pred = TrackingGraph::from_masks(vec![m.clone(), m.map_labels(|l| l * 2)], &[]);
        assert!(pred.edges.is_empty());
        let tra = tra_score(&gt, &pred, &w).unwrap();
        assert!((tra - (1.0 - 1.5 / 21.5)).abs() < 1e-12);
        assert!((tra - 0.9302).abs() < 1e-4);
    }

    #[test]
    fn division_edges_and_semantics() {
        let a = mask_with(8, &[(0, 0, 3, 3, 1)]);
        let b = mask_with(8, &[(0, 0, 3, 3, 2), (5, 5, 3, 3, 3)]);
        let rows = [
            LineageRow { label: 1, begin: 0, end: 0, parent: 0 },
            LineageRow { label: 2, begin: 1, end: 1, parent: 1 },
            LineageRow { label: 3, begin: 1, end: 1, parent: 1 },
        ];
        let gt = TrackingGraph::from_masks(vec![a.clone(), b.clone()], &rows);
        assert_eq!(gt.edges.len(), 2);
        assert!(gt.edges.values().all(|k| *k == EdgeKind::Division));
        // prediction keeps label 1 through as a plain track: one change, one add
        let pred_b = b.map_labels(|l| if l == 2 { 1 } else { l });
        let pred = TrackingGraph::from_masks(vec![a, pred_b], &[]);
        let c = aogm_counts(&gt, &pred).unwrap();
        assert_eq!((c.edges_changed, c.edges_added, c.edges_deleted), (1, 1, 0));
    }

    #[test]
    fn split_vertex_cost() {
        let gt = TrackingGraph::from_masks(vec![mask_with(8, &[(0, 0, 2, 2, 1), (2, 0, 2, 2, 2)])], &[]);
        let pred = TrackingGraph::from_masks(vec![mask_with(8, &[(0, 0, 4, 2, 7)])], &[]);
        let c = aogm_counts(&gt, &pred).unwrap();
        assert_eq!((c.splits, c.false_negatives, c.false_positives), (1, 0, 0));
    }

    #[test]
    fn scalar_frechet() {
        let h = 0.5f64.sqrt();
        let a = EmbeddingSet::new(vec![vec![-h], vec![h]], "a", "t").unwrap();
        let s = 2f64.sqrt();
        let b = EmbeddingSet::new(vec![vec![3.0 - s], vec![3.0 + s]], "b", "t").unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn embedder_registry() {
        let reg = EmbedderRegistry::with_builtins();
        assert!(matches!(reg.get("inception"), Err(MetricsError::UnknownEmbedder(_))));
        let frames = vec![ImagePlane::filled(16, 16, crate::raster::ValueDomain::Normalized, 0.3); 8];
        let set = embed(&frames, reg.get("downsample-flatten").unwrap(), "real").unwrap();
        assert_eq!((set.vectors.len(), set.dim()), (8, 64));
        assert!(set.vectors.iter().all(|v| v == &set.vectors[0]));
        let clips = embed(&frames, reg.get("clip-downsample").unwrap(), "real").unwrap();
        assert_eq!((clips.vectors.len(), clips.dim()), (2, 64));
    }

    #[test]
    fn overlap_linker_follows_moving_object() {
        let masks: Vec<LabelMask> = (0..4).map(|f| mask_with(12, &[(f, 2, 4, 4, 5 + f as u16)])).collect();
        let (linked, rows) = link_by_overlap(&masks);
        assert_eq!(rows, vec![LineageRow { label: 1, begin: 0, end: 3, parent: 0 }]);
        assert!(linked.iter().all(|m| m.labels() == BTreeSet::from([1])));
    }
}
