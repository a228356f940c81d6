//! Cell Tracking Challenge style sequence trees.
//!
//! A sequence named `01` lives in a dataset directory as
//!
//! ```text
//! <dataset>/01/t000.tif ...                 raw frames, 16-bit grayscale
//! <dataset>/01_GT/TRA/man_track000.tif ...  instance masks, label = track id
//! <dataset>/01_GT/TRA/man_track.txt         lineage: "label begin end parent"
//! ```
//!
//! Silver-truth trees (`01_ST/SEG/man_seg###.tif`) are also accepted when
//! scanning.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{ImagePlane, LabelMask, Region, ValueDomain};
use crate::synthesis::SceneRecording;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("TIFF error at {path}: {message}")]
    Tiff { path: PathBuf, message: String },
    #[error("missing annotation: {0}")]
    MissingAnnotation(String),
    #[error("{path}:{line}: malformed lineage row: {message}")]
    Lineage {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{root} holds several sequences ({candidates:?}); pass one sequence directory")]
    AmbiguousSequence {
        root: PathBuf,
        candidates: Vec<String>,
    },
    #[error("frame indices are not contiguous from 0 in {0}")]
    NonContiguous(PathBuf),
    #[error("inconsistent annotations: {0}")]
    Inconsistent(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One row of the lineage table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineageRow {
    pub label: u16,
    pub begin: usize,
    pub end: usize,
    /// `0` when the track has no parent.
    pub parent: u16,
}

/// Parse the whitespace-separated four-column lineage format.
pub fn parse_lineage(text: &str, path: &Path) -> Result<Vec<LineageRow>, DatasetError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| DatasetError::Lineage {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 columns, found {}", fields.len())));
        }
        let mut nums = [0u64; 4];
        for (n, f) in nums.iter_mut().zip(&fields) {
            *n = f
                .parse()
                .map_err(|_| bad(format!("`{f}` is not a non-negative integer")))?;
        }
        let label = u16::try_from(nums[0]).map_err(|_| bad("label exceeds 16 bits".into()))?;
        let parent = u16::try_from(nums[3]).map_err(|_| bad("parent exceeds 16 bits".into()))?;
        if label == 0 {
            return Err(bad("label 0 is reserved for background".into()));
        }
        if nums[1] > nums[2] {
            return Err(bad(format!("begin {} after end {}", nums[1], nums[2])));
        }
        rows.push(LineageRow {
            label,
            begin: nums[1] as usize,
            end: nums[2] as usize,
            parent,
        });
    }
    Ok(rows)
}

pub fn format_lineage(rows: &[LineageRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort();
    sorted
        .iter()
        .map(|r| format!("{} {} {} {}\n", r.label, r.begin, r.end, r.parent))
        .collect()
}

/// Check that mask labels and lineage rows agree: every labelled pixel of
/// frame `f` belongs to a row whose span covers `f`, and every row's label
/// occurs somewhere inside its span.
pub fn validate_annotations(
    labels_per_frame: &[BTreeSet<u16>],
    lineage: &[LineageRow],
) -> Result<(), DatasetError> {
    let mut by_label: BTreeMap<u16, LineageRow> = BTreeMap::new();
    for row in lineage {
        if by_label.insert(row.label, *row).is_some() {
            return Err(DatasetError::Inconsistent(format!(
                "label {} has two lineage rows",
                row.label
            )));
        }
    }
    for row in lineage {
        if row.parent != 0 && !by_label.contains_key(&row.parent) {
            return Err(DatasetError::Inconsistent(format!(
                "track {} names unknown parent {}",
                row.label, row.parent
            )));
        }
        if row.end >= labels_per_frame.len() {
            return Err(DatasetError::Inconsistent(format!(
                "track {} ends at frame {} but the sequence has {} frames",
                row.label,
                row.end,
                labels_per_frame.len()
            )));
        }
        if !(row.begin..=row.end).any(|f| labels_per_frame[f].contains(&row.label)) {
            return Err(DatasetError::Inconsistent(format!(
                "track {} never appears within frames {}..={}",
                row.label, row.begin, row.end
            )));
        }
    }
    for (f, labels) in labels_per_frame.iter().enumerate() {
        for label in labels {
            match by_label.get(label) {
                Some(row) if (row.begin..=row.end).contains(&f) => {}
                Some(row) => {
                    return Err(DatasetError::Inconsistent(format!(
                        "label {label} present in frame {f} outside its span {}..={}",
                        row.begin, row.end
                    )))
                }
                None => {
                    return Err(DatasetError::Inconsistent(format!(
                        "label {label} in frame {f} has no lineage row"
                    )))
                }
            }
        }
    }
    Ok(())
}

/// A scanned sequence: raw frames, per-frame annotations and lineage.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceTree {
    /// Directory holding the raw `t###.tif` frames.
    pub root: PathBuf,
    pub raw_frames: Vec<PathBuf>,
    pub annotations: Vec<PathBuf>,
    pub lineage_path: Option<PathBuf>,
    pub lineage: Option<Vec<LineageRow>>,
    pub labels_per_frame: Vec<BTreeSet<u16>>,
}

impl SequenceTree {
    pub fn frame_count(&self) -> usize {
        self.raw_frames.len()
    }

    pub fn load_raw(&self, frame: usize) -> Result<ImagePlane, DatasetError> {
        let (w, h, data) = read_tiff_u16(&self.raw_frames[frame])?;
        ImagePlane::new(w, h, ValueDomain::Raw, data.into_iter().map(f64::from).collect())
            .map_err(|e| DatasetError::Inconsistent(e.to_string()))
    }

    pub fn load_raw_u16(&self, frame: usize) -> Result<(usize, usize, Vec<u16>), DatasetError> {
        read_tiff_u16(&self.raw_frames[frame])
    }

    pub fn load_mask(&self, frame: usize) -> Result<LabelMask, DatasetError> {
        let (w, h, data) = read_tiff_u16(&self.annotations[frame])?;
        LabelMask::new(w, h, data).map_err(|e| DatasetError::Inconsistent(e.to_string()))
    }

    pub fn load_masks(&self) -> Result<Vec<LabelMask>, DatasetError> {
        (0..self.frame_count()).map(|f| self.load_mask(f)).collect()
    }
}

/// Annotation sub-trees tried in order, with their mask file prefix.
const ANNOTATION_LAYOUTS: [(&str, &str); 4] = [
    ("_GT/TRA", "man_track"),
    ("_ST/TRA", "man_track"),
    ("_ST/SEG", "man_seg"),
    ("_GT/SEG", "man_seg"),
];

/// Frame files in `dir` named `<prefix><digits>.tif`, keyed by index.
fn indexed_files(dir: &Path, prefix: &str) -> Result<BTreeMap<usize, PathBuf>, DatasetError> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(stem) = name
            .strip_suffix(".tif")
            .or_else(|| name.strip_suffix(".tiff"))
        else {
            continue;
        };
        let Some(digits) = stem.strip_prefix(prefix) else {
            continue;
        };
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        if let Ok(idx) = digits.parse::<usize>() {
            out.insert(idx, entry.path());
        }
    }
    Ok(out)
}

fn resolve_sequence_dir(path: &Path) -> Result<PathBuf, DatasetError> {
    if !indexed_files(path, "t")?.is_empty() {
        return Ok(path.to_path_buf());
    }
    let mut candidates = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path).map_err(io_err(path))? {
            let entry = entry.map_err(io_err(path))?;
            let p = entry.path();
            let name = entry.file_name().to_string_lossy().into_owned();
            if p.is_dir() && !name.contains('_') && !indexed_files(&p, "t")?.is_empty() {
                candidates.push(name);
            }
        }
    }
    candidates.sort();
    match candidates.len() {
        0 => Err(DatasetError::MissingAnnotation(format!(
            "no raw frames under {}",
            path.display()
        ))),
        1 => Ok(path.join(&candidates[0])),
        _ => Err(DatasetError::AmbiguousSequence {
            root: path.to_path_buf(),
            candidates,
        }),
    }
}

/// Scan a sequence. `path` may be the raw-frame directory itself or a
/// dataset directory containing exactly one sequence.
pub fn scan_sequence(path: &Path) -> Result<SequenceTree, DatasetError> {
    let seq_dir = resolve_sequence_dir(path)?;
    let raw = indexed_files(&seq_dir, "t")?;
    let seq_name = seq_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let parent = seq_dir.parent().unwrap_or(Path::new("."));

    let mut chosen = None;
    for (suffix, prefix) in ANNOTATION_LAYOUTS {
        let dir = parent.join(format!("{seq_name}{suffix}"));
        let files = indexed_files(&dir, prefix)?;
        if !files.is_empty() {
            chosen = Some((dir, files));
            break;
        }
    }
    let Some((ann_dir, annotations)) = chosen else {
        return Err(DatasetError::MissingAnnotation(format!(
            "no annotation frames found next to {}",
            seq_dir.display()
        )));
    };

    let raw_idx: BTreeSet<usize> = raw.keys().copied().collect();
    let ann_idx: BTreeSet<usize> = annotations.keys().copied().collect();
    if raw_idx != ann_idx {
        let missing: Vec<_> = raw_idx.symmetric_difference(&ann_idx).take(5).collect();
        return Err(DatasetError::MissingAnnotation(format!(
            "raw and annotation frame sets disagree (e.g. frames {missing:?})"
        )));
    }
    if raw_idx.iter().enumerate().any(|(i, &f)| i != f) {
        return Err(DatasetError::NonContiguous(seq_dir));
    }

    let lineage_path = ann_dir.join("man_track.txt");
    let (lineage_path, lineage) = if lineage_path.is_file() {
        let text = fs::read_to_string(&lineage_path).map_err(io_err(&lineage_path))?;
        let rows = parse_lineage(&text, &lineage_path)?;
        (Some(lineage_path), Some(rows))
    } else {
        (None, None)
    };

    let mut tree = SequenceTree {
        root: seq_dir,
        raw_frames: raw.into_values().collect(),
        annotations: annotations.into_values().collect(),
        lineage_path,
        lineage,
        labels_per_frame: Vec::new(),
    };
    tree.labels_per_frame = (0..tree.frame_count())
        .map(|f| tree.load_mask(f).map(|m| m.labels()))
        .collect::<Result<_, _>>()?;
    if let Some(rows) = &tree.lineage {
        validate_annotations(&tree.labels_per_frame, rows)?;
    }
    Ok(tree)
}

/// A centred single-cell training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CellCrop {
    pub image: ImagePlane,
    /// Binary mask (`1` foreground) of the single cell.
    pub mask: LabelMask,
    pub frame: usize,
    pub track_id: u16,
    /// Scene coordinates of the crop's top-left pixel.
    pub offset: (i64, i64),
}

#[derive(Clone, Debug, Default)]
pub struct CropExtraction {
    pub crops: Vec<CellCrop>,
    /// Occurrences skipped because the cell touches the scene border or
    /// does not fit the crop window.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default)]
pub struct PairExtraction {
    pub pairs: Vec<(CellCrop, CellCrop)>,
    pub skipped: usize,
}

fn background_median(image: &ImagePlane, mask: &LabelMask) -> f64 {
    let mut bg: Vec<f64> = image
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &l)| l == 0)
        .map(|(&v, _)| v)
        .collect();
    if bg.is_empty() {
        bg = image.data().to_vec();
    }
    let mid = bg.len() / 2;
    let (_, m, _) = bg.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Largest 4-connected component of `label` as a region plus its pixels.
fn main_component(mask: &LabelMask, label: u16) -> Option<(Region, Vec<usize>)> {
    let comp = mask.components(label).into_iter().next()?;
    let w = mask.width();
    let single = LabelMask::new(
        mask.width(),
        mask.height(),
        {
            let mut d = vec![0u16; mask.data().len()];
            for &p in &comp {
                d[p] = 1;
            }
            d
        },
    )
    .ok()?;
    let region = *single.regions().get(&1)?;
    debug_assert!(comp.iter().all(|&p| p / w <= region.bbox.max_y));
    Some((region, comp))
}

fn touches_border(region: &Region, width: usize, height: usize) -> bool {
    region.bbox.min_x == 0
        || region.bbox.min_y == 0
        || region.bbox.max_x + 1 == width
        || region.bbox.max_y + 1 == height
}

/// Top-left of a `size` window centred on `centroid` rounded to the nearest pixel.
fn window_origin(centroid: (f64, f64), size: usize) -> (i64, i64) {
    let half = (size / 2) as i64;
    (
        centroid.0.round() as i64 - half,
        centroid.1.round() as i64 - half,
    )
}

fn fits_window(region: &Region, origin: (i64, i64), size: usize) -> bool {
    let b = region.bbox;
    let size = size as i64;
    b.min_x as i64 >= origin.0
        && b.min_y as i64 >= origin.1
        && (b.max_x as i64) < origin.0 + size
        && (b.max_y as i64) < origin.1 + size
}

fn cut(
    image: &ImagePlane,
    pixels: &[usize],
    origin: (i64, i64),
    size: usize,
    pad: f64,
    frame: usize,
    track_id: u16,
) -> CellCrop {
    let (w, h) = image.size();
    let mut data = vec![pad; size * size];
    for v in 0..size {
        let y = origin.1 + v as i64;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for u in 0..size {
            let x = origin.0 + u as i64;
            if x >= 0 && x < w as i64 {
                data[v * size + u] = image.get(x as usize, y as usize);
            }
        }
    }
    let mut mask = LabelMask::empty(size, size);
    for &p in pixels {
        let (x, y) = ((p % w) as i64 - origin.0, (p / w) as i64 - origin.1);
        mask.set(x as usize, y as usize, 1);
    }
    CellCrop {
        image: ImagePlane::new(size, size, image.domain(), data).expect("crop buffer"),
        mask,
        frame,
        track_id,
        offset: origin,
    }
}

/// Extract one centred `size`×`size` crop per (frame, label) occurrence.
pub fn extract_crops(tree: &SequenceTree, size: usize) -> Result<CropExtraction, DatasetError> {
    let mut out = CropExtraction::default();
    for frame in 0..tree.frame_count() {
        let image = tree.load_raw(frame)?;
        let mask = tree.load_mask(frame)?;
        out.crops_from_frame(&image, &mask, frame, size);
    }
    Ok(out)
}

impl CropExtraction {
    /// Append crops from one already loaded frame.
    pub fn crops_from_frame(&mut self, image: &ImagePlane, mask: &LabelMask, frame: usize, size: usize) {
        let pad = background_median(image, mask);
        for label in mask.labels() {
            let Some((region, pixels)) = main_component(mask, label) else {
                continue;
            };
            let origin = window_origin(region.centroid(), size);
            if touches_border(&region, mask.width(), mask.height())
                || !fits_window(&region, origin, size)
            {
                self.skipped += 1;
                continue;
            }
            self.crops
                .push(cut(image, &pixels, origin, size, pad, frame, label));
        }
    }
}

/// Pairs of crops of the same track in frames `f` and `f + 1`, both cut
/// with the window centred on the frame-`f` centroid.
pub fn consecutive_mask_pairs(tree: &SequenceTree, size: usize) -> Result<PairExtraction, DatasetError> {
    let mut out = PairExtraction::default();
    if tree.frame_count() < 2 {
        return Ok(out);
    }
    let mut prev = (tree.load_raw(0)?, tree.load_mask(0)?);
    for frame in 0..tree.frame_count() - 1 {
        let next = (tree.load_raw(frame + 1)?, tree.load_mask(frame + 1)?);
        let (img_a, mask_a) = &prev;
        let (img_b, mask_b) = &next;
        let pad_a = background_median(img_a, mask_a);
        let pad_b = background_median(img_b, mask_b);
        let shared: Vec<u16> = mask_a.labels().intersection(&mask_b.labels()).copied().collect();
        for label in shared {
            let (Some((ra, pa)), Some((rb, pb))) =
                (main_component(mask_a, label), main_component(mask_b, label))
            else {
                continue;
            };
            let origin = window_origin(ra.centroid(), size);
            let ok = !touches_border(&ra, mask_a.width(), mask_a.height())
                && !touches_border(&rb, mask_b.width(), mask_b.height())
                && fits_window(&ra, origin, size)
                && fits_window(&rb, origin, size);
            if !ok {
                out.skipped += 1;
                continue;
            }
            out.pairs.push((
                cut(img_a, &pa, origin, size, pad_a, frame, label),
                cut(img_b, &pb, origin, size, pad_b, frame + 1, label),
            ));
        }
        prev = next;
    }
    Ok(out)
}

fn frame_digits(count: usize) -> usize {
    count.saturating_sub(1).to_string().len().max(3)
}

/// Write a recording as sequence `01` under `root`. Returns the raw-frame
/// directory.
pub fn write_scene(recording: &SceneRecording, root: &Path) -> Result<PathBuf, DatasetError> {
    write_sequence(recording, root, "01")
}

/// Write a recording as sequence `name` under `root`.
pub fn write_sequence(
    recording: &SceneRecording,
    root: &Path,
    name: &str,
) -> Result<PathBuf, DatasetError> {
    recording.validate()?;
    let seq_dir = root.join(name);
    let ann_dir = root.join(format!("{name}_GT")).join("TRA");
    fs::create_dir_all(&seq_dir).map_err(io_err(&seq_dir))?;
    fs::create_dir_all(&ann_dir).map_err(io_err(&ann_dir))?;
    let digits = frame_digits(recording.frames.len());
    for (f, (frame, mask)) in recording.frames.iter().zip(&recording.masks).enumerate() {
        let raw = recording.normalization.to_raw(frame);
        write_tiff_u16(
            &seq_dir.join(format!("t{f:0digits$}.tif")),
            frame.width(),
            frame.height(),
            &raw,
        )?;
        write_tiff_u16(
            &ann_dir.join(format!("man_track{f:0digits$}.tif")),
            mask.width(),
            mask.height(),
            mask.data(),
        )?;
    }
    let lineage_path = ann_dir.join("man_track.txt");
    fs::write(&lineage_path, format_lineage(&recording.lineage)).map_err(io_err(&lineage_path))?;
    Ok(seq_dir)
}

pub fn read_tiff_u16(path: &Path) -> Result<(usize, usize, Vec<u16>), DatasetError> {
    let tiff_err = |e: tiff::TiffError| DatasetError::Tiff {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = tiff::decoder::Decoder::new(BufReader::new(file)).map_err(tiff_err)?;
    let (w, h) = decoder.dimensions().map_err(tiff_err)?;
    let data = match decoder.read_image().map_err(tiff_err)? {
        tiff::decoder::DecodingResult::U16(v) => v,
        tiff::decoder::DecodingResult::U8(v) => v.into_iter().map(u16::from).collect(),
        other => {
            return Err(DatasetError::Tiff {
                path: path.to_path_buf(),
                message: format!("unsupported sample type {:?}", std::mem::discriminant(&other)),
            })
        }
    };
    if data.len() != (w * h) as usize {
        return Err(DatasetError::Tiff {
            path: path.to_path_buf(),
            message: "only single-channel rasters are supported".into(),
        });
    }
    Ok((w as usize, h as usize, data))
}

pub fn write_tiff_u16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<(), DatasetError> {
    let tiff_err = |e: tiff::TiffError| DatasetError::Tiff {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = BufWriter::new(file);
    let mut encoder = tiff::encoder::TiffEncoder::new(&mut writer).map_err(tiff_err)?;
    encoder
        .write_image::<tiff::encoder::colortype::Gray16>(width as u32, height as u32, data)
        .map_err(tiff_err)?;
    writer.flush().map_err(io_err(path))?;
    Ok(())
}
