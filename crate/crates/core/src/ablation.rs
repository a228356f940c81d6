//! Sweep over first-frame and later-frame step counts. Each grid cell
//! generates one scene from the same seeds and scores it against its own
//! masks with the reference segmenter and tracker, and optionally against
//! real frames with the Fréchet distances.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{GenerationConfig, SceneConfig};
use crate::metrics::{
    embed, frechet_distance, link_by_overlap, segment_sequence, seg_score, tra_score, AogmWeights, EmbedderRegistry,
    MetricsError, TrackingGraph,
};
use crate::pipeline::{generate_recording, Models};
use crate::raster::ImagePlane;
use crate::synthesis::{GenerationMode, SceneRecording};

pub const IMAGE_EMBEDDER: &str = "downsample-flatten";
pub const VIDEO_EMBEDDER: &str = "clip-downsample";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub t_first: Vec<usize>,
    pub t_later: Vec<usize>,
}

impl AblationGrid {
    /// First-frame steps 100, 200, 400, 600 against later-frame steps
    /// 0, 10, 30, 50, 200.
    pub fn paper() -> Self {
        Self {
            t_first: vec![100, 200, 400, 600],
            t_later: vec![0, 10, 30, 50, 200],
        }
    }

    /// Every `(t_first, t_later)` pair, row-major over `t_first`.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.t_first
            .iter()
            .flat_map(|&f| self.t_later.iter().map(move |&l| (f, l)))
            .collect()
    }
}

/// Later frames are generated independently when they get at least as
/// many steps as the first one; otherwise they are propagated.
pub fn mode_for(t_first: usize, t_later: usize) -> GenerationMode {
    if t_later >= t_first {
        GenerationMode::Independent
    } else {
        GenerationMode::Propagate
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub t_first: usize,
    pub t_later: usize,
    pub mode: GenerationMode,
    pub seg: Option<f64>,
    pub tra: Option<f64>,
    pub fid: Option<f64>,
    pub fvd: Option<f64>,
    pub seconds: f64,
    pub denoiser_evaluations: u64,
    /// Set when generation or scoring failed.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub grid: AblationGrid,
    pub rows: Vec<AblationRow>,
}

/// Scores of one recording.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SceneScores {
    pub seg: f64,
    pub tra: f64,
    pub fid: Option<f64>,
    pub fvd: Option<f64>,
}

/// SEG and TRA of the reference segmenter and tracker against the
/// recording's own annotations, plus Fréchet distances to `reference`
/// frames when given.
pub fn score_recording(
    recording: &SceneRecording,
    reference: Option<&[ImagePlane]>,
    registry: &EmbedderRegistry,
) -> Result<SceneScores, MetricsError> {
    let segmented = segment_sequence(&recording.frames);
    let seg = seg_score(&recording.masks, &segmented)?;
    let (tracked, lineage) = link_by_overlap(&segmented);
    let gt = TrackingGraph::from_masks(recording.masks.clone(), &recording.lineage);
    let pred = TrackingGraph::from_masks(tracked, &lineage);
    let tra = tra_score(&gt, &pred, &AogmWeights::default())?;
    let mut scores = SceneScores {
        seg,
        tra,
        fid: None,
        fvd: None,
    };
    if let Some(real) = reference {
        let image = registry.get(IMAGE_EMBEDDER)?;
        scores.fid = Some(frechet_distance(
            &embed(real, image, "real")?,
            &embed(&recording.frames, image, "synthetic")?,
        )?);
        let video = registry.get(VIDEO_EMBEDDER)?;
        scores.fvd = match (embed(real, video, "real"), embed(&recording.frames, video, "synthetic")) {
            (Ok(a), Ok(b)) => Some(frechet_distance(&a, &b)?),
            (Err(MetricsError::TooFewEmbeddings(_) | MetricsError::TooFewFrames { .. }), _)
            | (_, Err(MetricsError::TooFewEmbeddings(_) | MetricsError::TooFewFrames { .. })) => None,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
    }
    Ok(scores)
}

/// Run every grid cell once. Failed cells are recorded and skipped.
pub fn run_ablation(
    models: &Models,
    generation: &GenerationConfig,
    scene: &SceneConfig,
    grid: &AblationGrid,
    reference: Option<&[ImagePlane]>,
    registry: &EmbedderRegistry,
) -> AblationReport {
    let mut rows = Vec::new();
    for (t_first, t_later) in grid.cells() {
        let mode = mode_for(t_first, t_later);
        let cfg = GenerationConfig {
            t_first,
            t_later,
            mode,
            ..generation.clone()
        };
        let start = Instant::now();
        let generated = generate_recording(models, &cfg, scene, 0);
        let seconds = start.elapsed().as_secs_f64();
        let mut row = AblationRow {
            t_first,
            t_later,
            mode,
            seg: None,
            tra: None,
            fid: None,
            fvd: None,
            seconds,
            denoiser_evaluations: 0,
            error: None,
        };
        match generated {
            Ok(g) => {
                row.denoiser_evaluations = g.denoiser_evaluations;
                match score_recording(&g.recording, reference, registry) {
                    Ok(s) => {
                        row.seg = Some(s.seg);
                        row.tra = Some(s.tra);
                        row.fid = s.fid;
                        row.fvd = s.fvd;
                    }
                    Err(e) => row.error = Some(format!("scoring: {e}")),
                }
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        if let Some(e) = &row.error {
            log::warn!("ablation cell ({t_first}, {t_later}) failed: {e}");
        } else {
            log::info!(
                "ablation cell ({t_first}, {t_later}): {} evaluations in {seconds:.2} s",
                row.denoiser_evaluations
            );
        }
        rows.push(row);
    }
    AblationReport {
        grid: grid.clone(),
        rows,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl AblationReport {
    pub fn row(&self, t_first: usize, t_later: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.t_first == t_first && r.t_later == t_later)
    }

    /// Later-frame steps held fixed (10 when swept, else the first value),
    /// one row per first-frame step count.
    pub fn first_frame_table(&self) -> (usize, Vec<&AblationRow>) {
        let fixed = pick(&self.grid.t_later, 10);
        let rows = self.grid.t_first.iter().filter_map(|&f| self.row(f, fixed)).collect();
        (fixed, rows)
    }

    /// First-frame steps held fixed (200 when swept, else the first value),
    /// one row per later-frame step count.
    pub fn later_frame_table(&self) -> (usize, Vec<&AblationRow>) {
        let fixed = pick(&self.grid.t_first, 200);
        let rows = self.grid.t_later.iter().filter_map(|&l| self.row(fixed, l)).collect();
        (fixed, rows)
    }

    /// Both slices followed by the full grid, as aligned text.
    pub fn format_text(&self) -> String {
        let mut out = String::new();
        let (fixed, rows) = self.first_frame_table();
        let _ = writeln!(out, "First-frame steps (later-frame steps = {fixed})");
        table(&mut out, "T_first", rows.iter().map(|r| (r.t_first, *r)));
        let (fixed, rows) = self.later_frame_table();
        let _ = writeln!(out, "\nLater-frame steps (first-frame steps = {fixed})");
        table(&mut out, "T_later", rows.iter().map(|r| (r.t_later, *r)));
        let _ = writeln!(out, "\nFull grid");
        let _ = writeln!(
            out,
            "{:>7} {:>7} {:>11} {:>8} {:>8} {:>10} {:>10} {:>9} {:>7}",
            "T_first", "T_later", "mode", "SEG", "TRA", "FID", "FVD", "time[s]", "evals"
        );
        for r in &self.rows {
            let mode = match r.mode {
                GenerationMode::Propagate => "propagate",
                GenerationMode::Independent => "independent",
            };
            let _ = write!(
                out,
                "{:>7} {:>7} {:>11} {:>8} {:>8} {:>10} {:>10} {:>9.2} {:>7}",
                r.t_first,
                r.t_later,
                mode,
                cell(r.seg),
                cell(r.tra),
                cell(r.fid),
                cell(r.fvd),
                r.seconds,
                r.denoiser_evaluations
            );
            if let Some(e) = &r.error {
                let _ = write!(out, "  FAILED: {e}");
            }
            out.push('\n');
        }
        out
    }
}

fn pick(values: &[usize], preferred: usize) -> usize {
    if values.contains(&preferred) {
        preferred
    } else {
        values.first().copied().unwrap_or(preferred)
    }
}

fn table<'a>(out: &mut String, key: &str, rows: impl Iterator<Item = (usize, &'a AblationRow)>) {
    let _ = writeln!(
        out,
        "{key:>7} {:>8} {:>8} {:>10} {:>10} {:>9} {:>7}",
        "SEG", "TRA", "FID", "FVD", "time[s]", "evals"
    );
    for (k, r) in rows {
        let _ = writeln!(
            out,
            "{k:>7} {:>8} {:>8} {:>10} {:>10} {:>9.2} {:>7}",
            cell(r.seg),
            cell(r.tra),
            cell(r.fid),
            cell(r.fvd),
            r.seconds,
            r.denoiser_evaluations
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_grid_has_twenty_distinct_cells() {
        let cells = AblationGrid::paper().cells();
        assert_eq!(cells.len(), 20);
        let unique: std::collections::BTreeSet<_> = cells.iter().collect();
        assert_eq!(unique.len(), 20);
    }

    #[test]
    fn mode_switches_at_equal_steps() {
        assert_eq!(mode_for(200, 10), GenerationMode::Propagate);
        assert_eq!(mode_for(200, 200), GenerationMode::Independent);
        assert_eq!(mode_for(100, 200), GenerationMode::Independent);
        assert_eq!(mode_for(400, 200), GenerationMode::Propagate);
    }

    #[test]
    fn slices_follow_the_fixed_values() {
        let grid = AblationGrid::paper();
        let rows = grid
            .cells()
            .into_iter()
            .map(|(f, l)| AblationRow {
                t_first: f,
                t_later: l,
                mode: mode_for(f, l),
                seg: None,
                tra: None,
                fid: None,
                fvd: None,
                seconds: 0.0,
                denoiser_evaluations: 0,
                error: None,
            })
            .collect();
        let report = AblationReport { grid, rows };
        let (fixed, a) = report.first_frame_table();
        assert_eq!(fixed, 10);
        assert_eq!(a.iter().map(|r| r.t_first).collect::<Vec<_>>(), [100, 200, 400, 600]);
        let (fixed, b) = report.later_frame_table();
        assert_eq!(fixed, 200);
        assert_eq!(b.iter().map(|r| r.t_later).collect::<Vec<_>>(), [0, 10, 30, 50, 200]);
        assert!(report.format_text().contains("Full grid"));
    }
}
