//! Per-cell video generation and multi-cell scene composition.
//!
//! The first frame of a cell comes from a heavily noised rendering of its
//! mask pushed back through the denoiser. Every later frame reuses the
//! previous texture: it is warped onto the next mask with the predicted
//! flow and then lightly re-noised and denoised to restore detail.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{validate_annotations, DatasetError, LineageRow};
use crate::diffusion::{
    guided_generate, refine, CountingPredictor, DiffusionError, GuidanceImage, NoiseMode, NoisePredictor,
    NoiseSchedule,
};
use crate::flow::{predict_flow, warp, FlowError, FlowNetwork};
use crate::normalize::IntensityNormalization;
use crate::raster::{FlowField, ImagePlane, LabelMask, ValueDomain};
use crate::seed::derive_seed;
use crate::shape::{render_mask, ShapeError, ShapeModel, ShapeTrajectory};

pub const DEFAULT_T_FIRST: usize = 200;
pub const DEFAULT_T_LATER: usize = 10;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
    #[error("invalid step counts: {0}")]
    Steps(String),
    #[error("shape stage: {0}")]
    Shape(#[from] ShapeError),
    #[error("diffusion stage: {0}")]
    Diffusion(#[from] DiffusionError),
    #[error("flow stage: {0}")]
    Flow(#[from] FlowError),
    #[error("could not place cell {cell} after {attempts} attempts")]
    PlacementFailure { cell: usize, attempts: usize },
    #[error("nothing to compose")]
    NoCells,
    #[error("video {index} is inconsistent: {reason}")]
    BadVideo { index: usize, reason: String },
}

/// How frames after the first are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationMode {
    /// Warp the previous frame along the predicted flow, then refine.
    #[default]
    Propagate,
    /// Generate each frame from its own mask, ignoring the previous frame.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSettings {
    /// Steps used for the first frame.
    pub t_first: usize,
    /// Steps used for every later frame; `0` passes warped frames through.
    pub t_later: usize,
    pub mode: GenerationMode,
    pub seed: u64,
}

impl VideoSettings {
    pub fn new(t_first: usize, t_later: usize, seed: u64) -> Self {
        Self {
            t_first,
            t_later,
            mode: GenerationMode::Propagate,
            seed,
        }
    }

    pub fn check(&self, schedule: &NoiseSchedule) -> Result<(), SynthesisError> {
        let t = schedule.steps();
        let first_ok = self.t_first >= 1 && self.t_first <= t;
        let ok = match self.mode {
            GenerationMode::Propagate => first_ok && self.t_later <= self.t_first,
            GenerationMode::Independent => first_ok && self.t_later >= 1 && self.t_later <= t,
        };
        if !ok {
            let rule = match self.mode {
                GenerationMode::Propagate => format!("0 <= t_later <= t_first <= {t}"),
                GenerationMode::Independent => format!("1 <= t_first, t_later <= {t}"),
            };
            return Err(SynthesisError::Steps(format!(
                "need {rule}, got t_first = {}, t_later = {}",
                self.t_first, self.t_later
            )));
        }
        Ok(())
    }
}

/// Provenance of one generated cell video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub t_first: usize,
    pub t_later: usize,
    pub mode: GenerationMode,
    pub seed: u64,
    pub denoiser_evaluations: usize,
    pub checkpoint_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellVideo {
    pub frames: Vec<ImagePlane>,
    pub masks: Vec<LabelMask>,
    /// `flows[f]` aligns mask `f` to mask `f + 1`.
    pub flows: Vec<FlowField>,
    pub brightness: Vec<f64>,
    pub manifest: VideoManifest,
}

impl CellVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Mean absolute difference between each frame and the previous frame
    /// warped onto it.
    pub fn propagation_residual(&self) -> f64 {
        if self.frames.len() < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for (f, flow) in self.flows.iter().enumerate() {
            let moved = warp(&self.frames[f], flow).expect("congruent frames");
            total += mean_abs_diff(&self.frames[f + 1], &moved);
        }
        total / self.flows.len() as f64
    }
}

fn mean_abs_diff(a: &ImagePlane, b: &ImagePlane) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64
}

/// The trained pieces a cell video is generated from.
pub struct Generator<'a> {
    pub shape: &'a ShapeModel,
    pub denoiser: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
    pub flow: &'a FlowNetwork,
    /// Side length of the square cell crops.
    pub crop_size: usize,
    /// Identifiers of the loaded checkpoints, echoed into manifests.
    pub checkpoint_ids: Vec<String>,
}

impl Generator<'_> {
    fn check_compatible(&self) -> Result<(), SynthesisError> {
        let s = self.crop_size;
        if !self.denoiser.accepts(s, s) {
            return Err(SynthesisError::Incompatible(format!(
                "denoiser cannot process {s}x{s} crops"
            )));
        }
        if !self.flow.accepts(s, s) {
            return Err(SynthesisError::Incompatible(format!(
                "flow network cannot process {s}x{s} crops"
            )));
        }
        Ok(())
    }

    /// Generate `F + 1` frames for one shape trajectory. The denoiser is
    /// called exactly `t_first + F·t_later` times.
    pub fn generate_cell_video(
        &self,
        trajectory: &ShapeTrajectory,
        settings: &VideoSettings,
    ) -> Result<CellVideo, SynthesisError> {
        settings.check(self.schedule)?;
        self.check_compatible()?;
        if trajectory.is_empty() {
            return Err(SynthesisError::Steps("trajectory has no frames".into()));
        }
        let masks = trajectory
            .params
            .iter()
            .map(|b| render_mask(self.shape, b, self.crop_size))
            .collect::<Result<Vec<_>, _>>()?;
        let counter = CountingPredictor::new(self.denoiser);
        let background = self.shape.background_mean.clamp(-1.0, 1.0);
        let noise = |f: usize| NoiseMode::Stochastic(derive_seed(settings.seed, "frame", f as u64));

        let first = GuidanceImage::new(&masks[0], trajectory.brightness[0], background)?;
        let mut frames = vec![guided_generate(&first, settings.t_first, &counter, self.schedule, noise(0))?];
        let mut flows = Vec::with_capacity(masks.len().saturating_sub(1));
        for f in 0..masks.len() - 1 {
            let flow = predict_flow(self.flow, &masks[f], &masks[f + 1])?;
            let next = match settings.mode {
                GenerationMode::Propagate => {
                    let moved = warp(&frames[f], &flow)?;
                    if settings.t_later == 0 {
                        moved
                    } else {
                        refine(&moved, settings.t_later, &counter, self.schedule, noise(f + 1))?
                    }
                }
                GenerationMode::Independent => {
                    let g = GuidanceImage::new(&masks[f + 1], trajectory.brightness[f + 1], background)?;
                    guided_generate(&g, settings.t_later, &counter, self.schedule, noise(f + 1))?
                }
            };
            frames.push(next);
            flows.push(flow);
        }
        Ok(CellVideo {
            frames,
            masks,
            flows,
            brightness: trajectory.brightness.clone(),
            manifest: VideoManifest {
                t_first: settings.t_first,
                t_later: settings.t_later,
                mode: settings.mode,
                seed: settings.seed,
                denoiser_evaluations: counter.calls(),
                checkpoint_ids: self.checkpoint_ids.clone(),
            },
        })
    }
}

/// Random-walk motion and placement policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    /// Per-frame translation standard deviation in pixels.
    pub translation_std: f64,
    /// Per-frame rotation standard deviation in degrees.
    pub rotation_std_deg: f64,
    /// Permit overlapping cells; later cells are drawn on top.
    pub allow_overlap: bool,
    /// Placement attempts per cell before giving up.
    pub max_attempts: usize,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            translation_std: 2.0,
            rotation_std_deg: 1.0,
            allow_overlap: false,
            max_attempts: 500,
        }
    }
}

/// Pose of a cell crop's centre in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub x: f64,
    pub y: f64,
    /// Radians, counter-clockwise in image coordinates.
    pub angle: f64,
}

/// Background level and per-pixel noise of the scene, normalized domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecording {
    pub frames: Vec<ImagePlane>,
    pub masks: Vec<LabelMask>,
    pub lineage: Vec<LineageRow>,
    /// `placements[cell][frame]`.
    pub placements: Vec<Vec<Placement>>,
    /// Maps the normalized frames back to raw intensities on export.
    pub normalization: IntensityNormalization,
}

impl SceneRecording {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.frames.len() != self.masks.len() || self.frames.is_empty() {
            return Err(DatasetError::Inconsistent(format!(
                "{} frames but {} masks",
                self.frames.len(),
                self.masks.len()
            )));
        }
        let (w, h) = self.frames[0].size();
        for (f, (img, mask)) in self.frames.iter().zip(&self.masks).enumerate() {
            if img.size() != (w, h) || mask.size() != (w, h) {
                return Err(DatasetError::Inconsistent(format!(
                    "frame {f} is not {w}x{h}"
                )));
            }
        }
        let labels: Vec<BTreeSet<u16>> = self.masks.iter().map(LabelMask::labels).collect();
        validate_annotations(&labels, &self.lineage)
    }

    pub fn labels_per_frame(&self) -> Vec<BTreeSet<u16>> {
        self.masks.iter().map(LabelMask::labels).collect()
    }
}

fn bilinear(data: &[f64], w: usize, h: usize, x: f64, y: f64, outside: f64) -> f64 {
    if x < -1.0 || y < -1.0 || x > w as f64 || y > h as f64 {
        return outside;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let (ax, ay) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            outside
        } else {
            data[yi as usize * w + xi as usize]
        }
    };
    (1.0 - ax) * (1.0 - ay) * at(x0, y0)
        + ax * (1.0 - ay) * at(x0 + 1.0, y0)
        + (1.0 - ax) * ay * at(x0, y0 + 1.0)
        + ax * ay * at(x0 + 1.0, y0 + 1.0)
}

/// Largest distance from the crop centre to a foreground pixel over all frames.
fn footprint_radius(video: &CellVideo) -> f64 {
    let mut r: f64 = 0.0;
    for mask in &video.masks {
        let (w, h) = mask.size();
        let (cx, cy) = ((w / 2) as f64, (h / 2) as f64);
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) != 0 {
                    r = r.max((x as f64 - cx).hypot(y as f64 - cy));
                }
            }
        }
    }
    r + 1.5
}

/// Place every video in a `height`×`width` scene with random position,
/// orientation and random-walk motion, and composite textures over a noisy
/// background. Cell `i` gets label `i + 1`.
pub fn compose_scene(
    videos: &[CellVideo],
    height: usize,
    width: usize,
    motion: &MotionParams,
    background: Background,
    normalization: IntensityNormalization,
    seed: u64,
) -> Result<SceneRecording, SynthesisError> {
    let Some(first) = videos.first() else {
        return Err(SynthesisError::NoCells);
    };
    let frames = first.len();
    for (index, v) in videos.iter().enumerate() {
        if v.len() != frames || v.masks.len() != frames || v.is_empty() {
            return Err(SynthesisError::BadVideo {
                index,
                reason: format!("expected {frames} frames and masks"),
            });
        }
        if u16::try_from(index + 1).is_err() {
            return Err(SynthesisError::BadVideo {
                index,
                reason: "too many cells for 16-bit labels".into(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = Normal::new(0.0, motion.translation_std.max(0.0)).expect("finite std");
    let turn = Normal::new(0.0, motion.rotation_std_deg.max(0.0).to_radians()).expect("finite std");

    let mut placements: Vec<Vec<Placement>> = Vec::with_capacity(videos.len());
    let mut radii = Vec::with_capacity(videos.len());
    for (cell, video) in videos.iter().enumerate() {
        let r = footprint_radius(video);
        let lo_x = r;
        let hi_x = width as f64 - 1.0 - r;
        let lo_y = r;
        let hi_y = height as f64 - 1.0 - r;
        let mut accepted = None;
        for _ in 0..motion.max_attempts {
            if hi_x < lo_x || hi_y < lo_y {
                break;
            }
            let mut p = Placement {
                x: rng.random_range(lo_x..=hi_x),
                y: rng.random_range(lo_y..=hi_y),
                angle: rng.random_range(0.0..std::f64::consts::TAU),
            };
            let mut path = vec![p];
            for _ in 1..frames {
                p.x += step.sample(&mut rng);
                p.y += step.sample(&mut rng);
                p.angle += turn.sample(&mut rng);
                path.push(p);
            }
            let inside = path
                .iter()
                .all(|q| q.x >= lo_x && q.x <= hi_x && q.y >= lo_y && q.y <= hi_y);
            let clear = motion.allow_overlap
                || placements.iter().zip(&radii).all(|(other, &ro): (&Vec<Placement>, &f64)| {
                    path.iter().zip(other).all(|(a, b)| {
                        (a.x - b.x).abs() > r + ro || (a.y - b.y).abs() > r + ro
                    })
                });
            if inside && clear {
                accepted = Some(path);
                break;
            }
        }
        let Some(path) = accepted else {
            return Err(SynthesisError::PlacementFailure {
                cell,
                attempts: motion.max_attempts,
            });
        };
        placements.push(path);
        radii.push(r);
    }

    let noise = Normal::new(0.0, background.std.max(0.0)).expect("finite std");
    let mut out_frames = Vec::with_capacity(frames);
    let mut out_masks = Vec::with_capacity(frames);
    for f in 0..frames {
        let data: Vec<f64> = (0..width * height)
            .map(|_| background.mean + noise.sample(&mut rng))
            .collect();
        let mut image = ImagePlane::new(width, height, ValueDomain::Normalized, data).expect("scene buffer");
        let mut mask = LabelMask::empty(width, height);
        for (cell, video) in videos.iter().enumerate() {
            let p = placements[cell][f];
            composite(&mut image, &mut mask, &video.frames[f], &video.masks[f], p, radii[cell], (cell + 1) as u16);
        }
        out_frames.push(image);
        out_masks.push(mask);
    }

    let last = frames - 1;
    let lineage = (0..videos.len())
        .map(|i| LineageRow {
            label: (i + 1) as u16,
            begin: 0,
            end: last,
            parent: 0,
        })
        .collect();
    Ok(SceneRecording {
        frames: out_frames,
        masks: out_masks,
        lineage,
        placements,
        normalization,
    })
}

/// Draw one rotated crop centred at `p`. The bilinearly resampled binary
/// mask is the alpha channel, which softens the edge over about a pixel.
fn composite(
    image: &mut ImagePlane,
    mask: &mut LabelMask,
    texture: &ImagePlane,
    cell_mask: &LabelMask,
    p: Placement,
    radius: f64,
    label: u16,
) {
    let (cw, ch) = cell_mask.size();
    let (ccx, ccy) = ((cw / 2) as f64, (ch / 2) as f64);
    let alpha_src: Vec<f64> = cell_mask.data().iter().map(|&l| f64::from(u8::from(l != 0))).collect();
    let (sin, cos) = p.angle.sin_cos();
    let (w, h) = image.size();
    let x_lo = (p.x - radius - 1.0).floor().max(0.0) as usize;
    let x_hi = ((p.x + radius + 1.0).ceil() as usize).min(w - 1);
    let y_lo = (p.y - radius - 1.0).floor().max(0.0) as usize;
    let y_hi = ((p.y + radius + 1.0).ceil() as usize).min(h - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (dx, dy) = (x as f64 - p.x, y as f64 - p.y);
            // inverse rotation into crop coordinates
            let u = cos * dx + sin * dy + ccx;
            let v = -sin * dx + cos * dy + ccy;
            let alpha = bilinear(&alpha_src, cw, ch, u, v, 0.0);
            if alpha <= 0.0 {
                continue;
            }
            let tex = bilinear(texture.data(), cw, ch, u, v, image.get(x, y));
            let blended = alpha * tex + (1.0 - alpha) * image.get(x, y);
            image.set(x, y, blended);
            if alpha >= 0.5 {
                mask.set(x, y, label);
            }
        }
    }
}
