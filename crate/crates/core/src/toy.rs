//! Procedural stand-ins for real microscopy data: textured blob crops,
//! translating squares and small CTC-layout sequences of moving cells.
//! Used by tests, the acceptance suite and the `make-toy-data` command.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{save_denoiser, save_flow};
use crate::config::TrainingConfig;
use crate::dataset::{write_sequence, DatasetError, LineageRow};
use crate::diffusion::ScheduleSpec;
use crate::pipeline::{fit_shape_model, load_training_data, train_denoiser, train_flow, Models, PipelineError, TrainingData};
use crate::normalize::IntensityNormalization;
use crate::raster::{ImagePlane, LabelMask, ValueDomain};
use crate::synthesis::{Placement, SceneRecording};

pub const TOY_BACKGROUND: f64 = -0.7;
pub const TOY_NOISE: f64 = 0.03;

/// Ellipse with a smooth sinusoidal texture.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    level: f64,
    phase: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, cx: f64, cy: f64, scale: f64) -> Self {
        Self {
            cx,
            cy,
            rx: scale * rng.random_range(0.8..1.2),
            ry: scale * rng.random_range(0.6..1.0),
            angle: rng.random_range(0.0..TAU),
            level: rng.random_range(0.2..0.6),
            phase: rng.random_range(0.0..TAU),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    fn texture(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        self.level + 0.12 * (0.7 * dx + self.phase).sin() * (0.6 * dy - self.phase).cos()
    }

    fn draw(&self, image: &mut ImagePlane, mask: &mut LabelMask, label: u16) {
        let (w, h) = image.size();
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64, y as f64);
                if self.contains(fx, fy) {
                    image.set(x, y, self.texture(fx, fy));
                    mask.set(x, y, label);
                }
            }
        }
    }
}

fn noisy_background(w: usize, h: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
    let noise = Normal::new(0.0, TOY_NOISE).expect("finite std");
    let data = (0..w * h).map(|_| TOY_BACKGROUND + noise.sample(rng)).collect();
    ImagePlane::new(w, h, ValueDomain::Normalized, data).expect("buffer size")
}

/// Centred textured blobs on a noisy background, normalized domain, with
/// their binary masks.
pub fn blob_samples(count: usize, size: usize, seed: u64) -> Vec<(ImagePlane, LabelMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut image = noisy_background(size, size, &mut rng);
            let mut mask = LabelMask::empty(size, size);
            let c = (size / 2) as f64;
            let blob = Blob::random(&mut rng, c, c, size as f64 * 0.25);
            blob.draw(&mut image, &mut mask, 1);
            (image, mask)
        })
        .collect()
}

/// Normalized blob crops only.
pub fn blob_crops(count: usize, size: usize, seed: u64) -> Vec<ImagePlane> {
    blob_samples(count, size, seed).into_iter().map(|(i, _)| i).collect()
}

/// Pairs of a `side`×`side` square and the same square moved `shift`
/// pixels along x.
pub fn translating_squares(count: usize, size: usize, side: usize, shift: usize, seed: u64) -> Vec<(LabelMask, LabelMask)> {
    assert!(side + shift + 2 < size, "square and shift must fit");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x0 = rng.random_range(1..size - side - shift - 1);
            let y0 = rng.random_range(1..size - side - 1);
            let mut a = LabelMask::empty(size, size);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    a.set(x, y, 1);
                }
            }
            let b = a.shifted(shift as isize, 0);
            (a, b)
        })
        .collect()
}

/// Geometry of a toy sequence.
#[derive(Clone, Copy, Debug)]
pub struct ToySequence {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub cells: usize,
    /// Approximate cell radius in pixels.
    pub cell_radius: f64,
    pub seed: u64,
}

impl Default for ToySequence {
    fn default() -> Self {
        Self {
            frames: 6,
            width: 96,
            height: 64,
            cells: 4,
            cell_radius: 6.0,
            seed: 0,
        }
    }
}

/// Raw-count scaling of toy sequences.
pub fn toy_normalization() -> IntensityNormalization {
    IntensityNormalization {
        low: 500.0,
        high: 4500.0,
        low_percentile: 0.1,
        high_percentile: 99.9,
    }
}

/// Render a sequence of slowly moving, slowly deforming textured cells
/// laid out on a grid so that they never touch.
pub fn toy_recording(spec: &ToySequence) -> SceneRecording {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cols = ((spec.cells as f64).sqrt().ceil() as usize).max(1);
    let rows = spec.cells.div_ceil(cols);
    let cell_w = spec.width as f64 / cols as f64;
    let cell_h = spec.height as f64 / rows as f64;
    let blobs: Vec<Blob> = (0..spec.cells)
        .map(|i| {
            let cx = (i % cols) as f64 * cell_w + cell_w / 2.0;
            let cy = (i / cols) as f64 * cell_h + cell_h / 2.0;
            Blob::random(&mut rng, cx, cy, spec.cell_radius)
        })
        .collect();
    let velocities: Vec<(f64, f64)> = (0..spec.cells)
        .map(|_| (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)))
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut placements = vec![Vec::with_capacity(spec.frames); spec.cells];
    for f in 0..spec.frames {
        let mut image = noisy_background(spec.width, spec.height, &mut rng);
        let mut mask = LabelMask::empty(spec.width, spec.height);
        for (i, (blob, v)) in blobs.iter().zip(&velocities).enumerate() {
            let t = f as f64;
            let b = Blob {
                cx: blob.cx + v.0 * t,
                cy: blob.cy + v.1 * t,
                rx: blob.rx * (1.0 + 0.05 * (0.5 * t + i as f64).sin()),
                angle: blob.angle + 0.02 * t,
                ..*blob
            };
            b.draw(&mut image, &mut mask, (i + 1) as u16);
            placements[i].push(Placement {
                x: b.cx,
                y: b.cy,
                angle: b.angle,
            });
        }
        frames.push(image);
        masks.push(mask);
    }
    let lineage = (0..spec.cells)
        .map(|i| LineageRow {
            label: (i + 1) as u16,
            begin: 0,
            end: spec.frames - 1,
            parent: 0,
        })
        .collect();
    SceneRecording {
        frames,
        masks,
        lineage,
        placements,
        normalization: toy_normalization(),
    }
}

/// Write a toy sequence as `<root>/01` plus annotations.
pub fn write_toy_dataset(root: &Path, spec: &ToySequence) -> Result<PathBuf, DatasetError> {
    write_sequence(&toy_recording(spec), root, "01")
}

/// Sequence the toy models are trained on.
pub fn toy_training_sequence(seed: u64) -> ToySequence {
    ToySequence {
        frames: 10,
        width: 128,
        height: 96,
        cells: 6,
        cell_radius: 6.0,
        seed,
    }
}

/// Small networks on 32×32 crops, trained in about a minute on one core.
pub fn toy_training_config(seed: u64) -> TrainingConfig {
    TrainingConfig {
        data: None,
        crop_size: 32,
        seed,
        ddpm_iters: 200,
        ddpm_batch: 8,
        ddpm_lr: 1e-3,
        ddpm_base_width: 8,
        ddpm_levels: 3,
        fpm_iters: 200,
        fpm_batch: 8,
        fpm_lr: 1e-3,
        fpm_base_width: 8,
        fpm_levels: 3,
        ..TrainingConfig::default()
    }
}

/// Write a toy dataset under `root`, fit the shape model and train both
/// networks on it.
pub fn toy_models(root: &Path, seed: u64) -> Result<(Models, TrainingData), PipelineError> {
    let dataset = write_toy_dataset(root, &toy_training_sequence(seed))?;
    let training = toy_training_config(seed);
    let data = load_training_data(&dataset, training.crop_size)?;
    let shape = fit_shape_model(&data)?;
    let (denoiser, denoiser_meta, _) = train_denoiser(&data, &training, ScheduleSpec::default())?;
    let (flow, flow_meta, _) = train_flow(&data, &training)?;
    Ok((Models::new(shape, denoiser, denoiser_meta, flow, flow_meta)?, data))
}

/// Same as [`toy_models`], also saving `ddpm.ckpt`, `fpm.ckpt` and
/// `shape_model.json` under `root` and loading them back so the returned
/// models carry file hashes.
pub fn toy_checkpoints(root: &Path, seed: u64) -> Result<Models, PipelineError> {
    let (models, _) = toy_models(&root.join("data"), seed)?;
    let (ddpm, fpm, shape) = (root.join("ddpm.ckpt"), root.join("fpm.ckpt"), root.join("shape_model.json"));
    save_denoiser(&ddpm, &models.denoiser, &models.denoiser_meta)?;
    save_flow(&fpm, &models.flow, &models.flow_meta)?;
    models.shape.save(&shape)?;
    Models::load(&ddpm, &fpm, &shape)
}
