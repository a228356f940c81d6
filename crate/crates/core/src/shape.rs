//! Statistical shape-and-brightness model of single cells.
//!
//! Cells are described by their star-convex contour: the radial extent of
//! the mask along `K` equally spaced rays from the centroid. Principal
//! component analysis of these radial profiles gives a low-dimensional
//! shape space; smooth paths through that space yield mask sequences whose
//! consecutive frames stay morphologically consistent.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{ImagePlane, LabelMask};

pub const DEFAULT_RAYS: usize = 64;
pub const DEFAULT_ANCHOR_SPACING: usize = 8;
pub const DEFAULT_SMOOTHNESS: f64 = 3.0;
/// Fraction of variance the sampling modes must explain.
pub const RETAINED_VARIANCE: f64 = 0.95;
/// Shape parameters are clamped to this many standard deviations.
pub const CLAMP_SIGMAS: f64 = 3.0;

const MODEL_FORMAT: &str = "cellsynth-shape-model";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("need at least 2 descriptors, got {0}")]
    TooFewSamples(usize),
    #[error("descriptor {index} has {found} rays, expected {expected}")]
    RayCountMismatch {
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error("all descriptors are identical; the shape space has zero variance")]
    Degenerate,
    #[error("mask has no foreground")]
    EmptyMask,
    #[error("parameter vector has {found} entries, model has {expected} modes")]
    ParameterCount { found: usize, expected: usize },
    #[error("cannot render: {0}")]
    Render(String),
    #[error("shape model file {path}: {message}")]
    Archive { path: String, message: String },
}

/// Radial profile plus photometric summary of one observed cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourDescriptor {
    /// Distance from the centroid to the contour along ray `k` at angle
    /// `2πk/K`, in pixels.
    pub radii: Vec<f64>,
    pub area: f64,
    /// Mean normalized intensity inside the mask.
    pub brightness: f64,
    /// Mean and standard deviation of normalized intensity outside the mask.
    pub background_mean: f64,
    pub background_std: f64,
}

impl ContourDescriptor {
    /// Measure the largest foreground component of `mask`. Photometric
    /// fields come from `image` (normalized domain) when given, else 0.
    pub fn from_mask(mask: &LabelMask, image: Option<&ImagePlane>, rays: usize) -> Result<Self, ShapeError> {
        let binary = mask.map_labels(|l| u16::from(l != 0));
        let comp = binary
            .components(1)
            .into_iter()
            .next()
            .ok_or(ShapeError::EmptyMask)?;
        let w = mask.width();
        let mut inside = vec![false; mask.data().len()];
        let (mut sx, mut sy) = (0.0, 0.0);
        for &p in &comp {
            inside[p] = true;
            sx += (p % w) as f64;
            sy += (p / w) as f64;
        }
        let n = comp.len() as f64;
        let centroid = (sx / n, sy / n);
        let radii = radial_profile(&inside, w, mask.height(), centroid, rays);

        let (mut brightness, mut bg_mean, mut bg_std) = (0.0, 0.0, 0.0);
        if let Some(img) = image {
            let (mut fg_sum, mut bg_sum, mut bg_sq, mut bg_n) = (0.0, 0.0, 0.0, 0usize);
            for (i, &v) in img.data().iter().enumerate() {
                if inside[i] {
                    fg_sum += v;
                } else {
                    bg_sum += v;
                    bg_sq += v * v;
                    bg_n += 1;
                }
            }
            brightness = fg_sum / n;
            if bg_n > 0 {
                bg_mean = bg_sum / bg_n as f64;
                bg_std = (bg_sq / bg_n as f64 - bg_mean * bg_mean).max(0.0).sqrt();
            }
        }
        Ok(Self {
            radii,
            area: n,
            brightness,
            background_mean: bg_mean,
            background_std: bg_std,
        })
    }
}

/// Radial maximum of the foreground along each ray, measured to the
/// crossing between the last foreground and the first background sample.
fn radial_profile(inside: &[bool], w: usize, h: usize, c: (f64, f64), rays: usize) -> Vec<f64> {
    const STEP: f64 = 0.05;
    let limit = ((w * w + h * h) as f64).sqrt();
    (0..rays)
        .map(|k| {
            let a = TAU * k as f64 / rays as f64;
            let (dx, dy) = (a.cos(), a.sin());
            let mut last = 0.0;
            let mut s = 0.0;
            while s <= limit {
                let (x, y) = ((c.0 + s * dx).round(), (c.1 + s * dy).round());
                if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                    if inside[y as usize * w + x as usize] {
                        last = s;
                    }
                }
                s += STEP;
            }
            last + STEP / 2.0
        })
        .collect()
}

/// Mean radial profile with principal variation modes and photometric
/// statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeModel {
    pub rays: usize,
    pub mean: Vec<f64>,
    /// Unit-length modes, ordered by decreasing standard deviation.
    pub modes: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    /// Fraction of total variance explained by each mode.
    pub explained: Vec<f64>,
    /// Number of leading modes used for sampling.
    pub retained: usize,
    pub mean_area: f64,
    pub brightness_mean: f64,
    pub brightness_std: f64,
    pub background_mean: f64,
    pub background_std: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: ShapeModel,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

impl ShapeModel {
    /// Principal component analysis of the radial profiles. Every mode
    /// with non-zero variance is kept so training profiles reconstruct
    /// exactly; sampling uses the leading modes that explain
    /// [`RETAINED_VARIANCE`] of the variance.
    pub fn fit(descriptors: &[ContourDescriptor]) -> Result<Self, ShapeError> {
        if descriptors.len() < 2 {
            return Err(ShapeError::TooFewSamples(descriptors.len()));
        }
        let k = descriptors[0].radii.len();
        for (index, d) in descriptors.iter().enumerate() {
            if d.radii.len() != k || k == 0 {
                return Err(ShapeError::RayCountMismatch {
                    index,
                    found: d.radii.len(),
                    expected: k,
                });
            }
        }
        let n = descriptors.len();
        let mut mean = vec![0.0; k];
        for d in descriptors {
            for (m, r) in mean.iter_mut().zip(&d.radii) {
                *m += r / n as f64;
            }
        }
        let centered = DMatrix::from_fn(n, k, |i, j| descriptors[i].radii[j] - mean[j]);
        let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let scale = descriptors
            .iter()
            .flat_map(|d| d.radii.iter())
            .fold(0.0f64, |m, r| m.max(r.abs()))
            .max(1.0);
        let tol = 1e-12 * scale * scale * k as f64;
        if total <= tol {
            return Err(ShapeError::Degenerate);
        }

        let mut modes = Vec::new();
        let mut sigmas = Vec::new();
        let mut explained = Vec::new();
        for &j in &order {
            let lambda = eig.eigenvalues[j];
            if lambda <= tol || modes.len() >= n - 1 {
                break;
            }
            let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            modes.push(v);
            sigmas.push(lambda.sqrt());
            explained.push(lambda / total);
        }
        let mut retained = 0;
        let mut acc = 0.0;
        while retained < explained.len() {
            acc += explained[retained];
            retained += 1;
            if acc >= RETAINED_VARIANCE {
                break;
            }
        }

        let (brightness_mean, brightness_std) = mean_std(descriptors.iter().map(|d| d.brightness));
        let background_mean = descriptors.iter().map(|d| d.background_mean).sum::<f64>() / n as f64;
        let background_std =
            (descriptors.iter().map(|d| d.background_std.powi(2)).sum::<f64>() / n as f64).sqrt();
        Ok(Self {
            rays: k,
            mean,
            modes,
            sigmas,
            explained,
            retained,
            mean_area: descriptors.iter().map(|d| d.area).sum::<f64>() / n as f64,
            brightness_mean,
            brightness_std,
            background_mean,
            background_std,
        })
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    /// Radii implied by parameter vector `b`.
    pub fn reconstruct(&self, b: &[f64]) -> Result<Vec<f64>, ShapeError> {
        if b.len() != self.modes.len() {
            return Err(ShapeError::ParameterCount {
                found: b.len(),
                expected: self.modes.len(),
            });
        }
        let mut radii = self.mean.clone();
        for (mode, &coef) in self.modes.iter().zip(b) {
            for (r, m) in radii.iter_mut().zip(mode) {
                *r += coef * m;
            }
        }
        Ok(radii)
    }

    /// Coordinates of `radii` in the mode basis.
    pub fn project(&self, radii: &[f64]) -> Vec<f64> {
        self.modes
            .iter()
            .map(|mode| {
                mode.iter()
                    .zip(radii.iter().zip(&self.mean))
                    .map(|(m, (r, mu))| m * (r - mu))
                    .sum()
            })
            .collect()
    }

    /// Clamp every parameter to ±[`CLAMP_SIGMAS`] standard deviations.
    pub fn clamp(&self, b: &mut [f64]) {
        for (v, s) in b.iter_mut().zip(&self.sigmas) {
            let lim = CLAMP_SIGMAS * s;
            *v = v.clamp(-lim, lim);
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ShapeError> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| archive_err(path, e))?;
        fs::write(path, text).map_err(|e| archive_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ShapeError> {
        let text = fs::read_to_string(path).map_err(|e| archive_err(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| archive_err(path, e))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(archive_err(
                path,
                format!("unsupported format {} v{}", file.format, file.version),
            ));
        }
        Ok(file.model)
    }
}

fn archive_err(path: &Path, e: impl std::fmt::Display) -> ShapeError {
    ShapeError::Archive {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Latent path behind a synthetic mask sequence of `F + 1` frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeTrajectory {
    pub params: Vec<Vec<f64>>,
    /// Centroid offset within the crop per frame. Always zero here: scene
    /// motion is added at composition time.
    pub offsets: Vec<(f64, f64)>,
    pub brightness: Vec<f64>,
}

impl ShapeTrajectory {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

pub fn sample_trajectory(model: &ShapeModel, frames: usize, smoothness: f64, seed: u64) -> ShapeTrajectory {
    sample_trajectory_with(model, frames, smoothness, DEFAULT_ANCHOR_SPACING, seed)
}

/// Sample anchors every `anchor_spacing` frames, hold each until the next
/// anchor, and smooth the resulting step signal with a Gaussian kernel of
/// bandwidth `smoothness` frames (weights renormalized at the sequence
/// ends). Brightness is drawn per anchor and interpolated linearly.
pub fn sample_trajectory_with(
    model: &ShapeModel,
    frames: usize,
    smoothness: f64,
    anchor_spacing: usize,
    seed: u64,
) -> ShapeTrajectory {
    assert!(smoothness > 0.0, "smoothness must be positive");
    let spacing = anchor_spacing.max(1);
    let len = frames + 1;
    let anchors = frames.div_ceil(spacing) + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let m = model.mode_count();

    let anchor_params: Vec<Vec<f64>> = (0..anchors)
        .map(|_| {
            (0..m)
                .map(|i| {
                    let z: f64 = std_normal.sample(&mut rng);
                    if i < model.retained {
                        z * model.sigmas[i]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let anchor_brightness: Vec<f64> = (0..anchors)
        .map(|_| {
            let z: f64 = std_normal.sample(&mut rng);
            (model.brightness_mean + z * model.brightness_std).clamp(-1.0, 1.0)
        })
        .collect();

    let step: Vec<&Vec<f64>> = (0..len).map(|f| &anchor_params[f / spacing]).collect();
    let mut params = Vec::with_capacity(len);
    for f in 0..len {
        let mut acc = vec![0.0; m];
        let mut total = 0.0;
        for (g, signal) in step.iter().enumerate() {
            let d = f as f64 - g as f64;
            let wgt = (-d * d / (2.0 * smoothness * smoothness)).exp();
            total += wgt;
            for (a, s) in acc.iter_mut().zip(signal.iter()) {
                *a += wgt * s;
            }
        }
        acc.iter_mut().for_each(|a| *a /= total);
        model.clamp(&mut acc);
        params.push(acc);
    }

    let brightness = (0..len)
        .map(|f| {
            let j = f / spacing;
            let frac = (f % spacing) as f64 / spacing as f64;
            let next = anchor_brightness[(j + 1).min(anchors - 1)];
            anchor_brightness[j] * (1.0 - frac) + next * frac
        })
        .collect();

    ShapeTrajectory {
        params,
        offsets: vec![(0.0, 0.0); len],
        brightness,
    }
}

/// Rasterize the contour implied by `b` into a `size`×`size` binary mask
/// with the shape's centroid at the raster centre.
pub fn render_mask(model: &ShapeModel, b: &[f64], size: usize) -> Result<LabelMask, ShapeError> {
    let radii = model.reconstruct(b)?;
    render_radii(&radii, size)
}

/// Rasterize a star polygon by testing pixel centres, then translate by
/// whole pixels so the mask centroid lies within half a pixel of
/// `size / 2` on both axes.
pub fn render_radii(radii: &[f64], size: usize) -> Result<LabelMask, ShapeError> {
    if let Some(r) = radii.iter().find(|r| !(**r > 0.0)) {
        return Err(ShapeError::Render(format!("non-positive radius {r}")));
    }
    let centre = (size / 2) as f64;
    let k = radii.len();
    let poly: Vec<(f64, f64)> = radii
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let a = TAU * i as f64 / k as f64;
            (centre + r * a.cos(), centre + r * a.sin())
        })
        .collect();
    let mut mask = LabelMask::empty(size, size);
    for y in 0..size {
        for x in 0..size {
            if point_in_polygon(x as f64, y as f64, &poly) {
                mask.set(x, y, 1);
            }
        }
    }
    let comps = mask.components(1);
    let Some(main) = comps.first() else {
        return Err(ShapeError::Render("contour covers no pixel centre".into()));
    };
    if comps.len() > 1 {
        let mut only = LabelMask::empty(size, size);
        for &p in main {
            only.data_mut()[p] = 1;
        }
        mask = only;
    }
    let (cx, cy) = mask.centroid(1).expect("non-empty mask");
    let (dx, dy) = ((centre - cx).round() as isize, (centre - cy).round() as isize);
    let area = mask.foreground_area();
    let shifted = mask.shifted(dx, dy);
    let region = shifted.regions().get(&1).copied();
    match region {
        Some(r)
            if shifted.foreground_area() == area
                && r.bbox.min_x > 0
                && r.bbox.min_y > 0
                && r.bbox.max_x + 1 < size
                && r.bbox.max_y + 1 < size =>
        {
            Ok(shifted)
        }
        _ => Err(ShapeError::Render(format!(
            "contour does not fit a {size}x{size} raster"
        ))),
    }
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}
