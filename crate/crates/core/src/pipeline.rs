//! End-to-end stages: loading training data, fitting the shape model,
//! training both networks, generating scene recordings and evaluating them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{file_sha256, load_denoiser, load_flow, CheckpointError, DenoiserMeta, FlowMeta};
use crate::config::{Config, ConfigErrors, GenerationConfig, SceneConfig, TrainingConfig};
use crate::dataset::{
    consecutive_mask_pairs, extract_crops, scan_sequence, write_sequence, CellCrop, DatasetError, SequenceTree,
};
use crate::diffusion::{train, DenoiserNetwork, DiffusionError, NoiseSchedule, ScheduleSpec, TrainOptions, TrainReport};
use crate::flow::{train_fpm, FlowError, FlowNetwork};
use crate::manifest::RunManifest;
use crate::metrics::{
    embed, frechet_distance, seg_score, tra_score, AogmWeights, EmbedderRegistry, MetricsError, TrackingGraph,
};
use crate::normalize::IntensityNormalization;
use crate::raster::{ImagePlane, LabelMask};
use crate::seed::derive_seed;
use crate::shape::{sample_trajectory_with, ContourDescriptor, ShapeError, ShapeModel, DEFAULT_RAYS};
use crate::synthesis::{
    compose_scene, Background, Generator, SceneRecording, SynthesisError, VideoSettings,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("shape model: {0}")]
    Shape(#[from] ShapeError),
    #[error("diffusion: {0}")]
    Diffusion(#[from] DiffusionError),
    #[error("flow: {0}")]
    Flow(#[from] FlowError),
    #[error("synthesis: {0}")]
    Synthesis(#[from] SynthesisError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("models disagree: {0}")]
    Incompatible(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_context(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

/// Crops, mask pairs and intensity scaling extracted from one sequence.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub tree: SequenceTree,
    pub normalization: IntensityNormalization,
    pub crops: Vec<CellCrop>,
    /// Crop images mapped to `[-1, 1]`.
    pub images: Vec<ImagePlane>,
    pub pairs: Vec<(LabelMask, LabelMask)>,
    pub skipped_crops: usize,
    pub skipped_pairs: usize,
}

/// Scan `dataset`, fit the intensity scaling over all raw frames and cut
/// `crop_size` crops and consecutive mask pairs.
pub fn load_training_data(dataset: &Path, crop_size: usize) -> Result<TrainingData, PipelineError> {
    let tree = scan_sequence(dataset)?;
    let raw = (0..tree.frame_count())
        .map(|f| tree.load_raw_u16(f).map(|(_, _, d)| d))
        .collect::<Result<Vec<_>, _>>()?;
    let normalization = IntensityNormalization::fit_default(raw.iter().map(Vec::as_slice))
        .ok_or_else(|| DatasetError::MissingAnnotation("sequence has no pixels".into()))?;
    let crops = extract_crops(&tree, crop_size)?;
    let pairs = consecutive_mask_pairs(&tree, crop_size)?;
    let images = crops.crops.iter().map(|c| normalization.normalize(&c.image)).collect();
    log::info!(
        "{} crops ({} skipped), {} pairs ({} skipped) from {}",
        crops.crops.len(),
        crops.skipped,
        pairs.pairs.len(),
        pairs.skipped,
        tree.root.display()
    );
    Ok(TrainingData {
        tree,
        normalization,
        images,
        skipped_crops: crops.skipped,
        skipped_pairs: pairs.skipped,
        crops: crops.crops,
        pairs: pairs.pairs.into_iter().map(|(a, b)| (a.mask, b.mask)).collect(),
    })
}

/// Shape model over every crop of `data`.
pub fn fit_shape_model(data: &TrainingData) -> Result<ShapeModel, PipelineError> {
    let descriptors = data
        .crops
        .iter()
        .zip(&data.images)
        .map(|(c, img)| ContourDescriptor::from_mask(&c.mask, Some(img), DEFAULT_RAYS))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ShapeModel::fit(&descriptors)?)
}

/// Train a fresh denoiser on the crops of `data`.
pub fn train_denoiser(
    data: &TrainingData,
    training: &TrainingConfig,
    schedule: ScheduleSpec,
) -> Result<(DenoiserNetwork, DenoiserMeta, TrainReport), PipelineError> {
    let mut config = DenoiserNetwork::default_config();
    config.base_width = training.ddpm_base_width;
    config.levels = training.ddpm_levels;
    let mut net = DenoiserNetwork::new(config, derive_seed(training.seed, "ddpm-init", 0))
        .map_err(|e| PipelineError::Incompatible(e.to_string()))?;
    let options = TrainOptions {
        batch: training.ddpm_batch,
        lr: training.ddpm_lr,
        iters: training.ddpm_iters,
        seed: derive_seed(training.seed, "ddpm-train", 0),
    };
    let report = train(&data.images, &mut net, &schedule.build()?, &options)?;
    net.set_steps_trained(options.iters as u64);
    let meta = DenoiserMeta {
        crop_size: training.crop_size,
        schedule,
        normalization: data.normalization,
        training: serde_json::json!({
            "options": options,
            "master_seed": training.seed,
            "crops": data.images.len(),
            "final_loss": report.tail_mean(50),
            "diverged": report.diverged,
        }),
    };
    Ok((net, meta, report))
}

/// Train a fresh flow network on the mask pairs of `data`.
pub fn train_flow(data: &TrainingData, training: &TrainingConfig) -> Result<(FlowNetwork, FlowMeta, TrainReport), PipelineError> {
    let mut net = FlowNetwork::new(
        training.fpm_base_width,
        training.fpm_levels,
        derive_seed(training.seed, "fpm-init", 0),
    )
    .map_err(|e| PipelineError::Incompatible(e.to_string()))?;
    let options = TrainOptions {
        batch: training.fpm_batch,
        lr: training.fpm_lr,
        iters: training.fpm_iters,
        seed: derive_seed(training.seed, "fpm-train", 0),
    };
    let report = train_fpm(&data.pairs, &mut net, &options, training.lambda_smooth)?;
    let meta = FlowMeta {
        crop_size: training.crop_size,
        lambda_smooth: training.lambda_smooth,
        training: serde_json::json!({
            "options": options,
            "master_seed": training.seed,
            "pairs": data.pairs.len(),
            "final_loss": report.tail_mean(50),
            "diverged": report.diverged,
        }),
    };
    Ok((net, meta, report))
}

/// Every trained component needed for generation.
pub struct Models {
    pub shape: ShapeModel,
    pub denoiser: DenoiserNetwork,
    pub denoiser_meta: DenoiserMeta,
    pub schedule: NoiseSchedule,
    pub flow: FlowNetwork,
    pub flow_meta: FlowMeta,
    /// File hashes keyed by role, empty for in-memory models.
    pub hashes: BTreeMap<String, String>,
}

impl Models {
    pub fn new(
        shape: ShapeModel,
        denoiser: DenoiserNetwork,
        denoiser_meta: DenoiserMeta,
        flow: FlowNetwork,
        flow_meta: FlowMeta,
    ) -> Result<Self, PipelineError> {
        if denoiser_meta.crop_size != flow_meta.crop_size {
            return Err(PipelineError::Incompatible(format!(
                "denoiser crops are {} px, flow crops are {} px",
                denoiser_meta.crop_size, flow_meta.crop_size
            )));
        }
        let schedule = denoiser_meta.schedule.build()?;
        Ok(Self {
            shape,
            denoiser,
            denoiser_meta,
            schedule,
            flow,
            flow_meta,
            hashes: BTreeMap::new(),
        })
    }

    pub fn load(ddpm: &Path, fpm: &Path, shape: &Path) -> Result<Self, PipelineError> {
        let (denoiser, denoiser_meta) = load_denoiser(ddpm)?;
        let (flow, flow_meta) = load_flow(fpm)?;
        let shape_model = ShapeModel::load(shape)?;
        let mut models = Self::new(shape_model, denoiser, denoiser_meta, flow, flow_meta)?;
        for (role, path) in [("ddpm", ddpm), ("fpm", fpm), ("shape_model", shape)] {
            models.hashes.insert(role.into(), file_sha256(path)?);
        }
        Ok(models)
    }

    pub fn crop_size(&self) -> usize {
        self.denoiser_meta.crop_size
    }

    pub fn generator(&self) -> Generator<'_> {
        Generator {
            shape: &self.shape,
            denoiser: &self.denoiser,
            schedule: &self.schedule,
            flow: &self.flow,
            crop_size: self.crop_size(),
            checkpoint_ids: self.hashes.values().cloned().collect(),
        }
    }
}

/// One generated scene and its denoiser call count.
pub struct GeneratedScene {
    pub recording: SceneRecording,
    pub denoiser_evaluations: u64,
}

/// Generate scene `sequence` (0-based) of a run. Seeds for trajectories,
/// videos and placement derive from the master seed and the indices only.
pub fn generate_recording(
    models: &Models,
    generation: &GenerationConfig,
    scene: &SceneConfig,
    sequence: usize,
) -> Result<GeneratedScene, PipelineError> {
    if generation.t_first > models.schedule.steps() {
        return Err(PipelineError::Incompatible(format!(
            "t_first = {} exceeds the denoiser's {} steps",
            generation.t_first,
            models.schedule.steps()
        )));
    }
    let seq_seed = derive_seed(generation.seed, "sequence", sequence as u64);
    let generator = models.generator();
    let mut videos = Vec::with_capacity(generation.num_cells);
    let mut evaluations = 0u64;
    for cell in 0..generation.num_cells {
        let trajectory = sample_trajectory_with(
            &models.shape,
            generation.length - 1,
            generation.smoothness,
            generation.anchor_spacing,
            derive_seed(seq_seed, "trajectory", cell as u64),
        );
        let settings = VideoSettings {
            t_first: generation.t_first,
            t_later: generation.t_later,
            mode: generation.mode,
            seed: derive_seed(seq_seed, "video", cell as u64),
        };
        let video = generator.generate_cell_video(&trajectory, &settings)?;
        evaluations += video.manifest.denoiser_evaluations as u64;
        videos.push(video);
    }
    let background = Background {
        mean: models.shape.background_mean,
        std: models.shape.background_std,
    };
    let recording = compose_scene(
        &videos,
        scene.height,
        scene.width,
        &scene.motion,
        background,
        models.denoiser_meta.normalization,
        derive_seed(seq_seed, "scene", 0),
    )?;
    Ok(GeneratedScene {
        recording,
        denoiser_evaluations: evaluations,
    })
}

/// Name of sequence `index` (0-based) in the output tree.
pub fn sequence_name(index: usize) -> String {
    format!("{:02}", index + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub sequences: Vec<PathBuf>,
    pub denoiser_evaluations: Vec<u64>,
    pub manifest: PathBuf,
}

/// Load the configured checkpoints and generate every sequence.
pub fn run_generation(config: &Config) -> Result<GenerationSummary, PipelineError> {
    let models = Models::load(
        &config.paths.ddpm_checkpoint,
        &config.paths.fpm_checkpoint,
        &config.paths.shape_model,
    )?;
    run_generation_with(&models, config)
}

/// Generate `num_sequences` scenes into the configured output directory as
/// `01`, `02`, ... and append a run manifest there.
pub fn run_generation_with(models: &Models, config: &Config) -> Result<GenerationSummary, PipelineError> {
    let out = &config.paths.output;
    let config_json = serde_json::to_value(config).expect("config serializes");
    let mut manifest = RunManifest::new("generate", config_json);
    manifest.seeds.insert("master".into(), config.generation.seed);
    manifest.checkpoint_hashes = models.hashes.clone();
    let mut sequences = Vec::new();
    let mut evaluations = Vec::new();
    for s in 0..config.generation.num_sequences {
        let name = sequence_name(s);
        manifest
            .seeds
            .insert(format!("sequence_{name}"), derive_seed(config.generation.seed, "sequence", s as u64));
        let generated = {
            let stage = format!("generate_{name}");
            manifest.time(&stage, || generate_recording(models, &config.generation, &config.scene, s))?
        };
        let dir = manifest.time(&format!("write_{name}"), || write_sequence(&generated.recording, out, &name))?;
        manifest
            .denoiser_evaluations
            .insert(format!("sequence_{name}"), generated.denoiser_evaluations);
        evaluations.push(generated.denoiser_evaluations);
        sequences.push(dir);
    }
    manifest.outputs = serde_json::json!({ "sequences": sequences });
    let manifest_path = manifest
        .append_to(out)
        .map_err(io_context(format!("writing manifest in {}", out.display())))?;
    Ok(GenerationSummary {
        sequences,
        denoiser_evaluations: evaluations,
        manifest: manifest_path,
    })
}

/// Which metrics `evaluate` computes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricSelection {
    pub seg: bool,
    pub tra: bool,
    pub fid: bool,
    pub fvd: bool,
}

impl MetricSelection {
    pub fn all() -> Self {
        Self {
            seg: true,
            tra: true,
            fid: true,
            fvd: true,
        }
    }

    /// Parse a comma-separated list such as `seg,tra,fid`.
    pub fn parse(list: &str) -> Result<Self, String> {
        let mut s = Self {
            seg: false,
            tra: false,
            fid: false,
            fvd: false,
        };
        for item in list.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            match item.to_ascii_lowercase().as_str() {
                "seg" => s.seg = true,
                "tra" => s.tra = true,
                "fid" => s.fid = true,
                "fvd" => s.fvd = true,
                other => return Err(format!("unknown metric `{other}`")),
            }
        }
        Ok(s)
    }
}

/// Metric values keyed by name, in a stable order.
pub type Report = BTreeMap<String, f64>;

fn load_sequence(tree: &SequenceTree) -> Result<(Vec<Vec<u16>>, Vec<(usize, usize)>, Vec<LabelMask>), PipelineError> {
    let mut raw = Vec::new();
    let mut sizes = Vec::new();
    for f in 0..tree.frame_count() {
        let (w, h, d) = tree.load_raw_u16(f)?;
        raw.push(d);
        sizes.push((w, h));
    }
    Ok((raw, sizes, tree.load_masks()?))
}

fn normalized_frames(raw: &[Vec<u16>], sizes: &[(usize, usize)], n: &IntensityNormalization) -> Vec<ImagePlane> {
    raw.iter()
        .zip(sizes)
        .map(|(d, &(w, h))| {
            let img = ImagePlane::new(w, h, crate::raster::ValueDomain::Raw, d.iter().map(|&v| f64::from(v)).collect())
                .expect("frame buffer");
            n.normalize(&img)
        })
        .collect()
}

/// Compare a predicted sequence against a ground-truth one. SEG and TRA
/// need congruent annotations; the Fréchet distances compare frame (or
/// clip) embeddings after scaling both sequences with the ground truth's
/// intensity percentiles.
pub fn evaluate(
    gt_path: &Path,
    pred_path: &Path,
    metrics: &MetricSelection,
    image_embedder: &str,
    video_embedder: &str,
    registry: &EmbedderRegistry,
) -> Result<Report, PipelineError> {
    let gt = scan_sequence(gt_path)?;
    let pred = scan_sequence(pred_path)?;
    let (gt_raw, gt_sizes, gt_masks) = load_sequence(&gt)?;
    let (pred_raw, pred_sizes, pred_masks) = load_sequence(&pred)?;
    let mut report = Report::new();
    if metrics.seg {
        report.insert("seg".into(), seg_score(&gt_masks, &pred_masks)?);
    }
    if metrics.tra {
        let g = TrackingGraph::from_masks(gt_masks.clone(), gt.lineage.as_deref().unwrap_or(&[]));
        let p = TrackingGraph::from_masks(pred_masks.clone(), pred.lineage.as_deref().unwrap_or(&[]));
        report.insert("tra".into(), tra_score(&g, &p, &AogmWeights::default())?);
    }
    if metrics.fid || metrics.fvd {
        let norm = IntensityNormalization::fit_default(gt_raw.iter().map(Vec::as_slice))
            .ok_or_else(|| DatasetError::MissingAnnotation("ground truth has no pixels".into()))?;
        let real = normalized_frames(&gt_raw, &gt_sizes, &norm);
        let fake = normalized_frames(&pred_raw, &pred_sizes, &norm);
        for (flag, key, id) in [(metrics.fid, "fid", image_embedder), (metrics.fvd, "fvd", video_embedder)] {
            if flag {
                let e = registry.get(id)?;
                let d = frechet_distance(&embed(&real, e, "real")?, &embed(&fake, e, "synthetic")?)?;
                report.insert(key.into(), d);
            }
        }
    }
    Ok(report)
}

/// `key = value` lines.
pub fn format_report(report: &Report) -> String {
    report.iter().map(|(k, v)| format!("{k} = {v:.6}\n")).collect()
}

/// Raw frames of a sequence scaled by their own intensity percentiles.
pub fn load_reference_frames(path: &Path) -> Result<Vec<ImagePlane>, PipelineError> {
    let tree = scan_sequence(path)?;
    let mut raw = Vec::new();
    let mut sizes = Vec::new();
    for f in 0..tree.frame_count() {
        let (w, h, d) = tree.load_raw_u16(f)?;
        raw.push(d);
        sizes.push((w, h));
    }
    let norm = IntensityNormalization::fit_default(raw.iter().map(Vec::as_slice))
        .ok_or_else(|| DatasetError::MissingAnnotation("reference sequence has no pixels".into()))?;
    Ok(normalized_frames(&raw, &sizes, &norm))
}

/// What `prepare_data` wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedData {
    pub shape_model: PathBuf,
    pub normalization: PathBuf,
    pub crops: usize,
    pub pairs: usize,
    pub skipped_crops: usize,
    pub skipped_pairs: usize,
    pub shape_modes: usize,
    pub retained_modes: usize,
}

/// Fit the shape model and intensity scaling of a dataset and write them
/// to `out` as `shape_model.json` and `normalization.json`.
pub fn prepare_data(data: &TrainingData, out: &Path) -> Result<PreparedData, PipelineError> {
    std::fs::create_dir_all(out).map_err(io_context(format!("creating {}", out.display())))?;
    let model = fit_shape_model(data)?;
    let shape_path = out.join("shape_model.json");
    model.save(&shape_path)?;
    let norm_path = out.join("normalization.json");
    let json = serde_json::to_string_pretty(&data.normalization).expect("normalization serializes");
    std::fs::write(&norm_path, json).map_err(io_context(format!("writing {}", norm_path.display())))?;
    Ok(PreparedData {
        shape_model: shape_path,
        normalization: norm_path,
        crops: data.crops.len(),
        pairs: data.pairs.len(),
        skipped_crops: data.skipped_crops,
        skipped_pairs: data.skipped_pairs,
        shape_modes: model.mode_count(),
        retained_modes: model.retained,
    })
}
