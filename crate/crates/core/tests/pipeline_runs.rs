use std::fs;
use std::path::Path;

use cellsynth::ablation::{run_ablation, score_recording, AblationGrid};
use cellsynth::checkpoint::{save_denoiser, save_flow, DenoiserMeta, FlowMeta};
use cellsynth::config::{load_config, Overrides};
use cellsynth::dataset::scan_sequence;
use cellsynth::diffusion::{DenoiserNetwork, ScheduleSpec};
use cellsynth::flow::{FlowNetwork, DEFAULT_LAMBDA_SMOOTH};
use cellsynth::manifest::read_manifests;
use cellsynth::metrics::EmbedderRegistry;
use cellsynth::pipeline::{
    evaluate, fit_shape_model, generate_recording, load_training_data, run_generation, MetricSelection, Models,
};
use cellsynth::toy::{toy_training_sequence, write_toy_dataset};

const CROP: usize = 32;

/// Untrained small networks plus a shape model fitted on a toy sequence,
/// written to `root` as checkpoint files.
fn untrained_checkpoints(root: &Path) -> Models {
    let dataset = write_toy_dataset(&root.join("data"), &toy_training_sequence(3)).unwrap();
    let data = load_training_data(&dataset, CROP).unwrap();
    let shape = fit_shape_model(&data).unwrap();
    let mut cfg = DenoiserNetwork::default_config();
    cfg.base_width = 4;
    cfg.levels = 3;
    let denoiser = DenoiserNetwork::new(cfg, 1).unwrap();
    let dmeta = DenoiserMeta {
        crop_size: CROP,
        schedule: ScheduleSpec::default(),
        normalization: data.normalization,
        training: serde_json::Value::Null,
    };
    let flow = FlowNetwork::new(4, 3, 2).unwrap();
    let fmeta = FlowMeta {
        crop_size: CROP,
        lambda_smooth: DEFAULT_LAMBDA_SMOOTH,
        training: serde_json::Value::Null,
    };
    let (ddpm, fpm, shape_path) = (root.join("ddpm.ckpt"), root.join("fpm.ckpt"), root.join("shape_model.json"));
    save_denoiser(&ddpm, &denoiser, &dmeta).unwrap();
    save_flow(&fpm, &flow, &fmeta).unwrap();
    shape.save(&shape_path).unwrap();
    Models::load(&ddpm, &fpm, &shape_path).unwrap()
}

fn write_config(root: &Path, name: &str, out: &str, generation: &str) -> std::path::PathBuf {
    let text = format!(
        "[paths]\nddpm_checkpoint = \"ddpm.ckpt\"\nfpm_checkpoint = \"fpm.ckpt\"\nshape_model = \"shape_model.json\"\n\
         output = \"{out}\"\n[generation]\nlength = 3\nnum_cells = 2\nt_first = 20\nt_later = 5\n{generation}\n\
         [scene]\nheight = 80\nwidth = 96\n"
    );
    let path = root.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn two_sequences_scan_back_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let models = untrained_checkpoints(root);
    let mut outputs = Vec::new();
    for out in ["a", "b"] {
        let cfg = load_config(&write_config(root, &format!("{out}.toml"), out, "num_sequences = 2\nseed = 4"), &Overrides::default()).unwrap();
        let summary = run_generation(&cfg).unwrap();
        assert_eq!(summary.sequences.len(), 2);
        assert_eq!(summary.denoiser_evaluations, [2 * (20 + 2 * 5); 2]);
        let names: Vec<String> = summary.sequences.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["01", "02"]);
        let manifest = read_manifests(&root.join(out)).unwrap().remove(0);
        assert!(manifest.seeds.contains_key("sequence_01") && manifest.seeds.contains_key("sequence_02"));
        assert_eq!(manifest.checkpoint_hashes, models.hashes);
        let mut frames = Vec::new();
        for seq in &summary.sequences {
            let tree = scan_sequence(seq).unwrap();
            assert_eq!(tree.frame_count(), 3);
            let raw: Vec<_> = (0..3).map(|f| tree.load_raw_u16(f).unwrap()).collect();
            frames.push((raw, tree.load_masks().unwrap(), tree.lineage.clone()));
        }
        outputs.push(frames);
    }
    assert_eq!(outputs[0], outputs[1]);
    // Different sequences get different seeds.
    assert_ne!(outputs[0][0].0, outputs[0][1].0);
}

#[test]
fn missing_checkpoint_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "[paths]\nddpm_checkpoint = \"nope.ckpt\"\n").unwrap();
    let errs = load_config(&path, &Overrides::default()).unwrap_err();
    let keys: Vec<String> = errs.0.iter().flat_map(|i| i.keys.clone()).collect();
    for key in ["paths.ddpm_checkpoint", "paths.fpm_checkpoint", "paths.shape_model"] {
        assert!(keys.iter().any(|k| k == key), "{key} not in {keys:?}");
    }
}

#[test]
fn a_sequence_scores_perfectly_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let seq = write_toy_dataset(dir.path(), &toy_training_sequence(1)).unwrap();
    let report = evaluate(&seq, &seq, &MetricSelection::all(), "downsample-flatten", "clip-downsample", &EmbedderRegistry::with_builtins()).unwrap();
    assert_eq!(report["seg"], 1.0);
    assert_eq!(report["tra"], 1.0);
    assert!(report["fid"].abs() < 1e-6);
    assert!(report["fvd"].abs() < 1e-6);
}

#[test]
fn single_cell_grid_matches_a_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let models = untrained_checkpoints(root);
    let cfg = load_config(&write_config(root, "c.toml", "out", "seed = 9"), &Overrides::default()).unwrap();
    let grid = AblationGrid {
        t_first: vec![20],
        t_later: vec![5],
    };
    let registry = EmbedderRegistry::with_builtins();
    let report = run_ablation(&models, &cfg.generation, &cfg.scene, &grid, None, &registry);
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];
    assert!(row.error.is_none(), "{:?}", row.error);
    let plain = generate_recording(&models, &cfg.generation, &cfg.scene, 0).unwrap();
    let scores = score_recording(&plain.recording, None, &registry).unwrap();
    assert_eq!(row.denoiser_evaluations, plain.denoiser_evaluations);
    assert_eq!((row.seg, row.tra), (Some(scores.seg), Some(scores.tra)));
    let (_, first) = report.first_frame_table();
    let (_, later) = report.later_frame_table();
    assert_eq!((first.len(), later.len()), (1, 1));
}

#[test]
fn cell_times_grow_with_evaluations() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let models = untrained_checkpoints(root);
    let cfg = load_config(&write_config(root, "c.toml", "out", ""), &Overrides::default()).unwrap();
    let grid = AblationGrid {
        t_first: vec![10, 300],
        t_later: vec![0, 50],
    };
    let report = run_ablation(&models, &cfg.generation, &cfg.scene, &grid, None, &EmbedderRegistry::with_builtins());
    let cheap = report.row(10, 0).unwrap();
    let dear = report.row(300, 50).unwrap();
    assert_eq!(cheap.denoiser_evaluations, 2 * 10);
    assert_eq!(dear.denoiser_evaluations, 2 * (300 + 2 * 50));
    assert!(dear.seconds > cheap.seconds);
}
