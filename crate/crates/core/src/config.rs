//! Generation config: a sectioned TOML file resolved into a validated
//! [`Config`] with every default applied.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::DEFAULT_STEPS;
use crate::flow::DEFAULT_LAMBDA_SMOOTH;
use crate::shape::{DEFAULT_ANCHOR_SPACING, DEFAULT_SMOOTHNESS};
use crate::synthesis::{GenerationMode, MotionParams, DEFAULT_T_FIRST, DEFAULT_T_LATER};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    paths: RawPaths,
    generation: RawGeneration,
    scene: RawScene,
    training: RawTraining,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawPaths {
    ddpm_checkpoint: Option<PathBuf>,
    fpm_checkpoint: Option<PathBuf>,
    shape_model: Option<PathBuf>,
    output: Option<PathBuf>,
    reference_data: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawGeneration {
    length: Option<i64>,
    num_cells: Option<i64>,
    num_sequences: Option<i64>,
    t_first: Option<i64>,
    t_later: Option<i64>,
    diffusion_steps: Option<i64>,
    seed: Option<u64>,
    smoothness: Option<f64>,
    anchor_spacing: Option<i64>,
    mode: Option<GenerationMode>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawScene {
    height: Option<i64>,
    width: Option<i64>,
    motion_std: Option<f64>,
    rotation_std_deg: Option<f64>,
    allow_overlap: Option<bool>,
    max_attempts: Option<i64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawTraining {
    data: Option<PathBuf>,
    crop_size: Option<i64>,
    seed: Option<u64>,
    ddpm_iters: Option<i64>,
    ddpm_batch: Option<i64>,
    ddpm_lr: Option<f64>,
    ddpm_base_width: Option<i64>,
    ddpm_levels: Option<i64>,
    fpm_iters: Option<i64>,
    fpm_batch: Option<i64>,
    fpm_lr: Option<f64>,
    fpm_base_width: Option<i64>,
    fpm_levels: Option<i64>,
    lambda_smooth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub ddpm_checkpoint: PathBuf,
    pub fpm_checkpoint: PathBuf,
    pub shape_model: PathBuf,
    pub output: PathBuf,
    pub reference_data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Frames per sequence (`F + 1`).
    pub length: usize,
    pub num_cells: usize,
    pub num_sequences: usize,
    pub t_first: usize,
    pub t_later: usize,
    /// Length `T` of the diffusion schedule the step counts refer to.
    pub diffusion_steps: usize,
    pub seed: u64,
    pub smoothness: f64,
    pub anchor_spacing: usize,
    pub mode: GenerationMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub motion: MotionParams,
}

/// Settings of `prepare-data`, `train-ddpm` and `train-fpm`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub data: Option<PathBuf>,
    pub crop_size: usize,
    pub seed: u64,
    pub ddpm_iters: usize,
    pub ddpm_batch: usize,
    pub ddpm_lr: f64,
    pub ddpm_base_width: usize,
    pub ddpm_levels: usize,
    pub fpm_iters: usize,
    pub fpm_batch: usize,
    pub fpm_lr: f64,
    pub fpm_base_width: usize,
    pub fpm_levels: usize,
    pub lambda_smooth: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            data: None,
            crop_size: 96,
            seed: 0,
            ddpm_iters: 10_000,
            ddpm_batch: 32,
            ddpm_lr: 5e-4,
            ddpm_base_width: 32,
            ddpm_levels: 4,
            fpm_iters: 2000,
            fpm_batch: 32,
            fpm_lr: 1e-4,
            fpm_base_width: 16,
            fpm_levels: 4,
            lambda_smooth: DEFAULT_LAMBDA_SMOOTH,
        }
    }
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub paths: PathsConfig,
    pub generation: GenerationConfig,
    pub scene: SceneConfig,
    pub training: TrainingConfig,
}

/// One violated constraint, naming the offending key(s).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub keys: Vec<String>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.keys.join(", "), self.message)
    }
}

/// Every issue found in a config file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for issue in &self.0 {
            writeln!(f, "  - {issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// Values that take precedence over the file, typically from flags.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub t_first: Option<usize>,
    pub t_later: Option<usize>,
    pub num_sequences: Option<usize>,
}

struct Checker {
    issues: Vec<ConfigIssue>,
}

impl Checker {
    fn issue(&mut self, keys: &[&str], message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            keys: keys.iter().map(|k| k.to_string()).collect(),
            message: message.into(),
        });
    }

    fn count(&mut self, key: &str, value: Option<i64>, default: usize, min: usize) -> usize {
        match value {
            None => default,
            Some(v) if v >= min as i64 => v as usize,
            Some(v) => {
                self.issue(&[key], format!("must be at least {min}, got {v}"));
                default
            }
        }
    }

    fn positive(&mut self, key: &str, value: Option<f64>, default: f64, allow_zero: bool) -> f64 {
        match value {
            None => default,
            Some(v) if v.is_finite() && (v > 0.0 || (allow_zero && v == 0.0)) => v,
            Some(v) => {
                let what = if allow_zero { "non-negative" } else { "positive" };
                self.issue(&[key], format!("must be {what} and finite, got {v}"));
                default
            }
        }
    }

    fn file(&mut self, key: &str, value: &Option<PathBuf>, base: &Path) -> PathBuf {
        match value {
            None => {
                self.issue(&[key], "required path is missing");
                PathBuf::new()
            }
            Some(p) => {
                let full = base.join(p);
                if !full.is_file() {
                    self.issue(&[key], format!("{} is not a file", full.display()));
                }
                full
            }
        }
    }
}

fn resolve_training(c: &mut Checker, t: &RawTraining, base: &Path) -> TrainingConfig {
    let d = TrainingConfig::default();
    let resolved = TrainingConfig {
        data: t.data.as_ref().map(|p| base.join(p)),
        crop_size: c.count("training.crop_size", t.crop_size, d.crop_size, 1),
        seed: t.seed.unwrap_or(d.seed),
        ddpm_iters: c.count("training.ddpm_iters", t.ddpm_iters, d.ddpm_iters, 0),
        ddpm_batch: c.count("training.ddpm_batch", t.ddpm_batch, d.ddpm_batch, 1),
        ddpm_lr: c.positive("training.ddpm_lr", t.ddpm_lr, d.ddpm_lr, false),
        ddpm_base_width: c.count("training.ddpm_base_width", t.ddpm_base_width, d.ddpm_base_width, 1),
        ddpm_levels: c.count("training.ddpm_levels", t.ddpm_levels, d.ddpm_levels, 1),
        fpm_iters: c.count("training.fpm_iters", t.fpm_iters, d.fpm_iters, 0),
        fpm_batch: c.count("training.fpm_batch", t.fpm_batch, d.fpm_batch, 1),
        fpm_lr: c.positive("training.fpm_lr", t.fpm_lr, d.fpm_lr, false),
        fpm_base_width: c.count("training.fpm_base_width", t.fpm_base_width, d.fpm_base_width, 1),
        fpm_levels: c.count("training.fpm_levels", t.fpm_levels, d.fpm_levels, 1),
        lambda_smooth: c.positive("training.lambda_smooth", t.lambda_smooth, d.lambda_smooth, true),
    };
    for (key, levels) in [("training.ddpm_levels", resolved.ddpm_levels), ("training.fpm_levels", resolved.fpm_levels)] {
        let multiple = 1usize << (levels - 1).min(16);
        if resolved.crop_size % multiple != 0 {
            c.issue(
                &[key, "training.crop_size"],
                format!("crop_size {} is not a multiple of {multiple}", resolved.crop_size),
            );
        }
    }
    resolved
}

/// Which network a training run's flags apply to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Network {
    Ddpm,
    Fpm,
}

/// Training flags that take precedence over the `[training]` section.
#[derive(Clone, Debug, Default)]
pub struct TrainingOverrides {
    /// Used as given, not relative to the config file.
    pub data: Option<PathBuf>,
    pub crop_size: Option<usize>,
    pub seed: Option<u64>,
    pub iters: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub base_width: Option<usize>,
    pub levels: Option<usize>,
}

/// Read only the `[training]` section of a config file; the other
/// sections are parsed but not checked, since their checkpoints may not
/// exist yet.
pub fn load_training_config(path: &Path) -> Result<TrainingConfig, ConfigErrors> {
    resolve_training_config(Some(path), Network::Ddpm, &TrainingOverrides::default())
}

/// Training settings from an optional config file with `overrides`
/// applied to the fields of `network`, validated together.
pub fn resolve_training_config(
    path: Option<&Path>,
    network: Network,
    overrides: &TrainingOverrides,
) -> Result<TrainingConfig, ConfigErrors> {
    let mut raw = match path {
        Some(p) => parse(&read_text(p)?)?.training,
        None => RawTraining::default(),
    };
    let int = |v: Option<usize>| v.map(|v| v as i64);
    raw.crop_size = int(overrides.crop_size).or(raw.crop_size);
    raw.seed = overrides.seed.or(raw.seed);
    let (iters, batch, lr, width, levels) = match network {
        Network::Ddpm => (
            &mut raw.ddpm_iters,
            &mut raw.ddpm_batch,
            &mut raw.ddpm_lr,
            &mut raw.ddpm_base_width,
            &mut raw.ddpm_levels,
        ),
        Network::Fpm => (
            &mut raw.fpm_iters,
            &mut raw.fpm_batch,
            &mut raw.fpm_lr,
            &mut raw.fpm_base_width,
            &mut raw.fpm_levels,
        ),
    };
    *iters = int(overrides.iters).or(*iters);
    *batch = int(overrides.batch).or(*batch);
    *lr = overrides.lr.or(*lr);
    *width = int(overrides.base_width).or(*width);
    *levels = int(overrides.levels).or(*levels);

    let mut c = Checker { issues: Vec::new() };
    let base = path.and_then(Path::parent).unwrap_or(Path::new("."));
    let mut t = resolve_training(&mut c, &raw, base);
    if let Some(d) = &overrides.data {
        t.data = Some(d.clone());
    }
    if c.issues.is_empty() {
        Ok(t)
    } else {
        Err(ConfigErrors(c.issues))
    }
}

fn parse(text: &str) -> Result<RawConfig, ConfigErrors> {
    toml::from_str(text).map_err(|e| {
        ConfigErrors(vec![ConfigIssue {
            keys: vec!["<file>".into()],
            message: e.to_string(),
        }])
    })
}

fn read_text(path: &Path) -> Result<String, ConfigErrors> {
    std::fs::read_to_string(path).map_err(|e| {
        ConfigErrors(vec![ConfigIssue {
            keys: vec!["<file>".into()],
            message: format!("{}: {e}", path.display()),
        }])
    })
}

/// Parse and validate config text. Relative paths resolve against `base`.
pub fn validate_config(text: &str, base: &Path, overrides: &Overrides) -> Result<Config, ConfigErrors> {
    let raw = parse(text)?;
    let mut c = Checker { issues: Vec::new() };

    let paths = PathsConfig {
        ddpm_checkpoint: c.file("paths.ddpm_checkpoint", &raw.paths.ddpm_checkpoint, base),
        fpm_checkpoint: c.file("paths.fpm_checkpoint", &raw.paths.fpm_checkpoint, base),
        shape_model: c.file("paths.shape_model", &raw.paths.shape_model, base),
        output: match (&overrides.output, &raw.paths.output) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => base.join(p),
            (None, None) => {
                c.issue(&["paths.output"], "required path is missing");
                PathBuf::new()
            }
        },
        reference_data: raw.paths.reference_data.as_ref().map(|p| {
            let full = base.join(p);
            if !full.exists() {
                c.issue(&["paths.reference_data"], format!("{} does not exist", full.display()));
            }
            full
        }),
    };

    let g = &raw.generation;
    let steps = c.count("generation.diffusion_steps", g.diffusion_steps, DEFAULT_STEPS, 1);
    let t_first = match overrides.t_first {
        Some(v) => v,
        None => c.count("generation.t_first", g.t_first, DEFAULT_T_FIRST, 1),
    };
    let t_later = match overrides.t_later {
        Some(v) => v,
        None => c.count("generation.t_later", g.t_later, DEFAULT_T_LATER, 0),
    };
    let mode = g.mode.unwrap_or_default();
    if t_first < 1 || t_first > steps {
        c.issue(
            &["generation.t_first", "generation.diffusion_steps"],
            format!("t_first = {t_first} must lie in 1..={steps}"),
        );
    }
    if t_later > t_first && mode == GenerationMode::Propagate {
        c.issue(
            &["generation.t_later", "generation.t_first"],
            format!("t_later = {t_later} exceeds t_first = {t_first}"),
        );
    }
    if t_later > steps {
        c.issue(
            &["generation.t_later", "generation.diffusion_steps"],
            format!("t_later = {t_later} exceeds {steps} diffusion steps"),
        );
    }
    if t_later == 0 && mode == GenerationMode::Independent {
        c.issue(
            &["generation.t_later", "generation.mode"],
            "independent generation needs t_later >= 1",
        );
    }
    let generation = GenerationConfig {
        length: c.count("generation.length", g.length, 92, 1),
        num_cells: c.count("generation.num_cells", g.num_cells, 20, 1),
        num_sequences: match overrides.num_sequences {
            Some(v) => v,
            None => c.count("generation.num_sequences", g.num_sequences, 2, 1),
        },
        t_first,
        t_later,
        diffusion_steps: steps,
        seed: overrides.seed.or(g.seed).unwrap_or(0),
        smoothness: c.positive("generation.smoothness", g.smoothness, DEFAULT_SMOOTHNESS, false),
        anchor_spacing: c.count("generation.anchor_spacing", g.anchor_spacing, DEFAULT_ANCHOR_SPACING, 1),
        mode,
    };
    if generation.num_sequences > 99 {
        c.issue(&["generation.num_sequences"], "at most 99 sequences are supported");
    }
    if generation.num_cells > u16::MAX as usize {
        c.issue(&["generation.num_cells"], "too many cells for 16-bit labels");
    }

    let s = &raw.scene;
    let defaults = MotionParams::default();
    let scene = SceneConfig {
        height: c.count("scene.height", s.height, 700, 1),
        width: c.count("scene.width", s.width, 1100, 1),
        motion: MotionParams {
            translation_std: c.positive("scene.motion_std", s.motion_std, defaults.translation_std, true),
            rotation_std_deg: c.positive("scene.rotation_std_deg", s.rotation_std_deg, defaults.rotation_std_deg, true),
            allow_overlap: s.allow_overlap.unwrap_or(defaults.allow_overlap),
            max_attempts: c.count("scene.max_attempts", s.max_attempts, defaults.max_attempts, 1),
        },
    };

    let training = resolve_training(&mut c, &raw.training, base);

    if c.issues.is_empty() {
        Ok(Config {
            paths,
            generation,
            scene,
            training,
        })
    } else {
        Err(ConfigErrors(c.issues))
    }
}

/// Read and validate a config file.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<Config, ConfigErrors> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    validate_config(&text, base, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_checkpoints(extra: &str) -> (tempfile::TempDir, String) {
        let dir = tempfile::tempdir().unwrap();
        for f in ["d.ckpt", "f.ckpt", "s.json"] {
            std::fs::write(dir.path().join(f), b"x").unwrap();
        }
        let text = format!(
            "[paths]\nddpm_checkpoint = \"d.ckpt\"\nfpm_checkpoint = \"f.ckpt\"\nshape_model = \"s.json\"\noutput = \"out\"\n{extra}"
        );
        (dir, text)
    }

    #[test]
    fn default_step_counts_are_valid() {
        let (dir, text) = with_checkpoints("[generation]\nt_first = 200\nt_later = 10\n");
        let cfg = validate_config(&text, dir.path(), &Overrides::default()).unwrap();
        assert_eq!((cfg.generation.t_first, cfg.generation.t_later), (200, 10));
        assert_eq!((cfg.scene.height, cfg.scene.width, cfg.generation.length), (700, 1100, 92));
        assert_eq!(cfg.paths.output, dir.path().join("out"));
    }

    #[test]
    fn ordering_violation_names_both_keys() {
        let (dir, text) = with_checkpoints("[generation]\nt_first = 200\nt_later = 300\n");
        let errs = validate_config(&text, dir.path(), &Overrides::default()).unwrap_err();
        assert_eq!(errs.0.len(), 1);
        assert_eq!(errs.0[0].keys, ["generation.t_later", "generation.t_first"]);
    }

    #[test]
    fn empty_file_lists_every_missing_path() {
        let errs = validate_config("", Path::new("."), &Overrides::default()).unwrap_err();
        let keys: Vec<String> = errs.0.iter().flat_map(|i| i.keys.clone()).collect();
        for k in ["paths.ddpm_checkpoint", "paths.fpm_checkpoint", "paths.shape_model", "paths.output"] {
            assert!(keys.iter().any(|x| x == k), "{k} missing from {keys:?}");
        }
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let (dir, text) = with_checkpoints("[generation]\nseed = 4\n");
        let ov = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        assert_eq!(validate_config(&text, dir.path(), &ov).unwrap().generation.seed, 9);
        let (dir, text) = with_checkpoints("[generation]\nsede = 4\n");
        assert!(validate_config(&text, dir.path(), &Overrides::default()).is_err());
    }

    #[test]
    fn training_flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[training]\ndata = \"d\"\nddpm_iters = 50\nfpm_iters = 7\ncrop_size = 32\n").unwrap();
        let ov = TrainingOverrides {
            iters: Some(3),
            ..Default::default()
        };
        let t = resolve_training_config(Some(&path), Network::Fpm, &ov).unwrap();
        assert_eq!((t.ddpm_iters, t.fpm_iters, t.crop_size), (50, 3, 32));
        assert_eq!(t.data, Some(dir.path().join("d")));
        let bad = TrainingOverrides {
            crop_size: Some(30),
            ..Default::default()
        };
        let errs = resolve_training_config(None, Network::Ddpm, &bad).unwrap_err();
        assert!(errs.0.iter().any(|i| i.keys.contains(&"training.crop_size".to_string())));
    }
}
