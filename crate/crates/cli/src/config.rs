//! Run configuration: one TOML file per run, with command-line overrides.
//!
//! Precedence is flag, then file, then built-in default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tunet::data::SyntheticSpec;
use tunet::model::TUNetConfig;
use tunet::train::TrainConfig;
use tunet::{Error, Result, Shape3};

/// Environment variable that relative input paths are resolved against.
pub const DATA_ROOT_ENV: &str = "TUNET_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every random stream in the run derives from it.
    pub seed: u64,
    pub deterministic: bool,
    pub out: PathBuf,
    /// Dataset directory for `train` and `evaluate`.
    pub dataset: Option<PathBuf>,
    /// Held-out dataset directory, validated every `train.val_interval` epochs.
    pub validation: Option<PathBuf>,
    pub synth: SynthConfig,
    pub model: TUNetConfig,
    pub train: TrainConfig,
    pub register: RegisterConfig,
    pub evaluate: EvaluateConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            out: PathBuf::from("tunet-out"),
            dataset: None,
            validation: None,
            synth: SynthConfig::default(),
            model: TUNetConfig::default(),
            train: TrainConfig::default(),
            register: RegisterConfig::default(),
            evaluate: EvaluateConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    /// Index of the first pair; disjoint ranges give disjoint fields over the same atlas.
    pub first_index: usize,
    pub shape: Shape3,
    pub num_blobs: usize,
    pub field_smoothness: f64,
    pub max_displacement: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        SynthConfig {
            count: 3,
            first_index: 0,
            shape: spec.shape,
            num_blobs: spec.num_blobs,
            field_smoothness: spec.field_smoothness,
            max_displacement: spec.max_displacement,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            shape: self.shape,
            num_blobs: self.num_blobs,
            field_smoothness: self.field_smoothness,
            max_displacement: self.max_displacement,
            seed,
        }
    }
}

/// Overlapping-tile inference: `patch` sized tiles every `stride` voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tiling {
    pub patch: Shape3,
    pub stride: Shape3,
}

impl Tiling {
    pub fn pair(tiling: Option<Tiling>) -> Option<(Shape3, Shape3)> {
        tiling.map(|t| (t.patch, t.stride))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterConfig {
    pub checkpoint: Option<PathBuf>,
    pub moving: Option<PathBuf>,
    pub fixed: Option<PathBuf>,
    /// Label map of the moving image; warped alongside it when given.
    pub moving_seg: Option<PathBuf>,
    pub tiling: Option<Tiling>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub checkpoint: Option<PathBuf>,
    pub tiling: Option<Tiling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Replaces every per-check tolerance.
    pub tolerance: Option<f64>,
    pub include_model: bool,
    /// Negates the analytic CC gradient, to show the check can fail.
    pub flip_cc_sign: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            tolerance: None,
            include_model: true,
            flip_cc_sign: false,
        }
    }
}

/// Values given on the command line; `None` leaves the file or default in place.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub moving: Option<PathBuf>,
    pub fixed: Option<PathBuf>,
    pub moving_seg: Option<PathBuf>,
    pub count: Option<usize>,
    pub steps: Option<usize>,
    pub tolerance: Option<f64>,
    pub skip_model: bool,
    pub flip_cc_sign: bool,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Loads the file if given, applies `flags`, and pushes the root seed and
    /// output directory into the training section.
    pub fn resolve(path: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(o) = &flags.out {
            cfg.out = o.clone();
        }
        cfg.deterministic |= flags.deterministic;
        if let Some(d) = &flags.dataset {
            cfg.dataset = Some(d.clone());
        }
        if let Some(c) = &flags.checkpoint {
            cfg.register.checkpoint = Some(c.clone());
            cfg.evaluate.checkpoint = Some(c.clone());
        }
        if let Some(m) = &flags.moving {
            cfg.register.moving = Some(m.clone());
        }
        if let Some(f) = &flags.fixed {
            cfg.register.fixed = Some(f.clone());
        }
        if let Some(m) = &flags.moving_seg {
            cfg.register.moving_seg = Some(m.clone());
        }
        if let Some(n) = flags.count {
            cfg.synth.count = n;
        }
        if let Some(n) = flags.steps {
            cfg.train.max_steps = Some(n);
        }
        if let Some(t) = flags.tolerance {
            cfg.gradcheck.tolerance = Some(t);
        }
        cfg.gradcheck.include_model &= !flags.skip_model;
        cfg.gradcheck.flip_cc_sign |= flags.flip_cc_sign;

        cfg.train.seed = cfg.seed;
        cfg.train.deterministic = cfg.deterministic;
        cfg.train.checkpoint_dir = Some(cfg.out.clone());
        Ok(cfg)
    }
}

/// Resolves a relative input path against `TUNET_DATA_ROOT` when that is set.
pub fn input_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

/// The named input, or an `InvalidConfig` naming the missing key.
pub fn required(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    p.as_deref()
        .map(input_path)
        .ok_or_else(|| Error::InvalidConfig(format!("missing `{key}` (config file or flag)")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::resolve(None, &Overrides::default()).unwrap();
        let back: RunConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 5\n[synth]\ncount = 7\n[train]\nepochs = 2\n").unwrap();

        let from_file = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!((from_file.seed, from_file.synth.count), (5, 7));
        assert_eq!(from_file.train.epochs, 2);
        assert_eq!(from_file.train.learning_rate, 1e-4);
        assert_eq!(from_file.train.seed, 5);

        let flags = Overrides { seed: Some(9), count: Some(1), ..Overrides::default() };
        let flagged = RunConfig::resolve(Some(&path), &flags).unwrap();
        assert_eq!((flagged.seed, flagged.synth.count, flagged.train.seed), (9, 1, 9));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "sed = 5\n").unwrap();
        assert!(matches!(
            RunConfig::resolve(Some(&path), &Overrides::default()),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            RunConfig::resolve(Some(&dir.path().join("none.toml")), &Overrides::default()),
            Err(Error::MissingFile(_))
        ));
    }
}
