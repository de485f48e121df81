use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::Deserialize;

use itse::autodiff::OpKind;
use itse::lmdf::Guidance;
use itse::model::ModelConfig;
use itse::tensor::DType;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Check,
    Overfit,
    Infer,
    Eval,
    DumpFixtures,
}

/// Referring segmentation toolkit: self-checks, desk training, inference and
/// evaluation.
#[derive(Debug, Default, Parser)]
#[command(name = "itse", version)]
pub struct Flags {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// JSON file with any of the flag fields; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub dilations: Option<Vec<usize>>,
    #[arg(long)]
    pub dtype: Option<DType>,
    /// Guidance ablation: maxpool, share or none.
    #[arg(long)]
    pub ablation: Option<Guidance>,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Scene spec JSON, or a built-in scene: single-shape, two-square.
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// PPM frames in clip order, or one directory of them (sorted by name).
    #[arg(long, num_args = 1..)]
    pub frames: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub query: Option<String>,
    /// Directory of predicted PGM masks.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Directory of ground-truth PGM masks.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Negate one op's backward rule during `check`.
    #[arg(long, hide = true)]
    pub inject_fault: Option<OpKind>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub width: Option<usize>,
    pub dilations: Option<Vec<usize>>,
    pub dtype: Option<DType>,
    pub ablation: Option<String>,
    pub vocab: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub scene: Option<String>,
    pub out: Option<PathBuf>,
    pub frames: Option<Vec<PathBuf>>,
    pub query: Option<String>,
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
}

/// Flags merged over the config file.
#[derive(Debug)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub width: Option<usize>,
    pub dilations: Option<Vec<usize>>,
    pub dtype: Option<DType>,
    pub ablation: Option<Guidance>,
    pub vocab: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub scene: Option<String>,
    pub out: Option<PathBuf>,
    pub frames: Option<Vec<PathBuf>>,
    pub query: Option<String>,
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub inject_fault: Option<OpKind>,
}

impl RunConfig {
    pub fn resolve(flags: Flags) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str::<FileConfig>(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        let ablation = match file.ablation {
            Some(s) => Some(s.parse::<Guidance>().map_err(|e| CliError::Usage(e.to_string()))?),
            None => None,
        };
        let mode = flags
            .mode
            .or(file.mode)
            .ok_or_else(|| CliError::Usage("--mode is required".into()))?;
        Ok(Self {
            mode,
            seed: flags.seed.or(file.seed).unwrap_or(42),
            steps: flags.steps.or(file.steps),
            lr: flags.lr.or(file.lr),
            width: flags.width.or(file.width),
            dilations: flags.dilations.or(file.dilations),
            dtype: flags.dtype.or(file.dtype),
            ablation: flags.ablation.or(ablation),
            vocab: flags.vocab.or(file.vocab),
            ckpt: flags.ckpt.or(file.ckpt),
            scene: flags.scene.or(file.scene),
            out: flags.out.or(file.out),
            frames: flags.frames.or(file.frames),
            query: flags.query.or(file.query),
            pred: flags.pred.or(file.pred),
            gt: flags.gt.or(file.gt),
            inject_fault: flags.inject_fault,
        })
    }

    /// `base` with every model flag that was given applied.
    pub fn model_config(&self, base: ModelConfig) -> ModelConfig {
        let mut cfg = base;
        if let Some(w) = self.width {
            cfg.width = w;
        }
        if let Some(d) = &self.dilations {
            cfg.dilations = d.clone();
        }
        if let Some(t) = self.dtype {
            cfg.dtype = t;
        }
        if let Some(g) = self.ablation {
            cfg.guidance = g;
        }
        cfg
    }

    pub fn need<'a, T>(&self, value: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("--mode {} needs --{flag}", self.mode_name())))
    }

    /// The output directory, created if missing.
    pub fn out_dir(&self) -> Result<&Path, CliError> {
        let out = self.need(&self.out, "out")?;
        std::fs::create_dir_all(out).map_err(itse::error::Error::from)?;
        Ok(out)
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            Mode::Check => "check",
            Mode::Overfit => "overfit",
            Mode::Infer => "infer",
            Mode::Eval => "eval",
            Mode::DumpFixtures => "dump-fixtures",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"mode":"overfit","seed":7,"steps":5,"ablation":"maxpool","width":16}"#).unwrap();
        let flags = Flags::parse_from(["itse", "--config", path.to_str().unwrap(), "--steps", "9"]);
        let cfg = RunConfig::resolve(flags).unwrap();
        assert_eq!(cfg.mode, Mode::Overfit);
        assert_eq!((cfg.seed, cfg.steps, cfg.width), (7, Some(9), Some(16)));
        assert_eq!(cfg.ablation, Some(Guidance::MaxPool));
    }

    #[test]
    fn seed_defaults_to_42_and_mode_is_required() {
        let cfg = RunConfig::resolve(Flags::parse_from(["itse", "--mode", "check"])).unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(matches!(RunConfig::resolve(Flags::parse_from(["itse"])), Err(CliError::Usage(_))));
    }

    #[test]
    fn dilation_list_and_model_overrides() {
        let flags = Flags::parse_from(["itse", "--mode", "overfit", "--dilations", "1,2", "--dtype", "f64"]);
        let cfg = RunConfig::resolve(flags).unwrap();
        let m = cfg.model_config(ModelConfig::default());
        assert_eq!(m.dilations, vec![1, 2]);
        assert_eq!(m.dtype, DType::F64);
        assert_eq!(m.width, ModelConfig::default().width);
    }

    #[test]
    fn unknown_config_field_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"mode":"check","bogus":1}"#).unwrap();
        let flags = Flags::parse_from(["itse", "--config", path.to_str().unwrap()]);
        assert!(matches!(RunConfig::resolve(flags), Err(CliError::Usage(_))));
    }
}
