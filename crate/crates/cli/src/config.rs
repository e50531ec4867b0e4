//! Run configuration: a TOML file with one table per pipeline stage. Unknown
//! keys are rejected and every error names the offending line.

use std::path::{Path, PathBuf};

use bagan::data::DatasetSpec;
use bagan::losses::{BaganGpVersion, InterpolationMode, LossConfig, LossVariant};
use bagan::nets::ArchitectureConfig;
use bagan::optim::AdamConfig;
use bagan::trainer::{InitMode, TrainConfig};
use bagan::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub architecture: ArchitectureSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            architecture: ArchitectureSection::default(),
            pretrain: PretrainSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub name: String,
    pub class_names: Vec<String>,
    /// Expected source image shape `[height, width, channels]`; empty for any.
    pub image_shape: Vec<usize>,
    /// Image-folder root or tensor container.
    pub source: Option<PathBuf>,
    pub schedule: Option<PathBuf>,
    /// Held-out reals for FID and grids.
    pub validation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureSection {
    pub latent_dim: usize,
    pub channels: usize,
    pub leaky_slope: f64,
    pub batch_norm_in_generator_only: bool,
    pub widths: [usize; 4],
    pub init_std: f64,
}

impl Default for ArchitectureSection {
    fn default() -> Self {
        let a = ArchitectureConfig::default();
        Self {
            latent_dim: a.latent_dim,
            channels: a.channels,
            leaky_slope: a.leaky_slope,
            batch_norm_in_generator_only: a.batch_norm_in_generator_only,
            widths: a.widths,
            init_std: a.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// `supervised` or `unsupervised`.
    pub mode: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            mode: "supervised".into(),
            epochs: 30,
            batch_size: 128,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// 0 picks the variant default.
    pub n_critic: usize,
    pub epochs: usize,
    /// `both`, `generator_only` or `none`.
    pub init_mode: String,
    pub checkpoint_every: usize,
    /// Stage-1 checkpoint directory.
    pub stage1: Option<PathBuf>,
    pub resume: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            n_critic: 0,
            epochs: t.epochs,
            init_mode: t.init_mode.name().into(),
            checkpoint_every: t.checkpoint_every,
            stage1: None,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub variant: String,
    pub lambda: f64,
    /// `model` or `noise`.
    pub interpolation: String,
    pub bagan_gp_version: String,
    pub penalize_label_path: bool,
    pub wrong_label_term: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            variant: l.variant.name().into(),
            lambda: l.lambda,
            interpolation: "model".into(),
            bagan_gp_version: l.bagan_gp_version.to_string(),
            penalize_label_path: l.penalize_label_path,
            wrong_label_term: l.wrong_label_term,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// `classifier` (trained on the training set) or `pretrained`.
    pub extractor: String,
    /// TorchScript file for `pretrained`, or a saved classifier directory.
    pub extractor_weights: Option<PathBuf>,
    pub classifier_epochs: usize,
    pub classifier_widths: [usize; 4],
    pub feature_dim: usize,
    /// 0 matches each validation-class count.
    pub samples_per_class: usize,
    pub grid_rows: usize,
    /// `pca` or `tsne`.
    pub projection: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            extractor: "classifier".into(),
            extractor_weights: None,
            classifier_epochs: 10,
            classifier_widths: [8, 16, 32, 32],
            feature_dim: 64,
            samples_per_class: 0,
            grid_rows: 3,
            projection: "pca".into(),
        }
    }
}

/// 1-based line of byte `offset` in `text`.
fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line defining `key` inside `[section]` (top level when empty).
fn line_of_key(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
        } else if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start)).unwrap_or(0);
            Error::Parse {
                path: path.to_path_buf(),
                msg: format!("line {line}: {}", e.message()),
            }
        })?;
        cfg.validate().map_err(|(section, key, msg)| {
            let line = line_of_key(text, section, key)
                .map(|l| format!("line {l}: "))
                .unwrap_or_default();
            Error::Parse {
                path: path.to_path_buf(),
                msg: format!("{line}{msg}"),
            }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Checks every string-typed choice, reporting `(section, key, message)`.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, &'static str, String)> {
        fn check<T>(r: Result<T>, section: &'static str, key: &'static str) -> std::result::Result<T, (&'static str, &'static str, String)> {
            r.map_err(|e| (section, key, e.to_string()))
        }
        check(self.loss.variant.parse::<LossVariant>(), "loss", "variant")?;
        check(self.loss.interpolation.parse::<InterpolationMode>(), "loss", "interpolation")?;
        check(self.loss.bagan_gp_version.parse::<BaganGpVersion>(), "loss", "bagan_gp_version")?;
        check(self.loss_config(), "loss", "lambda")?;
        if self.train.batch_size < 2 {
            return Err(("train", "batch_size", "batch_size must be >= 2".into()));
        }
        check(self.init_mode(), "train", "init_mode")?;
        check(self.architecture_config().validate(), "architecture", "widths")?;
        check(self.stage1_supervised(), "pretrain", "mode")?;
        if !matches!(self.eval.extractor.as_str(), "classifier" | "pretrained") {
            return Err(("eval", "extractor", format!("unknown extractor `{}`", self.eval.extractor)));
        }
        if !matches!(self.eval.projection.as_str(), "pca" | "tsne") {
            return Err(("eval", "projection", format!("unknown projection `{}`", self.eval.projection)));
        }
        if !self.dataset.image_shape.is_empty() && self.dataset.image_shape.len() != 3 {
            return Err(("dataset", "image_shape", "image_shape needs [height, width, channels]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn architecture_config(&self) -> ArchitectureConfig {
        let a = &self.architecture;
        ArchitectureConfig {
            latent_dim: a.latent_dim,
            channels: a.channels,
            leaky_slope: a.leaky_slope,
            batch_norm_in_generator_only: a.batch_norm_in_generator_only,
            widths: a.widths,
            init_std: a.init_std,
        }
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let l = &self.loss;
        let interpolation = l.interpolation.parse::<InterpolationMode>()?;
        let cfg = LossConfig {
            variant: l.variant.parse::<LossVariant>()?,
            lambda: l.lambda,
            interpolation,
            bagan_gp_version: l.bagan_gp_version.parse::<BaganGpVersion>()?,
            penalize_label_path: l.penalize_label_path,
            wrong_label_term: l.wrong_label_term,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn init_mode(&self) -> Result<InitMode> {
        self.train.init_mode.parse()
    }

    pub fn stage1_supervised(&self) -> Result<bool> {
        match self.pretrain.mode.as_str() {
            "supervised" => Ok(true),
            "unsupervised" => Ok(false),
            other => Err(Error::Config(format!("unknown pretraining mode `{other}`"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                ..Default::default()
            },
            n_critic: (t.n_critic > 0).then_some(t.n_critic),
            epochs: t.epochs,
            seed: self.seed,
            loss: self.loss_config()?,
            init_mode: self.init_mode()?,
            checkpoint_every: t.checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_spec(&self, source: &Path) -> DatasetSpec {
        let shape = match self.dataset.image_shape.as_slice() {
            [h, w, c] => (*h, *w, *c),
            _ => (0, 0, 0),
        };
        DatasetSpec {
            name: self.dataset.name.clone(),
            class_names: self.dataset.class_names.clone(),
            image_shape: shape,
            source: source.to_path_buf(),
        }
    }
}
