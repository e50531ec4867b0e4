//! Feature extractors for FID and feature-space projections: a small
//! convolutional classifier trained in-process, and a loader for externally
//! supplied TorchScript backbones.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use tch::nn::{self, Module, ModuleT};
use tch::{Device, Kind, Tensor};

use crate::autoencoder::batched_inference;
use crate::data::{ImageBatch, LabelBatch, RangeTag};
use crate::error::{Error, Result};
use crate::nets::Manifest;
use crate::optim::{Adam, AdamConfig};
use crate::rng;

pub trait FeatureExtractor {
    fn extractor_id(&self) -> String;

    /// One row of features per image. Images must be preprocessed.
    fn features(&self, images: &ImageBatch) -> Result<DMatrix<f64>>;
}

/// Rank-2 tensor as a row-major `f64` matrix.
pub fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let t = t.to_kind(Kind::Double).contiguous();
    let (n, f) = (t.size()[0] as usize, t.size()[1] as usize);
    let v = Vec::<f64>::try_from(&t.view([-1]))?;
    Ok(DMatrix::from_row_slice(n, f, &v))
}

fn require_scaled(images: &ImageBatch) -> Result<()> {
    if images.range() != RangeTag::ScaledMinus1To1 {
        return Err(Error::InvalidConfig("extractor input must be preprocessed".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub widths: [usize; 4],
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            widths: [8, 16, 32, 32],
            feature_dim: 64,
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Conv classifier whose penultimate activations serve as FID features.
pub struct ClassifierExtractor {
    vs: nn::VarStore,
    trunk: nn::Sequential,
    feat: nn::Linear,
    head: nn::Linear,
    channels: usize,
    widths: [usize; 4],
    feature_dim: usize,
    num_classes: usize,
}

impl std::fmt::Debug for ClassifierExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierExtractor")
            .field("channels", &self.channels)
            .field("widths", &self.widths)
            .field("feature_dim", &self.feature_dim)
            .field("num_classes", &self.num_classes)
            .finish()
    }
}

const CLASSIFIER_TAG: &str = "classifier";
const CLASSIFIER_FILE: &str = "classifier.safetensors";

impl ClassifierExtractor {
    pub fn new(
        channels: usize,
        widths: [usize; 4],
        feature_dim: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_classes < 2 || feature_dim == 0 || widths.contains(&0) {
            return Err(Error::InvalidConfig("classifier needs ≥ 2 classes and nonzero widths".into()));
        }
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let conv_cfg = nn::ConvConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        let mut trunk = nn::seq();
        let mut c_in = channels as i64;
        for (i, &w) in widths.iter().enumerate() {
            trunk = trunk
                .add(nn::conv2d(&root / format!("conv{i}"), c_in, w as i64, 4, conv_cfg))
                .add_fn(|x| x.leaky_relu());
            c_in = w as i64;
        }
        let flat = 16 * widths[3] as i64;
        let trunk = trunk.add_fn(move |x| x.view([-1, flat]));
        let feat = nn::linear(&root / "feat", flat, feature_dim as i64, Default::default());
        let head = nn::linear(&root / "head", feature_dim as i64, num_classes as i64, Default::default());
        let this = Self {
            vs,
            trunk,
            feat,
            head,
            channels,
            widths,
            feature_dim,
            num_classes,
        };
        this.reinitialize(rng);
        Ok(this)
    }

    /// He-normal kernels, zero biases, drawn in sorted-name order.
    fn reinitialize(&self, rng: &mut impl Rng) {
        let mut vars: Vec<(String, Tensor)> = self.vs.variables().into_iter().collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        tch::no_grad(|| {
            for (name, mut t) in vars {
                if name.ends_with(".bias") {
                    let _ = t.zero_();
                } else {
                    let size = t.size();
                    let fan_in: i64 = size[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let init = rng::normal(rng, &size, Kind::Float) * std;
                    t.copy_(&init);
                }
            }
        });
    }

    /// Trains a fresh classifier on preprocessed images.
    pub fn train(images: &ImageBatch, labels: &LabelBatch, cfg: &ClassifierConfig) -> Result<Self> {
        require_scaled(images)?;
        if images.len() != labels.len() {
            return Err(Error::LabelMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        let mut rng = rng::seeded(cfg.seed);
        let this = Self::new(
            images.image_shape().2,
            cfg.widths,
            cfg.feature_dim,
            labels.num_classes(),
            &mut rng,
        )?;
        let x = images.to_tensor();
        let y = labels.to_tensor();
        let mut adam = Adam::new(
            this.vs.trainable_variables().into_iter().enumerate().map(|(i, t)| (i.to_string(), t)).collect(),
            AdamConfig {
                lr: cfg.lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        );
        for _ in 0..cfg.epochs {
            for idx in crate::autoencoder::epoch_batches(images.len(), cfg.batch_size, &mut rng) {
                let logits = this.logits_t(&x.index_select(0, &idx), true);
                let loss = logits.cross_entropy_for_logits(&y.index_select(0, &idx));
                adam.backward_step(&loss);
            }
        }
        Ok(this)
    }

    fn features_t(&self, x: &Tensor, train: bool) -> Tensor {
        self.feat.forward(&self.trunk.forward_t(x, train)).leaky_relu()
    }

    fn logits_t(&self, x: &Tensor, train: bool) -> Tensor {
        self.head.forward(&self.features_t(x, train))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Arg-max class per image.
    pub fn classify(&self, images: &ImageBatch) -> Result<Vec<i64>> {
        require_scaled(images)?;
        let out = tch::no_grad(|| batched_inference(&images.to_tensor(), 256, |x, _| Ok(self.logits_t(x, false))))?;
        Ok(Vec::<i64>::try_from(out.argmax(1, false))?)
    }

    /// Fraction of `images` classified as `labels`.
    pub fn accuracy(&self, images: &ImageBatch, labels: &[i64]) -> Result<f64> {
        let pred = self.classify(images)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut m = Manifest::default();
        m.set("tag", CLASSIFIER_TAG);
        m.set("channels", self.channels);
        m.set(
            "widths",
            self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        m.set("feature_dim", self.feature_dim);
        m.set("num_classes", self.num_classes);
        m.save(dir)?;
        self.vs.save(dir.join(CLASSIFIER_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::load(dir)?;
        if m.get("tag") != Some(CLASSIFIER_TAG) {
            return Err(Error::ExtractorUnavailable(format!("{} holds no classifier", dir.display())));
        }
        let widths: Vec<usize> = m
            .require("widths")?
            .split(',')
            .map(|w| w.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::CheckpointIncompatible("malformed classifier widths".into()))?;
        let widths: [usize; 4] = widths
            .try_into()
            .map_err(|_| Error::CheckpointIncompatible("classifier needs four widths".into()))?;
        let mut this = Self::new(
            m.parse("channels")?,
            widths,
            m.parse("feature_dim")?,
            m.parse("num_classes")?,
            &mut rng::seeded(0),
        )?;
        this.vs.load(dir.join(CLASSIFIER_FILE))?;
        Ok(this)
    }
}

impl FeatureExtractor for ClassifierExtractor {
    fn extractor_id(&self) -> String {
        format!(
            "classifier-c{}-w{}-{}-{}-{}-f{}",
            self.channels, self.widths[0], self.widths[1], self.widths[2], self.widths[3], self.feature_dim
        )
    }

    fn features(&self, images: &ImageBatch) -> Result<DMatrix<f64>> {
        require_scaled(images)?;
        let out =
            tch::no_grad(|| batched_inference(&images.to_tensor(), 256, |x, _| Ok(self.features_t(x, false))))?;
        to_matrix(&out)
    }
}

/// Externally supplied backbone exported as TorchScript. It receives
/// `N × C × 64 × 64` inputs in `[-1, 1]` and must return `N × F` features
/// (higher-rank outputs are flattened).
pub struct TorchScriptExtractor {
    module: tch::CModule,
    path: PathBuf,
}

impl std::fmt::Debug for TorchScriptExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TorchScriptExtractor").field("path", &self.path).finish()
    }
}

impl TorchScriptExtractor {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::ExtractorUnavailable(format!("no weights at {}", path.display())));
        }
        let mut module = tch::CModule::load(path)
            .map_err(|e| Error::ExtractorUnavailable(format!("{}: {e}", path.display())))?;
        module.set_eval();
        Ok(Self {
            module,
            path: path.to_path_buf(),
        })
    }
}

impl FeatureExtractor for TorchScriptExtractor {
    fn extractor_id(&self) -> String {
        format!(
            "torchscript:{}",
            self.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        )
    }

    fn features(&self, images: &ImageBatch) -> Result<DMatrix<f64>> {
        require_scaled(images)?;
        let out = tch::no_grad(|| {
            batched_inference(&images.to_tensor(), 64, |x, _| {
                let y = self.module.forward_ts(&[x])?;
                Ok(y.flatten(1, -1))
            })
        })?;
        to_matrix(&out)
    }
}
