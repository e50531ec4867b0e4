//! Stage-1 pretraining. The supervised autoencoder reconstructs through
//! `decoder(embed(y) ⊙ encode(x))`, so the label embedding is learned
//! together with the encoder/decoder pair; the unsupervised baseline
//! reconstructs through `decoder(encode(x))` and derives per-class latent
//! Gaussians afterwards.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tch::{Kind, Tensor};

use crate::data::{ImageBatch, LabelBatch, RangeTag};
use crate::error::{Error, Result};
use crate::nets::{
    build_decoder, build_embedding, build_encoder, load_network, save_networks, ArchitectureConfig, Manifest,
    NetworkHandle,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng;

pub const SUPERVISED_TAG: &str = "ae_supervised";
pub const UNSUPERVISED_TAG: &str = "ae_unsupervised";

#[derive(Debug)]
pub struct SupervisedAutoencoder {
    pub encoder: NetworkHandle,
    pub embedding: NetworkHandle,
    pub decoder: NetworkHandle,
}

impl SupervisedAutoencoder {
    pub fn new(arch: &ArchitectureConfig, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            encoder: build_encoder(arch, rng)?,
            embedding: build_embedding(arch, num_classes, rng)?,
            decoder: build_decoder(arch, rng)?,
        })
    }

    pub fn labeled_latents(&self, images: &Tensor, labels: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.embedding.forward(labels, train)? * self.encoder.forward(images, train)?)
    }

    pub fn reconstruct(&self, images: &Tensor, labels: &Tensor, train: bool) -> Result<Tensor> {
        self.decoder.forward(&self.labeled_latents(images, labels, train)?, train)
    }

    fn trainable_weights(&self) -> Vec<(String, Tensor)> {
        named(&[("encoder", &self.encoder), ("embedding", &self.embedding), ("decoder", &self.decoder)])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = Manifest::default();
        manifest.set("tag", SUPERVISED_TAG);
        save_networks(
            dir,
            manifest,
            &[("encoder", &self.encoder), ("embedding", &self.embedding), ("decoder", &self.decoder)],
        )
    }
}

#[derive(Debug)]
pub struct UnsupervisedAutoencoder {
    pub encoder: NetworkHandle,
    pub decoder: NetworkHandle,
}

impl UnsupervisedAutoencoder {
    pub fn new(arch: &ArchitectureConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            encoder: build_encoder(arch, rng)?,
            decoder: build_decoder(arch, rng)?,
        })
    }

    pub fn reconstruct(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        self.decoder.forward(&self.encoder.forward(images, train)?, train)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = Manifest::default();
        manifest.set("tag", UNSUPERVISED_TAG);
        save_networks(dir, manifest, &[("encoder", &self.encoder), ("decoder", &self.decoder)])
    }
}

/// A stage-1 checkpoint of either flavor.
#[derive(Debug)]
pub enum Stage1 {
    Supervised(SupervisedAutoencoder),
    Unsupervised(UnsupervisedAutoencoder),
}

impl Stage1 {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        match manifest.require("tag")? {
            SUPERVISED_TAG => Ok(Stage1::Supervised(SupervisedAutoencoder {
                encoder: load_network(dir, &manifest, "encoder")?,
                embedding: load_network(dir, &manifest, "embedding")?,
                decoder: load_network(dir, &manifest, "decoder")?,
            })),
            UNSUPERVISED_TAG => Ok(Stage1::Unsupervised(UnsupervisedAutoencoder {
                encoder: load_network(dir, &manifest, "encoder")?,
                decoder: load_network(dir, &manifest, "decoder")?,
            })),
            other => Err(Error::CheckpointIncompatible(format!("`{other}` is not a stage-1 checkpoint"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Stage1::Supervised(_) => SUPERVISED_TAG,
            Stage1::Unsupervised(_) => UNSUPERVISED_TAG,
        }
    }

    pub fn encoder(&self) -> &NetworkHandle {
        match self {
            Stage1::Supervised(ae) => &ae.encoder,
            Stage1::Unsupervised(ae) => &ae.encoder,
        }
    }

    pub fn decoder(&self) -> &NetworkHandle {
        match self {
            Stage1::Supervised(ae) => &ae.decoder,
            Stage1::Unsupervised(ae) => &ae.decoder,
        }
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        self.decoder().arch()
    }
}

fn named(nets: &[(&str, &NetworkHandle)]) -> Vec<(String, Tensor)> {
    nets.iter()
        .flat_map(|(prefix, net)| {
            net.trainable_weights()
                .into_iter()
                .map(move |(n, t)| (format!("{prefix}.{n}"), t))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Per-epoch mean reconstruction error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    /// Mean squared error over the training set before the first update.
    pub initial_mse: f64,
    pub epoch_mse: Vec<f64>,
}

impl TrainingLog {
    pub fn final_mse(&self) -> Option<f64> {
        self.epoch_mse.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mse\n");
        for (i, mse) in self.epoch_mse.iter().enumerate() {
            let _ = writeln!(out, "{},{mse}", i + 1);
        }
        out
    }
}

fn check_scaled(images: &ImageBatch) -> Result<()> {
    if images.range() != RangeTag::ScaledMinus1To1 {
        return Err(Error::InvalidConfig("autoencoder input must be preprocessed to [-1, 1]".into()));
    }
    Ok(())
}

/// Shuffled mini-batch index lists covering `0..n` once.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    let mut order: Vec<i64> = (0..n as i64).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(Tensor::from_slice).collect()
}

/// Mean over samples of a per-sample reconstruction error, evaluated in
/// inference mode.
fn dataset_mse(data: &Tensor, batch_size: usize, recon: impl Fn(&Tensor, &Tensor) -> Result<Tensor>) -> Result<f64> {
    let n = data.size()[0];
    let mut total = 0.0;
    let mut start = 0;
    tch::no_grad(|| -> Result<()> {
        while start < n {
            let len = (batch_size as i64).min(n - start);
            let idx = Tensor::arange_start(start, start + len, (Kind::Int64, tch::Device::Cpu));
            let x = data.index_select(0, &idx);
            let err = (recon(&x, &idx)? - &x).square().mean(Kind::Double).double_value(&[]);
            total += err * len as f64;
            start += len;
        }
        Ok(())
    })?;
    Ok(total / n as f64)
}

fn run_pretraining(
    data: &Tensor,
    params: Vec<(String, Tensor)>,
    cfg: &PretrainConfig,
    recon: impl Fn(&Tensor, &Tensor, bool) -> Result<Tensor>,
) -> Result<TrainingLog> {
    let n = data.size()[0] as usize;
    let initial_mse = dataset_mse(data, cfg.batch_size, |x, idx| recon(x, idx, false))?;
    let mut log = TrainingLog {
        initial_mse,
        epoch_mse: Vec::with_capacity(cfg.epochs),
    };
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut adam = Adam::new(params, cfg.adam);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        for idx in epoch_batches(n, cfg.batch_size, &mut rng) {
            let x = data.index_select(0, &idx);
            let loss = (recon(&x, &idx, true)? - &x).square().mean(Kind::Float);
            let v = loss.double_value(&[]);
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            adam.backward_step(&loss);
            sum += v * idx.size()[0] as f64;
            step += 1;
        }
        log.epoch_mse.push(sum / n as f64);
    }
    Ok(log)
}

/// Trains encoder, embedding and decoder jointly on mean squared
/// reconstruction error. Frozen sub-networks are left out of the update.
pub fn pretrain_supervised_ae(
    ae: &SupervisedAutoencoder,
    images: &ImageBatch,
    labels: &LabelBatch,
    cfg: &PretrainConfig,
) -> Result<TrainingLog> {
    check_scaled(images)?;
    if images.len() != labels.len() {
        return Err(Error::LabelMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let data = images.to_tensor();
    let all_labels = labels.to_tensor();
    run_pretraining(&data, ae.trainable_weights(), cfg, |x, idx, train| {
        ae.reconstruct(x, &all_labels.index_select(0, idx), train)
    })
}

pub fn pretrain_unsupervised_ae(
    ae: &UnsupervisedAutoencoder,
    images: &ImageBatch,
    cfg: &PretrainConfig,
) -> Result<TrainingLog> {
    check_scaled(images)?;
    let data = images.to_tensor();
    let params = named(&[("encoder", &ae.encoder), ("decoder", &ae.decoder)]);
    run_pretraining(&data, params, cfg, |x, _, train| ae.reconstruct(x, train))
}

/// Runs `f` over `images` in inference mode, `batch_size` at a time, and
/// concatenates the outputs.
pub fn batched_inference(
    images: &Tensor,
    batch_size: usize,
    f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let n = images.size()[0];
    let mut outs = Vec::new();
    tch::no_grad(|| -> Result<()> {
        let mut start = 0;
        while start < n {
            let len = (batch_size as i64).min(n - start);
            let idx = Tensor::arange_start(start, start + len, (Kind::Int64, tch::Device::Cpu));
            outs.push(f(&images.index_select(0, &idx), &idx)?);
            start += len;
        }
        Ok(())
    })?;
    Ok(Tensor::cat(&outs, 0))
}

/// Per-class latent Gaussians of the unsupervised baseline.
#[derive(Debug, Clone)]
pub struct ClassGaussianModel {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Diagonal regularizer added before sampling, per class.
    pub epsilons: Vec<f64>,
    pub normality: Vec<NormalityDiagnostic>,
}

/// Moment-based normality check of one class's latents (reported, never
/// enforced).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalityDiagnostic {
    /// Mean absolute skewness across latent coordinates.
    pub mean_abs_skewness: f64,
    /// Mean absolute excess kurtosis across latent coordinates.
    pub mean_abs_excess_kurtosis: f64,
}

/// `max(1e-6 · trace(Σ) / dim, 1e-8)`
pub fn covariance_epsilon(cov: &DMatrix<f64>) -> f64 {
    (1e-6 * cov.trace() / cov.nrows() as f64).max(1e-8)
}

/// Tensor `[n, d]` → rows as f64 vectors.
pub(crate) fn tensor_rows(t: &Tensor) -> Result<Vec<DVector<f64>>> {
    let (n, d) = t.size2()?;
    let flat = Vec::<f64>::try_from(t.to_kind(Kind::Double).contiguous().flatten(0, -1))?;
    Ok((0..n as usize)
        .map(|i| DVector::from_column_slice(&flat[i * d as usize..(i + 1) * d as usize]))
        .collect())
}

/// Sample mean and unbiased covariance (zero matrix for a single sample).
pub(crate) fn mean_and_covariance(rows: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let n = rows.len();
    let mean = rows.iter().fold(DVector::zeros(d), |acc, r| acc + r) / n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for r in rows {
            let c = r - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;
    }
    // exact symmetry
    let cov = (&cov + cov.transpose()) * 0.5;
    (mean, cov)
}

fn normality(rows: &[DVector<f64>], mean: &DVector<f64>) -> NormalityDiagnostic {
    let d = mean.len();
    let n = rows.len() as f64;
    let (mut skew, mut kurt) = (0.0, 0.0);
    for j in 0..d {
        let m2 = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
        if m2 <= 0.0 {
            continue;
        }
        let m3 = rows.iter().map(|r| (r[j] - mean[j]).powi(3)).sum::<f64>() / n;
        let m4 = rows.iter().map(|r| (r[j] - mean[j]).powi(4)).sum::<f64>() / n;
        skew += (m3 / m2.powf(1.5)).abs();
        kurt += (m4 / (m2 * m2) - 3.0).abs();
    }
    NormalityDiagnostic {
        mean_abs_skewness: skew / d as f64,
        mean_abs_excess_kurtosis: kurt / d as f64,
    }
}

impl ClassGaussianModel {
    /// Fits one Gaussian per class from latent rows `[n, d]`.
    pub fn from_latents(latents: &Tensor, labels: &LabelBatch) -> Result<Self> {
        let rows = tensor_rows(latents)?;
        if rows.len() != labels.len() {
            return Err(Error::LabelMismatch {
                images: rows.len(),
                labels: labels.len(),
            });
        }
        let mut model = ClassGaussianModel {
            means: Vec::new(),
            covariances: Vec::new(),
            epsilons: Vec::new(),
            normality: Vec::new(),
        };
        for class in 0..labels.num_classes() {
            let class_rows: Vec<DVector<f64>> = labels.indices_of(class).into_iter().map(|i| rows[i].clone()).collect();
            if class_rows.is_empty() {
                return Err(Error::EmptyClass(class));
            }
            let (mean, cov) = mean_and_covariance(&class_rows);
            model.epsilons.push(covariance_epsilon(&cov));
            model.normality.push(normality(&class_rows, &mean));
            model.means.push(mean);
            model.covariances.push(cov);
        }
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }
}

/// Encodes `images` and fits the per-class Gaussians.
pub fn fit_class_gaussians(
    encoder: &NetworkHandle,
    images: &ImageBatch,
    labels: &LabelBatch,
) -> Result<ClassGaussianModel> {
    check_scaled(images)?;
    let latents = batched_inference(&images.to_tensor(), 256, |x, _| encoder.forward(x, false))?;
    ClassGaussianModel::from_latents(&latents, labels)
}

/// `n` draws from `N(μ_k, Σ_k + εI)` as a `[n, d]` float tensor.
pub fn sample_labeled_latents(
    model: &ClassGaussianModel,
    class: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if class >= model.num_classes() {
        return Err(Error::OutOfRangeLabel {
            label: class as i64,
            num_classes: model.num_classes(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    let d = model.latent_dim();
    let regularized = &model.covariances[class] + DMatrix::identity(d, d) * model.epsilons[class];
    let chol = regularized.cholesky().ok_or(Error::NotPsd(class))?;
    let l = chol.l();
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let e = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let sample = &model.means[class] + &l * e;
        out.extend(sample.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_slice(&out).view([n as i64, d as i64]))
}
