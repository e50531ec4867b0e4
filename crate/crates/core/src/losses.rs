//! Adversarial objectives. Critics emit logits; every log-sigmoid is taken
//! inside the loss in its stable form, so `-log σ(x) = softplus(-x)` and
//! `-log(1 - σ(x)) = softplus(x)`.

use rand::Rng;
use tch::{Kind, Tensor};

use crate::data::LabelBatch;
use crate::error::{Error, Result};
use crate::nets::{DiscriminatorAssembly, GeneratorAssembly};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossVariant {
    OriginalGan,
    Wgan,
    WganGp,
    Dragan,
    Cdragan,
    BaganGp,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::OriginalGan,
        LossVariant::Wgan,
        LossVariant::WganGp,
        LossVariant::Dragan,
        LossVariant::Cdragan,
        LossVariant::BaganGp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::OriginalGan => "original_gan",
            LossVariant::Wgan => "wgan",
            LossVariant::WganGp => "wgan_gp",
            LossVariant::Dragan => "dragan",
            LossVariant::Cdragan => "cdragan",
            LossVariant::BaganGp => "bagan_gp",
        }
    }

    pub fn has_penalty(&self) -> bool {
        !matches!(self, LossVariant::OriginalGan | LossVariant::Wgan)
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown loss variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterpolationMode {
    /// Segments between real and generated images.
    Model,
    /// Segments between real images and perturbed real images.
    Noise,
}

impl std::str::FromStr for InterpolationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "model" => Ok(InterpolationMode::Model),
            "noise" => Ok(InterpolationMode::Noise),
            _ => Err(Error::Config(format!("unknown interpolation mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaganGpVersion {
    /// Conditional DRAGAN losses with real labels on fakes.
    V1,
    /// Balanced fake labels plus the wrong-label term.
    V2,
    /// V2 initialized from the supervised autoencoder.
    V3,
}

impl std::str::FromStr for BaganGpVersion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(BaganGpVersion::V1),
            "v2" => Ok(BaganGpVersion::V2),
            "v3" => Ok(BaganGpVersion::V3),
            _ => Err(Error::Config(format!("unknown BAGAN-GP version `{s}`"))),
        }
    }
}

impl std::fmt::Display for BaganGpVersion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BaganGpVersion::V1 => "v1",
            BaganGpVersion::V2 => "v2",
            BaganGpVersion::V3 => "v3",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub lambda: f64,
    pub interpolation: InterpolationMode,
    pub bagan_gp_version: BaganGpVersion,
    /// Include the embedded-label input in the penalty's gradient norm.
    pub penalize_label_path: bool,
    /// The `-log(1 - σ(D(x_r, y_wrong)))` term of the balanced critic loss.
    pub wrong_label_term: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::BaganGp,
            lambda: 10.0,
            interpolation: InterpolationMode::Model,
            bagan_gp_version: BaganGpVersion::V3,
            penalize_label_path: false,
            wrong_label_term: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a finite value >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Penalty weight actually applied; unpenalized variants ignore `lambda`.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant.has_penalty() {
            self.lambda
        } else {
            0.0
        }
    }

    /// Whether fakes are drawn with balanced labels (and the wrong-label term
    /// applies) rather than with the real batch's labels.
    pub fn balanced(&self) -> bool {
        self.variant == LossVariant::BaganGp && self.bagan_gp_version != BaganGpVersion::V1
    }
}

/// A conditional critic scoring images against integer labels.
pub trait Critic {
    fn logits(&self, images: &Tensor, labels: &Tensor) -> Result<Tensor>;

    /// Dense label representation consumed by [`Critic::logits_embedded`].
    fn embed_labels(&self, labels: &Tensor) -> Result<Tensor>;

    fn logits_embedded(&self, images: &Tensor, label_vectors: &Tensor) -> Result<Tensor>;
}

impl Critic for DiscriminatorAssembly {
    fn logits(&self, images: &Tensor, labels: &Tensor) -> Result<Tensor> {
        DiscriminatorAssembly::logits(self, images, labels)
    }

    fn embed_labels(&self, labels: &Tensor) -> Result<Tensor> {
        self.label_vectors(labels)
    }

    fn logits_embedded(&self, images: &Tensor, label_vectors: &Tensor) -> Result<Tensor> {
        self.logits_with_label_vectors(images, label_vectors)
    }
}

pub trait Generator {
    fn generate(&self, z: &Tensor, labels: &Tensor) -> Result<Tensor>;
}

impl Generator for GeneratorAssembly {
    fn generate(&self, z: &Tensor, labels: &Tensor) -> Result<Tensor> {
        GeneratorAssembly::generate(self, z, labels, true)
    }
}

impl<F> Generator for F
where
    F: Fn(&Tensor, &Tensor) -> Result<Tensor>,
{
    fn generate(&self, z: &Tensor, labels: &Tensor) -> Result<Tensor> {
        self(z, labels)
    }
}

fn ensure_finite(t: &Tensor) -> Result<()> {
    if t.numel() == 0 || !bool::try_from(t.isfinite().all()).unwrap_or(false) {
        return Err(Error::NonFiniteInput);
    }
    Ok(())
}

/// `-mean log σ(x)`
fn neg_log_sigmoid_mean(logits: &Tensor) -> Tensor {
    -logits.log_sigmoid().mean(logits.kind())
}

/// `-mean log(1 - σ(x))`
fn neg_log_one_minus_sigmoid_mean(logits: &Tensor) -> Tensor {
    -(-logits).log_sigmoid().mean(logits.kind())
}

/// `-E log σ(real) - E log(1 - σ(fake))`
pub fn original_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    ensure_finite(real_logits)?;
    ensure_finite(fake_logits)?;
    Ok(neg_log_sigmoid_mean(real_logits) + neg_log_one_minus_sigmoid_mean(fake_logits))
}

/// Non-saturating generator loss `-E log σ(fake)`.
pub fn original_g_loss(fake_logits: &Tensor) -> Result<Tensor> {
    ensure_finite(fake_logits)?;
    Ok(neg_log_sigmoid_mean(fake_logits))
}

/// Critic objective to maximize: `E D(x_r) - E D(x_g)` on raw scores.
pub fn wgan_d_objective(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    ensure_finite(real_scores)?;
    ensure_finite(fake_scores)?;
    Ok(real_scores.mean(real_scores.kind()) - fake_scores.mean(fake_scores.kind()))
}

pub fn wgan_g_loss(fake_scores: &Tensor) -> Result<Tensor> {
    ensure_finite(fake_scores)?;
    Ok(-fake_scores.mean(fake_scores.kind()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSource {
    /// One `α ~ U(0, 1)` per sample.
    Uniform,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationSpec {
    pub mode: InterpolationMode,
    pub alpha: AlphaSource,
}

impl InterpolationSpec {
    pub fn new(mode: InterpolationMode) -> Self {
        Self {
            mode,
            alpha: AlphaSource::Uniform,
        }
    }
}

/// Perturbed copy of the real batch used as the far endpoint of noise
/// interpolation: `x_r + 0.5 · std(x_r) · U(0, 1)` elementwise.
pub fn noise_endpoint(real: &Tensor, rng: &mut impl Rng) -> Tensor {
    let std = real.std(true);
    let u = rng::uniform(rng, &real.size(), real.kind());
    real + u * std * 0.5
}

/// `x̂ = α x_r + (1 - α) x_other` with one α per sample, broadcast over the
/// remaining axes.
pub fn interpolate(real: &Tensor, other: &Tensor, spec: &InterpolationSpec, rng: &mut impl Rng) -> Result<Tensor> {
    if real.size() != other.size() {
        return Err(Error::DimMismatch(format!(
            "interpolation endpoints {:?} vs {:?}",
            real.size(),
            other.size()
        )));
    }
    let mut shape = vec![1i64; real.dim()];
    shape[0] = real.size()[0];
    let alpha = match spec.alpha {
        AlphaSource::Uniform => rng::uniform(rng, &shape, real.kind()),
        AlphaSource::Fixed(a) => {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidConfig(format!("alpha {a} outside [0, 1]")));
            }
            Tensor::full(&shape, a, (real.kind(), real.device()))
        }
    };
    Ok(&alpha * real + (1.0 - &alpha) * other)
}

fn per_sample_norm(grad: &Tensor) -> Tensor {
    grad.flatten(1, -1).square().sum_dim_intlist(1, false, grad.kind()).sqrt()
}

fn penalty_from_norms(norms: &Tensor) -> Result<Tensor> {
    if !bool::try_from(norms.isfinite().all()).unwrap_or(false) {
        return Err(Error::NonFiniteGradient);
    }
    Ok((norms - 1.0).square().mean(norms.kind()))
}

/// `mean_i (‖∇_x D(x̂_i)‖₂ - 1)²` for an unconditional critic. The result
/// stays differentiable with respect to the critic's parameters.
pub fn gradient_penalty<F>(critic: F, x_hat: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    penalty_from_norms(&gradient_norms(critic, x_hat)?)
}

/// Per-sample `‖∇_x D(x̂_i)‖₂`, differentiable with respect to the critic's
/// parameters.
pub fn gradient_norms<F>(critic: F, x_hat: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x_hat = x_hat.detach().set_requires_grad(true);
    let scores = critic(&x_hat)?;
    let grads = Tensor::f_run_backward(&[scores.sum(scores.kind())], &[&x_hat], true, true)?;
    Ok(per_sample_norm(&grads[0]))
}

/// Gradient penalty of a conditional critic at `(x̂, labels)`. The labels are
/// fixed conditioning unless `through_labels`, in which case the gradient
/// with respect to the embedded label vectors joins the norm.
pub fn conditional_gradient_penalty(
    critic: &dyn Critic,
    x_hat: &Tensor,
    labels: &Tensor,
    through_labels: bool,
) -> Result<Tensor> {
    if !through_labels {
        return gradient_penalty(|x| critic.logits(x, labels), x_hat);
    }
    let x_hat = x_hat.detach().set_requires_grad(true);
    let label_vectors = critic.embed_labels(labels)?.detach().set_requires_grad(true);
    let scores = critic.logits_embedded(&x_hat, &label_vectors)?;
    let grads = Tensor::f_run_backward(&[scores.sum(scores.kind())], &[&x_hat, &label_vectors], true, true)?;
    let sq = per_sample_norm(&grads[0]).square() + per_sample_norm(&grads[1]).square();
    penalty_from_norms(&sq.sqrt())
}

/// `original_d_loss + λ · gp`
pub fn dragan_d_loss(real_logits: &Tensor, fake_logits: &Tensor, gp: &Tensor, lambda: f64) -> Result<Tensor> {
    let base = original_d_loss(real_logits, fake_logits)?;
    if lambda == 0.0 {
        return Ok(base);
    }
    Ok(base + gp * lambda)
}

/// Critic loss with its unweighted penalty value.
#[derive(Debug)]
pub struct CriticLoss {
    pub total: Tensor,
    /// Unweighted penalty; zero when the effective λ is zero.
    pub penalty: Tensor,
}

fn zero_like(t: &Tensor) -> Tensor {
    Tensor::zeros([], (t.kind(), t.device()))
}

fn penalty_term(
    critic: &dyn Critic,
    real: &Tensor,
    other: &Tensor,
    labels: &Tensor,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<Option<Tensor>> {
    if cfg.effective_lambda() == 0.0 {
        return Ok(None);
    }
    let x_hat = interpolate(real, other, &InterpolationSpec::new(cfg.interpolation), rng)?;
    conditional_gradient_penalty(critic, &x_hat, labels, cfg.penalize_label_path).map(Some)
}

fn with_penalty(base: Tensor, penalty: Option<Tensor>, lambda: f64) -> CriticLoss {
    match penalty {
        Some(gp) => CriticLoss {
            total: base + &gp * lambda,
            penalty: gp,
        },
        None => {
            let penalty = zero_like(&base);
            CriticLoss { total: base, penalty }
        }
    }
}

/// Conditional DRAGAN critic loss: fakes are scored against the real labels
/// and the penalty is taken at `(x̂, y_r)`.
pub fn cdragan_d_loss(
    critic: &dyn Critic,
    real: &Tensor,
    real_labels: &Tensor,
    fake: &Tensor,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<CriticLoss> {
    let fake = fake.detach();
    let base = original_d_loss(&critic.logits(real, real_labels)?, &critic.logits(&fake, real_labels)?)?;
    let other = match cfg.interpolation {
        InterpolationMode::Model => fake,
        InterpolationMode::Noise => noise_endpoint(real, rng),
    };
    let penalty = penalty_term(critic, real, &other, real_labels, cfg, rng)?;
    Ok(with_penalty(base, penalty, cfg.effective_lambda()))
}

pub fn cdragan_g_loss(critic: &dyn Critic, fake: &Tensor, real_labels: &Tensor) -> Result<Tensor> {
    original_g_loss(&critic.logits(fake, real_labels)?)
}

/// Balanced critic loss:
/// `-E log σ(D(x_r, y_r)) - E log(1 - σ(D(G(z, y_f), y_f)))
///  - E log(1 - σ(D(x_r, y_wrong))) + λ GP(x̂, y_r)`,
/// with model interpolation between `x_r` and `G(z, y_f)`.
#[allow(clippy::too_many_arguments)]
pub fn bagan_gp_d_loss(
    critic: &dyn Critic,
    generator: &dyn Generator,
    real: &Tensor,
    real_labels: &Tensor,
    z: &Tensor,
    fake_labels: &Tensor,
    wrong_labels: &Tensor,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<CriticLoss> {
    let num_classes = label_count(real_labels, fake_labels, wrong_labels);
    if cfg.wrong_label_term && num_classes < 2 {
        return Err(Error::ClassCountOne);
    }
    let fake = tch::no_grad(|| generator.generate(z, fake_labels))?.detach();
    let mut base = original_d_loss(&critic.logits(real, real_labels)?, &critic.logits(&fake, fake_labels)?)?;
    if cfg.wrong_label_term {
        let wrong = critic.logits(real, wrong_labels)?;
        ensure_finite(&wrong)?;
        base = base + neg_log_one_minus_sigmoid_mean(&wrong);
    }
    let mut model_cfg = cfg.clone();
    model_cfg.interpolation = InterpolationMode::Model;
    let penalty = penalty_term(critic, real, &fake, real_labels, &model_cfg, rng)?;
    Ok(with_penalty(base, penalty, cfg.effective_lambda()))
}

fn label_count(a: &Tensor, b: &Tensor, c: &Tensor) -> usize {
    [a, b, c]
        .iter()
        .filter(|t| t.numel() > 0)
        .map(|t| t.max().int64_value(&[]) + 1)
        .max()
        .unwrap_or(0) as usize
}

/// `-E log σ(D(G(z, y_f), y_f))`
pub fn bagan_gp_g_loss(
    critic: &dyn Critic,
    generator: &dyn Generator,
    z: &Tensor,
    fake_labels: &Tensor,
) -> Result<Tensor> {
    let fake = generator.generate(z, fake_labels)?;
    original_g_loss(&critic.logits(&fake, fake_labels)?)
}

/// I.i.d. uniform labels over `0..num_classes`.
pub fn sample_balanced_labels(n: usize, num_classes: usize, rng: &mut impl Rng) -> Result<LabelBatch> {
    if num_classes == 0 {
        return Err(Error::InvalidConfig("need at least one class".into()));
    }
    LabelBatch::new((0..n).map(|_| rng.gen_range(0..num_classes) as i64).collect(), num_classes)
}

/// For each true label, a label drawn uniformly from the other classes.
pub fn sample_wrong_labels(true_labels: &LabelBatch, rng: &mut impl Rng) -> Result<LabelBatch> {
    let k = true_labels.num_classes();
    if k < 2 {
        return Err(Error::ClassCountOne);
    }
    let wrong = true_labels
        .labels()
        .iter()
        .map(|&y| {
            // uniform over the k-1 others; same law as redrawing on collision
            let r = rng.gen_range(0..k as i64 - 1);
            if r >= y {
                r + 1
            } else {
                r
            }
        })
        .collect();
    LabelBatch::new(wrong, k)
}

/// Scalar value of a zero-dimensional loss tensor.
pub fn value(loss: &Tensor) -> f64 {
    loss.to_kind(Kind::Double).double_value(&[])
}
