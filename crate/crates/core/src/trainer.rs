//! Stage-2 adversarial training: initialization from a stage-1 checkpoint,
//! the critic/generator update loop for every loss variant, metrics and
//! resumable checkpoints.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

use crate::autoencoder::Stage1;
use crate::data::{ImageBatch, LabelBatch, RangeTag};
use crate::error::{Error, Result};
use crate::losses::{self, BaganGpVersion, LossConfig, LossVariant};
use crate::nets::{
    assemble_discriminator, assemble_generator, build_decoder, build_disc_head, build_disc_label_embed,
    build_disc_trunk, build_embedding, load_network, save_networks, transfer_weights, ArchitectureConfig,
    DiscriminatorAssembly, GeneratorAssembly, LayerMap, Manifest,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitMode {
    /// Generator from decoder (+ embedding), critic trunk from encoder.
    Both,
    GeneratorOnly,
    None,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "both" => Ok(InitMode::Both),
            "generator_only" => Ok(InitMode::GeneratorOnly),
            "none" => Ok(InitMode::None),
            _ => Err(Error::Config(format!("unknown init mode `{s}`"))),
        }
    }
}

impl InitMode {
    pub fn name(&self) -> &'static str {
        match self {
            InitMode::Both => "both",
            InitMode::GeneratorOnly => "generator_only",
            InitMode::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Critic updates per generator update; `None` picks 5 for penalized
    /// variants and 1 otherwise.
    pub n_critic: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub init_mode: InitMode,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            adam: AdamConfig::default(),
            n_critic: None,
            epochs: 100,
            seed: 0,
            loss: LossConfig::default(),
            init_mode: InitMode::GeneratorOnly,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn n_critic(&self) -> usize {
        self.n_critic
            .unwrap_or(if self.loss.variant.has_penalty() { 5 } else { 1 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_critic() < 1 {
            return Err(Error::Config("n_critic must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        self.loss.validate()
    }

    /// Fully resolved `key = value` listing.
    pub fn echo(&self, arch: &ArchitectureConfig) -> String {
        let mut manifest = Manifest::default();
        self.write_manifest(&mut manifest);
        arch.to_manifest(&mut manifest);
        manifest.to_text()
    }

    fn write_manifest(&self, m: &mut Manifest) {
        m.set("train.batch_size", self.batch_size);
        m.set("train.lr", self.adam.lr);
        m.set("train.beta1", self.adam.beta1);
        m.set("train.beta2", self.adam.beta2);
        m.set("train.n_critic", self.n_critic());
        m.set("train.epochs", self.epochs);
        m.set("train.seed", self.seed);
        m.set("train.init_mode", self.init_mode.name());
        m.set("train.checkpoint_every", self.checkpoint_every);
        m.set("loss.variant", self.loss.variant.name());
        m.set("loss.lambda", self.loss.lambda);
        m.set(
            "loss.interpolation",
            match self.loss.interpolation {
                losses::InterpolationMode::Model => "model",
                losses::InterpolationMode::Noise => "noise",
            },
        );
        m.set("loss.bagan_gp_version", self.loss.bagan_gp_version);
        m.set("loss.penalize_label_path", self.loss.penalize_label_path);
        m.set("loss.wrong_label_term", self.loss.wrong_label_term);
    }
}

/// Preprocessed training set held as tensors.
#[derive(Debug)]
pub struct TrainData {
    pub images: Tensor,
    pub labels: Tensor,
    pub num_classes: usize,
}

impl TrainData {
    pub fn new(images: &ImageBatch, labels: &LabelBatch) -> Result<Self> {
        if images.range() != RangeTag::ScaledMinus1To1 {
            return Err(Error::InvalidConfig("training images must be preprocessed".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::LabelMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        Ok(Self {
            images: images.to_tensor(),
            labels: labels.to_tensor(),
            num_classes: labels.num_classes(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.size()[0] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds the generator and critic, copying stage-1 weights per `mode`.
pub fn init_from_stage1(
    stage1: Option<&Stage1>,
    arch: &ArchitectureConfig,
    num_classes: usize,
    mode: InitMode,
    rng: &mut impl Rng,
) -> Result<(GeneratorAssembly, DiscriminatorAssembly)> {
    let mut embedding = build_embedding(arch, num_classes, rng)?;
    let mut decoder = build_decoder(arch, rng)?;
    let mut trunk = build_disc_trunk(arch, rng)?;
    let label_embed = build_disc_label_embed(arch, num_classes, rng)?;
    let head = build_disc_head(arch, rng)?;

    if mode != InitMode::None {
        let stage1 =
            stage1.ok_or_else(|| Error::CheckpointIncompatible("init mode needs a stage-1 checkpoint".into()))?;
        let src = stage1.arch();
        if src.latent_dim != arch.latent_dim || src.channels != arch.channels || src.widths != arch.widths {
            return Err(Error::CheckpointIncompatible(format!(
                "stage-1 latent_dim/channels/widths {}/{}/{:?} vs {}/{}/{:?}",
                src.latent_dim, src.channels, src.widths, arch.latent_dim, arch.channels, arch.widths
            )));
        }
        transfer_weights(stage1.decoder(), &mut decoder, &LayerMap::all(stage1.decoder()))?;
        if let Stage1::Supervised(ae) = stage1 {
            if ae.embedding.num_classes() != Some(num_classes) {
                return Err(Error::CheckpointIncompatible(format!(
                    "stage-1 embedding has {:?} classes, dataset has {num_classes}",
                    ae.embedding.num_classes()
                )));
            }
            transfer_weights(&ae.embedding, &mut embedding, &LayerMap::all(&ae.embedding))?;
        }
        if mode == InitMode::Both {
            transfer_weights(stage1.encoder(), &mut trunk, &LayerMap::encoder_to_trunk())?;
        }
    }
    Ok((
        assemble_generator(embedding, decoder)?,
        assemble_discriminator(trunk, label_embed, head)?,
    ))
}

/// Cycles through shuffled permutations of the training set, one mini-batch
/// at a time; a permutation's tail shorter than a batch is skipped.
#[derive(Debug, Clone, PartialEq)]
struct RealStream {
    order: Vec<i64>,
    cursor: usize,
}

impl RealStream {
    fn new(n: usize, rng: &mut impl Rng) -> Self {
        let mut order: Vec<i64> = (0..n as i64).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn next(&mut self, batch_size: usize, rng: &mut impl Rng) -> Tensor {
        let bs = batch_size.min(self.order.len());
        if self.cursor + bs > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let idx = Tensor::from_slice(&self.order[self.cursor..self.cursor + bs]);
        self.cursor += bs;
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp: f64,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        self.d_loss.is_finite() && self.g_loss.is_finite() && self.gp.is_finite()
    }
}

/// Everything a run needs to continue: weights, optimizer moments, the
/// random stream and the data cursor.
#[derive(Debug)]
pub struct GanState {
    pub generator: GeneratorAssembly,
    pub discriminator: DiscriminatorAssembly,
    g_opt: Adam,
    d_opt: Adam,
    rng: ChaCha8Rng,
    stream: RealStream,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed train steps.
    pub step: usize,
    /// Labels fed to the generator, per class.
    pub fake_label_counts: Vec<u64>,
}

impl GanState {
    pub fn new(
        generator: GeneratorAssembly,
        discriminator: DiscriminatorAssembly,
        data: &TrainData,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if generator.num_classes() != data.num_classes || discriminator.num_classes() != data.num_classes {
            return Err(Error::DimMismatch(format!(
                "networks built for {}/{} classes, data has {}",
                generator.num_classes(),
                discriminator.num_classes(),
                data.num_classes
            )));
        }
        // distinct stream from the one used for weight initialization
        let mut rng = rng::seeded(cfg.seed ^ 0x5eed_0f_7a1b);
        let stream = RealStream::new(data.len(), &mut rng);
        Ok(Self {
            g_opt: Adam::new(generator.trainable_weights(), cfg.adam),
            d_opt: Adam::new(discriminator.trainable_weights(), cfg.adam),
            fake_label_counts: vec![0; data.num_classes],
            generator,
            discriminator,
            rng,
            stream,
            epoch: 0,
            step: 0,
        })
    }

    /// Fresh networks (initialized from `stage1` per the config) plus fresh
    /// optimizer state.
    pub fn initialize(
        stage1: Option<&Stage1>,
        arch: &ArchitectureConfig,
        data: &TrainData,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.loss.variant == LossVariant::BaganGp
            && cfg.loss.bagan_gp_version == BaganGpVersion::V3
            && cfg.init_mode != InitMode::None
            && !matches!(stage1, Some(Stage1::Supervised(_)))
        {
            return Err(Error::CheckpointIncompatible(
                "BAGAN-GP v3 initializes from a supervised (ae_supervised) checkpoint".into(),
            ));
        }
        let mut rng = rng::seeded(cfg.seed);
        let (g, d) = init_from_stage1(stage1, arch, data.num_classes, cfg.init_mode, &mut rng)?;
        Self::new(g, d, data, cfg)
    }

    pub fn d_updates(&self) -> i64 {
        self.d_opt.steps()
    }

    pub fn g_updates(&self) -> i64 {
        self.g_opt.steps()
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        self.generator.decoder.arch()
    }

    fn record_fake_labels(&mut self, labels: &Tensor) {
        for l in Vec::<i64>::try_from(labels).unwrap_or_default() {
            self.fake_label_counts[l as usize] += 1;
        }
    }

    /// Saves a checkpoint directory in the network checkpoint format plus
    /// optimizer and stream state.
    pub fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = Manifest::default();
        manifest.set("tag", "gan");
        manifest.set("epoch", self.epoch);
        manifest.set("step", self.step);
        manifest.set("rng", RngState::capture(&self.rng).encode());
        manifest.set("stream_cursor", self.stream.cursor);
        manifest.set(
            "fake_label_counts",
            self.fake_label_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        cfg.write_manifest(&mut manifest);
        let g = &self.generator;
        let d = &self.discriminator;
        save_networks(
            dir,
            manifest,
            &[
                ("embedding", &g.embedding),
                ("decoder", &g.decoder),
                ("disc_trunk", &d.trunk),
                ("disc_label_embed", &d.label_embed),
                ("disc_head", &d.head),
            ],
        )?;
        self.g_opt.save(&dir.join("adam_generator.safetensors"))?;
        self.d_opt.save(&dir.join("adam_discriminator.safetensors"))?;
        Tensor::from_slice(&self.stream.order).save(dir.join("stream_order.pt"))?;
        Ok(())
    }

    pub fn load(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        if manifest.get("tag") != Some("gan") {
            return Err(Error::CheckpointIncompatible(format!("{} is not a GAN checkpoint", dir.display())));
        }
        let generator = load_generator(dir)?;
        let discriminator = assemble_discriminator(
            load_network(dir, &manifest, "disc_trunk")?,
            load_network(dir, &manifest, "disc_label_embed")?,
            load_network(dir, &manifest, "disc_head")?,
        )?;
        let mut g_opt = Adam::new(generator.trainable_weights(), cfg.adam);
        g_opt.load(&dir.join("adam_generator.safetensors"))?;
        let mut d_opt = Adam::new(discriminator.trainable_weights(), cfg.adam);
        d_opt.load(&dir.join("adam_discriminator.safetensors"))?;
        let order = Vec::<i64>::try_from(Tensor::load(dir.join("stream_order.pt"))?)?;
        let rng = RngState::decode(manifest.require("rng")?)
            .ok_or_else(|| Error::CheckpointIncompatible("malformed rng state".into()))?
            .restore();
        let fake_label_counts = manifest
            .require("fake_label_counts")?
            .split(',')
            .map(|c| c.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::CheckpointIncompatible("malformed fake_label_counts".into()))?;
        Ok(Self {
            generator,
            discriminator,
            g_opt,
            d_opt,
            rng,
            stream: RealStream {
                order,
                cursor: manifest.parse("stream_cursor")?,
            },
            epoch: manifest.parse("epoch")?,
            step: manifest.parse("step")?,
            fake_label_counts,
        })
    }
}

/// Loads only the generator of a GAN checkpoint.
pub fn load_generator(dir: &Path) -> Result<GeneratorAssembly> {
    let manifest = Manifest::load(dir)?;
    assemble_generator(
        load_network(dir, &manifest, "embedding")?,
        load_network(dir, &manifest, "decoder")?,
    )
}

fn check_finite(v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

/// One critic update on a fresh real batch with fresh `z`, `y_f` and
/// `y_wrong`. Returns the critic loss and penalty values.
pub fn critic_step(state: &mut GanState, data: &TrainData, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let loss_cfg = &cfg.loss;
    let latent = state.generator.latent_dim() as i64;
    let k = data.num_classes;
    let idx = state.stream.next(cfg.batch_size, &mut state.rng);
    let real = data.images.index_select(0, &idx);
    let y_r = data.labels.index_select(0, &idx);
    let n = y_r.size()[0];
    let z = rng::normal(&mut state.rng, &[n, latent], Kind::Float);
    let loss = if loss_cfg.balanced() {
        let y_f = losses::sample_balanced_labels(n as usize, k, &mut state.rng)?.to_tensor();
        // the wrong-label term reuses this real batch
        let y_wrong = if loss_cfg.wrong_label_term {
            let truth = LabelBatch::new(Vec::<i64>::try_from(&y_r)?, k)?;
            losses::sample_wrong_labels(&truth, &mut state.rng)?.to_tensor()
        } else {
            y_r.shallow_clone()
        };
        state.record_fake_labels(&y_f);
        losses::bagan_gp_d_loss(
            &state.discriminator,
            &state.generator,
            &real,
            &y_r,
            &z,
            &y_f,
            &y_wrong,
            loss_cfg,
            &mut state.rng,
        )?
    } else {
        state.record_fake_labels(&y_r);
        let fake = tch::no_grad(|| state.generator.generate(&z, &y_r, true))?;
        unbalanced_critic_loss(state, &real, &y_r, &fake, loss_cfg)?
    };
    let d_value = check_finite(losses::value(&loss.total), state.step)?;
    let gp = check_finite(losses::value(&loss.penalty), state.step)?;
    state.d_opt.backward_step(&loss.total);
    Ok((d_value, gp))
}

/// One generator update. Balanced variants draw uniform fake labels; the
/// others take labels from the real stream. Returns the generator loss.
pub fn generator_step(state: &mut GanState, data: &TrainData, cfg: &TrainConfig) -> Result<f64> {
    let loss_cfg = &cfg.loss;
    let idx = state.stream.next(cfg.batch_size, &mut state.rng);
    let n = idx.size()[0];
    let labels = if loss_cfg.balanced() {
        losses::sample_balanced_labels(n as usize, data.num_classes, &mut state.rng)?.to_tensor()
    } else {
        data.labels.index_select(0, &idx)
    };
    state.record_fake_labels(&labels);
    let z = rng::normal(&mut state.rng, &[n, state.generator.latent_dim() as i64], Kind::Float);
    let fake = state.generator.generate(&z, &labels, true)?;
    let scores = state.discriminator.logits(&fake, &labels)?;
    let g_loss = match loss_cfg.variant {
        LossVariant::Wgan | LossVariant::WganGp => losses::wgan_g_loss(&scores)?,
        _ => losses::original_g_loss(&scores)?,
    };
    let g_value = check_finite(losses::value(&g_loss), state.step)?;
    state.g_opt.backward_step(&g_loss);
    Ok(g_value)
}

/// `n_critic` critic updates followed by one generator update.
pub fn train_step(state: &mut GanState, data: &TrainData, cfg: &TrainConfig) -> Result<StepMetrics> {
    let n_critic = cfg.n_critic();
    let (mut d_sum, mut gp_sum) = (0.0, 0.0);
    for _ in 0..n_critic {
        let (d, gp) = critic_step(state, data, cfg)?;
        d_sum += d;
        gp_sum += gp;
    }
    let g_loss = generator_step(state, data, cfg)?;
    let metrics = StepMetrics {
        step: state.step,
        epoch: state.epoch,
        d_loss: d_sum / n_critic as f64,
        g_loss,
        gp: gp_sum / n_critic as f64,
    };
    state.step += 1;
    Ok(metrics)
}

fn unbalanced_critic_loss(
    state: &mut GanState,
    real: &Tensor,
    y_r: &Tensor,
    fake: &Tensor,
    cfg: &LossConfig,
) -> Result<losses::CriticLoss> {
    let d = &state.discriminator;
    match cfg.variant {
        LossVariant::OriginalGan => {
            let total = losses::original_d_loss(&d.logits(real, y_r)?, &d.logits(fake, y_r)?)?;
            let penalty = Tensor::zeros([], (Kind::Float, tch::Device::Cpu));
            Ok(losses::CriticLoss { total, penalty })
        }
        LossVariant::Wgan | LossVariant::WganGp => {
            let objective = losses::wgan_d_objective(&d.logits(real, y_r)?, &d.logits(fake, y_r)?)?;
            let lambda = cfg.effective_lambda();
            if lambda == 0.0 {
                let penalty = Tensor::zeros([], (Kind::Float, tch::Device::Cpu));
                return Ok(losses::CriticLoss { total: -objective, penalty });
            }
            let x_hat = losses::interpolate(
                real,
                fake,
                &losses::InterpolationSpec::new(losses::InterpolationMode::Model),
                &mut state.rng,
            )?;
            let gp = losses::conditional_gradient_penalty(d, &x_hat, y_r, cfg.penalize_label_path)?;
            Ok(losses::CriticLoss {
                total: -objective + &gp * lambda,
                penalty: gp,
            })
        }
        // the critic is conditional, so DRAGAN and cDRAGAN share the
        // real-label form; they differ only in the configured interpolation
        LossVariant::Dragan | LossVariant::Cdragan | LossVariant::BaganGp => {
            let mut c = cfg.clone();
            if cfg.variant == LossVariant::BaganGp {
                c.interpolation = losses::InterpolationMode::Model;
            }
            losses::cdragan_d_loss(d, real, y_r, fake, &c, &mut state.rng)
        }
    }
}

/// `max(1, N / batch_size)`
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    (n / batch_size).max(1)
}

pub const METRICS_HEADER: &str = "step,epoch,d_loss,g_loss,gp";

fn checkpoint_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch}"))
}

/// Most recent `checkpoints/epoch_<n>` under `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let entries = fs::read_dir(run_dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let epoch: usize = name.strip_prefix("epoch_")?.parse().ok()?;
            e.path().join(crate::nets::MANIFEST_FILE).exists().then_some((epoch, e.path()))
        })
        .max_by_key(|(epoch, _)| *epoch)
        .map(|(_, p)| p)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines().skip(1) {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            msg: format!("malformed metrics row `{line}`"),
        };
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(StepMetrics {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            d_loss: f[2].parse().map_err(|_| bad())?,
            g_loss: f[3].parse().map_err(|_| bad())?,
            gp: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

fn write_metrics(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for m in rows {
        let _ = writeln!(text, "{},{},{},{},{}", m.step, m.epoch, m.d_loss, m.g_loss, m.gp);
    }
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug)]
pub struct RunOutcome {
    pub state: GanState,
    /// Metrics of the steps run by this call.
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

/// Trains until `cfg.epochs` epochs are complete, writing `config.echo`,
/// `metrics.csv` and `checkpoints/epoch_<n>/` under `run_dir`. With `resume`
/// the latest checkpoint in `run_dir` is restored first and the metrics log
/// is cut back to that checkpoint's step.
pub fn train(
    data: &TrainData,
    stage1: Option<&Stage1>,
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    run_dir: &Path,
    resume: bool,
    echo: &str,
) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.echo"), echo)?;
    let metrics_path = run_dir.join("metrics.csv");

    let resumed = if resume { latest_checkpoint(run_dir) } else { None };
    let mut state = match &resumed {
        Some(dir) => {
            let state = GanState::load(dir, cfg)?;
            if state.arch() != arch {
                return Err(Error::CheckpointIncompatible(
                    "checkpoint architecture differs from the configured one".into(),
                ));
            }
            let kept: Vec<StepMetrics> = if metrics_path.exists() {
                read_metrics(&metrics_path)?
                    .into_iter()
                    .filter(|m| m.step < state.step)
                    .collect()
            } else {
                Vec::new()
            };
            write_metrics(&metrics_path, &kept)?;
            state
        }
        None => {
            write_metrics(&metrics_path, &[])?;
            GanState::initialize(stage1, arch, data, cfg)?
        }
    };
    if let Some(dir) = &resumed {
        log::info!("resumed from {} at epoch {}", dir.display(), state.epoch);
    }

    let mut metrics_file = OpenOptions::new().append(true).open(&metrics_path)?;
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let mut metrics = Vec::new();
    let mut final_checkpoint = resumed.clone();
    while state.epoch < cfg.epochs {
        for _ in 0..per_epoch {
            let m = train_step(&mut state, data, cfg)?;
            writeln!(metrics_file, "{},{},{},{},{}", m.step, m.epoch, m.d_loss, m.g_loss, m.gp)?;
            metrics.push(m);
        }
        state.epoch += 1;
        let last = state.epoch == cfg.epochs;
        if last || (cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0) {
            metrics_file.flush()?;
            let dir = checkpoint_dir(run_dir, state.epoch);
            state.save(&dir, cfg)?;
            final_checkpoint = Some(dir);
        }
        log::debug!("epoch {} done", state.epoch);
    }
    let final_checkpoint = match final_checkpoint {
        Some(dir) => dir,
        None => {
            let dir = checkpoint_dir(run_dir, state.epoch);
            state.save(&dir, cfg)?;
            dir
        }
    };
    Ok(RunOutcome {
        state,
        metrics,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_cycles_full_batches() {
        let mut rng = rng::seeded(1);
        let mut s = RealStream::new(10, &mut rng);
        let mut seen = Vec::new();
        for _ in 0..3 {
            seen.extend(Vec::<i64>::try_from(s.next(3, &mut rng)).unwrap());
        }
        let mut sorted = seen.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 9);
        // fourth batch would overrun, so a new permutation starts
        let _ = s.next(3, &mut rng);
        assert_eq!(s.cursor, 3);
        assert_eq!(s.next(20, &mut rng).size(), vec![10]);
    }

    #[test]
    fn steps_per_epoch_arithmetic() {
        assert_eq!(steps_per_epoch(256, 128), 2);
        assert_eq!(steps_per_epoch(700, 128), 5);
        assert_eq!(steps_per_epoch(50, 128), 1);
    }

    #[test]
    fn n_critic_defaults() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.n_critic(), 5);
        cfg.loss.variant = LossVariant::OriginalGan;
        assert_eq!(cfg.n_critic(), 1);
        cfg.n_critic = Some(3);
        assert_eq!(cfg.n_critic(), 3);
        cfg.n_critic = Some(0);
        assert!(cfg.validate().is_err());
    }
}
