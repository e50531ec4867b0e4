//! One function per subcommand. Each echoes the resolved config into the
//! output directory before loading data or touching weights.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bagan::autoencoder::{
    pretrain_supervised_ae, pretrain_unsupervised_ae, PretrainConfig, Stage1, SupervisedAutoencoder,
    TrainingLog, UnsupervisedAutoencoder,
};
use bagan::data::{apply_schedule, load_dataset, preprocess, write_container, Dataset, ImageBatch, ImbalanceSchedule};
use bagan::evaluation::{
    feature_projection, fid_per_class, generate_class, image_grid, latent_dispersion, scatter_csv, Dispersion,
    FidReport, Projection, Target,
};
use bagan::extractor::{to_matrix, ClassifierConfig, ClassifierExtractor, FeatureExtractor, TorchScriptExtractor};
use bagan::data::LabelBatch;
use bagan::optim::AdamConfig;
use bagan::rng;
use bagan::trainer::{load_generator, train, InitMode, RunOutcome, TrainData};
use bagan::{Error, Result};
use tch::Tensor;

use crate::config::RunConfig;

pub const CONFIG_ECHO: &str = "config.echo";

/// Creates the output directory and writes the resolved config into it.
pub fn echo_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_ECHO), cfg.to_toml())?;
    Ok(())
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Config(format!("`{key}` is not set")))
}

/// Source samples with the schedule applied, still raw.
pub fn load_scheduled(cfg: &RunConfig) -> Result<Dataset> {
    let source = require(&cfg.dataset.source, "dataset.source")?;
    let mut dataset = load_dataset(&cfg.dataset_spec(source))?;
    if let Some(path) = &cfg.dataset.schedule {
        if !path.is_file() {
            return Err(Error::Config(format!("schedule file {} not found", path.display())));
        }
        let schedule = ImbalanceSchedule::load(path)?;
        let (images, labels) = apply_schedule(&dataset.images, &dataset.labels, &schedule)?;
        dataset.images = images;
        dataset.labels = labels;
    }
    Ok(dataset)
}

fn preprocessed(cfg: &RunConfig, dataset: &Dataset) -> Result<ImageBatch> {
    let channels = dataset.images.image_shape().2;
    if channels != cfg.architecture.channels {
        return Err(Error::Config(format!(
            "dataset has {channels} channels, architecture.channels = {}",
            cfg.architecture.channels
        )));
    }
    preprocess(&dataset.images)
}

fn load_validation(cfg: &RunConfig) -> Result<(ImageBatch, LabelBatch)> {
    let path = require(&cfg.dataset.validation, "dataset.validation")?;
    let dataset = load_dataset(&cfg.dataset_spec(path))?;
    Ok((preprocessed(cfg, &dataset)?, dataset.labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    pub counts: Vec<usize>,
    pub class_names: Vec<String>,
    pub container: PathBuf,
}

impl PrepareSummary {
    pub fn table(&self) -> String {
        let mut out = String::from("class,name,count\n");
        for (i, n) in self.counts.iter().enumerate() {
            let name = self.class_names.get(i).map(String::as_str).unwrap_or("");
            let _ = writeln!(out, "{i},{name},{n}");
        }
        out
    }
}

/// Writes the scheduled subset as `data.safetensors` plus `class_counts.csv`.
pub fn prepare_data(cfg: &RunConfig) -> Result<PrepareSummary> {
    echo_config(cfg)?;
    let dataset = load_scheduled(cfg)?;
    let container = cfg.out.join("data.safetensors");
    write_container(&container, &dataset.images, &dataset.labels)?;
    let summary = PrepareSummary {
        counts: dataset.labels.class_counts(),
        class_names: dataset.class_names,
        container,
    };
    fs::write(cfg.out.join("class_counts.csv"), summary.table())?;
    Ok(summary)
}

/// Trains a stage-1 autoencoder and saves it under `<out>/checkpoint`.
pub fn pretrain_ae(cfg: &RunConfig) -> Result<TrainingLog> {
    echo_config(cfg)?;
    let p = &cfg.pretrain;
    if p.epochs < 1 {
        return Err(Error::Config("pretrain.epochs must be >= 1".into()));
    }
    let supervised = cfg.stage1_supervised()?;
    let dataset = load_scheduled(cfg)?;
    let images = preprocessed(cfg, &dataset)?;
    let arch = cfg.architecture_config();
    let pcfg = PretrainConfig {
        epochs: p.epochs,
        batch_size: p.batch_size,
        adam: AdamConfig {
            lr: p.lr,
            beta1: p.beta1,
            beta2: p.beta2,
            ..Default::default()
        },
        seed: cfg.seed,
    };
    let mut rng = rng::seeded(cfg.seed);
    let dir = cfg.out.join("checkpoint");
    let log = if supervised {
        let ae = SupervisedAutoencoder::new(&arch, dataset.labels.num_classes(), &mut rng)?;
        let log = pretrain_supervised_ae(&ae, &images, &dataset.labels, &pcfg)?;
        ae.save(&dir)?;
        log
    } else {
        let ae = UnsupervisedAutoencoder::new(&arch, &mut rng)?;
        let log = pretrain_unsupervised_ae(&ae, &images, &pcfg)?;
        ae.save(&dir)?;
        log
    };
    fs::write(cfg.out.join("mse.csv"), log.to_csv())?;
    Ok(log)
}

/// Adversarial training into the run directory `<out>`.
pub fn train_gan(cfg: &RunConfig) -> Result<RunOutcome> {
    echo_config(cfg)?;
    let tcfg = cfg.train_config()?;
    let stage1 = match (&cfg.train.stage1, tcfg.init_mode) {
        (_, InitMode::None) => None,
        (Some(dir), _) => Some(Stage1::load(dir)?),
        (None, _) => return Err(Error::Config("`train.stage1` is required unless init_mode = \"none\"".into())),
    };
    let dataset = load_scheduled(cfg)?;
    let data = TrainData::new(&preprocessed(cfg, &dataset)?, &dataset.labels)?;
    train(
        &data,
        stage1.as_ref(),
        &cfg.architecture_config(),
        &tcfg,
        &cfg.out,
        cfg.train.resume,
        &cfg.to_toml(),
    )
}

/// Writes `n` PNGs of class `class` plus `generated.txt` listing each
/// file's noise vector.
pub fn generate(cfg: &RunConfig, checkpoint: &Path, class: usize, n: usize) -> Result<Vec<PathBuf>> {
    echo_config(cfg)?;
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let g = load_generator(checkpoint)?;
    let (images, z) = generate_class(&g, class, n, cfg.seed)?;
    let mut manifest = format!("seed = {}\nclass = {class}\n", cfg.seed);
    let mut files = Vec::with_capacity(n);
    for i in 0..n {
        let name = format!("class{class}_{i:05}.png");
        let path = cfg.out.join(&name);
        images.save_png(i, &path)?;
        let values = Vec::<f32>::try_from(z.get(i as i64))?;
        let values: Vec<String> = values.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(manifest, "{name} = {}", values.join(","));
        files.push(path);
    }
    fs::write(cfg.out.join("generated.txt"), manifest)?;
    Ok(files)
}

/// What `evaluate` compares against the validation set.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalInput {
    Checkpoint(PathBuf),
    /// Image folder or container holding labeled samples.
    Samples(PathBuf),
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: FidReport,
    pub grid: Option<PathBuf>,
    pub projection: PathBuf,
}

fn build_extractor(cfg: &RunConfig) -> Result<Box<dyn FeatureExtractor>> {
    let e = &cfg.eval;
    match e.extractor.as_str() {
        "pretrained" => {
            let path = e
                .extractor_weights
                .as_deref()
                .ok_or_else(|| Error::ExtractorUnavailable("`eval.extractor_weights` is not set".into()))?;
            Ok(Box::new(TorchScriptExtractor::load(path)?))
        }
        _ => {
            if let Some(dir) = &e.extractor_weights {
                return Ok(Box::new(ClassifierExtractor::load(dir)?));
            }
            let dataset = load_scheduled(cfg)?;
            let images = preprocessed(cfg, &dataset)?;
            let clf = ClassifierExtractor::train(
                &images,
                &dataset.labels,
                &ClassifierConfig {
                    channels: cfg.architecture.channels,
                    widths: e.classifier_widths,
                    feature_dim: e.feature_dim,
                    epochs: e.classifier_epochs,
                    seed: cfg.seed,
                    ..Default::default()
                },
            )?;
            clf.save(&cfg.out.join("classifier"))?;
            Ok(Box::new(clf))
        }
    }
}

/// Per-class FID (`fid.csv`), the conditional grid (`grid.png`/`grid.txt`,
/// checkpoints only) and the real/generated feature projection
/// (`projection.csv`).
pub fn evaluate(cfg: &RunConfig, input: &EvalInput) -> Result<EvalOutcome> {
    echo_config(cfg)?;
    let (val_images, val_labels) = load_validation(cfg)?;
    let extractor = build_extractor(cfg)?;
    let samples_per_class = (cfg.eval.samples_per_class > 0).then_some(cfg.eval.samples_per_class);
    let k = val_labels.num_classes();

    let (report, grid, generated) = match input {
        EvalInput::Checkpoint(dir) => {
            let g = load_generator(dir)?;
            let target = Target::Generator {
                generator: &g,
                samples_per_class,
                seed: cfg.seed,
            };
            let report = fid_per_class(&target, &val_images, &val_labels, extractor.as_ref())?;
            let grid = image_grid(&g, &(0..k).collect::<Vec<_>>(), cfg.eval.grid_rows, cfg.seed, &val_images, &val_labels)?;
            grid.save(&cfg.out, "grid")?;
            let mut batches = Vec::with_capacity(k);
            let mut labels = Vec::new();
            for c in 0..k {
                let n = samples_per_class.unwrap_or_else(|| val_labels.indices_of(c).len());
                batches.push(generate_class(&g, c, n, cfg.seed.wrapping_add(c as u64))?.0);
                labels.extend(std::iter::repeat(c as i64).take(n));
            }
            let images = ImageBatch::concat(&batches.iter().collect::<Vec<_>>())?;
            (report, Some(cfg.out.join("grid.png")), (images, LabelBatch::new(labels, k)?))
        }
        EvalInput::Samples(path) => {
            let samples = load_dataset(&cfg.dataset_spec(path))?;
            let images = preprocessed(cfg, &samples)?;
            let labels = LabelBatch::new(samples.labels.labels().to_vec(), k)?;
            let report = fid_per_class(
                &Target::Samples {
                    images: &images,
                    labels: &labels,
                },
                &val_images,
                &val_labels,
                extractor.as_ref(),
            )?;
            log::info!("sample directory given; no grid without a generator");
            (report, None, (images, labels))
        }
    };
    fs::write(cfg.out.join("fid.csv"), report.to_csv())?;
    let points = feature_projection(&val_images, &val_labels, &generated.0, &generated.1, extractor.as_ref())?;
    let projection = cfg.out.join("projection.csv");
    fs::write(&projection, scatter_csv(&points))?;
    Ok(EvalOutcome {
        report,
        grid,
        projection,
    })
}

/// Latents of the training set under a stage-1 checkpoint, projected to 2-D,
/// with their class silhouette. Writes `latents.csv` and `silhouette.txt`.
pub fn plot_latents(cfg: &RunConfig, checkpoint: &Path) -> Result<Dispersion> {
    echo_config(cfg)?;
    let stage1 = Stage1::load(checkpoint)?;
    let dataset = load_scheduled(cfg)?;
    let images = preprocessed(cfg, &dataset)?.to_tensor();
    let labels = dataset.labels.to_tensor();
    let latents: Tensor = tch::no_grad(|| match &stage1 {
        Stage1::Supervised(ae) => bagan::autoencoder::batched_inference(&images, 256, |x, idx| {
            ae.labeled_latents(x, &labels.index_select(0, idx), false)
        }),
        Stage1::Unsupervised(ae) => {
            bagan::autoencoder::batched_inference(&images, 256, |x, _| ae.encoder.forward(x, false))
        }
    })?;
    let method = match cfg.eval.projection.as_str() {
        "tsne" => Projection::Tsne,
        _ => Projection::Pca,
    };
    let dispersion = latent_dispersion(&to_matrix(&latents)?, dataset.labels.labels(), method, cfg.seed)?;
    fs::write(cfg.out.join("latents.csv"), dispersion.to_csv(dataset.labels.labels()))?;
    let mut summary = format!("tag = {}\nsilhouette = {}\n", stage1.tag(), dispersion.silhouette);
    if dispersion.degenerate {
        summary.push_str("warning = all latents coincide\n");
    }
    fs::write(cfg.out.join("silhouette.txt"), summary)?;
    Ok(dispersion)
}
