//! The four parametric networks and their assembly into a conditional
//! generator `G(z, c) = decoder(embed(c) ⊙ z)` and a conditional critic
//! `D(x, c) = head(trunk(x) ⊙ label_embed(c))`.
//!
//! Default topology: four stride-2 4×4 convolutions (64→4 spatial) in the
//! encoder/trunk and the mirrored transposed convolutions in the decoder,
//! with widths 64/128/256/512. Batch normalization appears only on the
//! decoder side.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use tch::nn::{self, Module, ModuleT};
use tch::{Device, Kind, Tensor};

use crate::data::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureConfig {
    pub latent_dim: usize,
    pub channels: usize,
    pub leaky_slope: f64,
    /// When false the decoder is built without batch normalization too.
    pub batch_norm_in_generator_only: bool,
    /// Feature widths of the four conv blocks, outermost first.
    pub widths: [usize; 4],
    /// Standard deviation of the normal initializer for conv/dense kernels.
    pub init_std: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            channels: 3,
            leaky_slope: 0.2,
            batch_norm_in_generator_only: true,
            widths: [64, 128, 256, 512],
            init_std: 0.02,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::InvalidConfig(format!("latent_dim {} < 2", self.latent_dim)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "leaky_slope {} outside (0, 1)",
                self.leaky_slope
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidConfig(format!("channels {} not in {{1, 3}}", self.channels)));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("conv widths must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("init_std {} must be positive", self.init_std)));
        }
        Ok(())
    }

    /// Length of the flattened trunk feature map (`4 × 4 × widths[3]`).
    pub fn feature_len(&self) -> usize {
        16 * self.widths[3]
    }

    pub fn to_manifest(&self, manifest: &mut Manifest) {
        manifest.set("latent_dim", self.latent_dim);
        manifest.set("channels", self.channels);
        manifest.set("leaky_slope", self.leaky_slope);
        manifest.set("batch_norm_in_generator_only", self.batch_norm_in_generator_only);
        manifest.set(
            "widths",
            self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        manifest.set("init_std", self.init_std);
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let widths: Vec<usize> = manifest
            .require("widths")?
            .split(',')
            .map(|w| w.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::CheckpointIncompatible("bad `widths` entry".into()))?;
        let widths: [usize; 4] = widths
            .try_into()
            .map_err(|_| Error::CheckpointIncompatible("`widths` needs four entries".into()))?;
        let cfg = Self {
            latent_dim: manifest.parse("latent_dim")?,
            channels: manifest.parse("channels")?,
            leaky_slope: manifest.parse("leaky_slope")?,
            batch_norm_in_generator_only: manifest.parse("batch_norm_in_generator_only")?,
            widths,
            init_std: manifest.parse("init_std")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Encoder,
    Decoder,
    Embedding { num_classes: usize },
    DiscTrunk,
    DiscLabelEmbed { num_classes: usize },
    DiscHead,
}

impl Topology {
    pub fn id(&self) -> &'static str {
        match self {
            Topology::Encoder => "encoder",
            Topology::Decoder => "decoder",
            Topology::Embedding { .. } => "embedding",
            Topology::DiscTrunk => "disc_trunk",
            Topology::DiscLabelEmbed { .. } => "disc_label_embed",
            Topology::DiscHead => "disc_head",
        }
    }

    pub fn from_id(id: &str, num_classes: usize) -> Result<Self> {
        Ok(match id {
            "encoder" => Topology::Encoder,
            "decoder" => Topology::Decoder,
            "embedding" => Topology::Embedding { num_classes },
            "disc_trunk" => Topology::DiscTrunk,
            "disc_label_embed" => Topology::DiscLabelEmbed { num_classes },
            "disc_head" => Topology::DiscHead,
            other => return Err(Error::CheckpointIncompatible(format!("unknown topology `{other}`"))),
        })
    }
}

enum Layers {
    Conv {
        convs: Vec<nn::Conv2D>,
        out: Option<nn::Linear>,
    },
    Deconv {
        fc: nn::Linear,
        norms: Vec<Option<nn::BatchNorm>>,
        deconvs: Vec<nn::ConvTranspose2D>,
    },
    Table(nn::Embedding),
    Dense(nn::Linear),
}

/// A differentiable parametric function with named, transferable weights.
pub struct NetworkHandle {
    topology: Topology,
    arch: ArchitectureConfig,
    vs: nn::VarStore,
    layers: Layers,
}

impl std::fmt::Debug for NetworkHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetworkHandle")
            .field("topology", &self.topology)
            .field("arch", &self.arch)
            .field("params", &self.vs.len())
            .finish()
    }
}

fn leaky(x: &Tensor, slope: f64) -> Tensor {
    x.relu() - (-x).relu() * slope
}

fn conv_stack(root: &nn::Path, arch: &ArchitectureConfig) -> Vec<nn::Conv2D> {
    let cfg = nn::ConvConfig {
        stride: 2,
        padding: 1,
        ..Default::default()
    };
    let mut in_ch = arch.channels as i64;
    arch.widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let conv = nn::conv2d(root / format!("conv{i}"), in_ch, w as i64, 4, cfg);
            in_ch = w as i64;
            conv
        })
        .collect()
}

impl NetworkHandle {
    fn build(topology: Topology, arch: &ArchitectureConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let layers = match topology {
            Topology::Encoder | Topology::DiscTrunk => {
                let convs = conv_stack(&root, arch);
                let out = (topology == Topology::Encoder).then(|| {
                    nn::linear(
                        &root / "out",
                        arch.feature_len() as i64,
                        arch.latent_dim as i64,
                        Default::default(),
                    )
                });
                Layers::Conv { convs, out }
            }
            Topology::Decoder => {
                let fc = nn::linear(
                    &root / "fc",
                    arch.latent_dim as i64,
                    arch.feature_len() as i64,
                    Default::default(),
                );
                let cfg = nn::ConvTransposeConfig {
                    stride: 2,
                    padding: 1,
                    ..Default::default()
                };
                let mut widths: Vec<usize> = arch.widths.iter().rev().copied().collect();
                widths.push(arch.channels);
                let norms = widths[..4]
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        arch.batch_norm_in_generator_only
                            .then(|| nn::batch_norm2d(&root / format!("bn{i}"), w as i64, Default::default()))
                    })
                    .collect();
                let deconvs = widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, pair)| {
                        nn::conv_transpose2d(&root / format!("deconv{i}"), pair[0] as i64, pair[1] as i64, 4, cfg)
                    })
                    .collect();
                Layers::Deconv { fc, norms, deconvs }
            }
            Topology::Embedding { num_classes } | Topology::DiscLabelEmbed { num_classes } => {
                if num_classes < 1 {
                    return Err(Error::InvalidConfig("embedding needs at least one class".into()));
                }
                let dim = if matches!(topology, Topology::Embedding { .. }) {
                    arch.latent_dim
                } else {
                    arch.feature_len()
                };
                Layers::Table(nn::embedding(
                    &root / "table",
                    num_classes as i64,
                    dim as i64,
                    Default::default(),
                ))
            }
            Topology::DiscHead => Layers::Dense(nn::linear(
                &root / "dense",
                arch.feature_len() as i64,
                1,
                Default::default(),
            )),
        };
        let net = Self {
            topology,
            arch: arch.clone(),
            vs,
            layers,
        };
        net.reinitialize(rng);
        Ok(net)
    }

    /// Redraws every weight from `rng`: kernels ~ N(0, init_std²), label
    /// tables ~ N(0, 1), biases 0, batch-norm scales 1.
    pub fn reinitialize(&self, rng: &mut impl Rng) {
        for (name, mut var) in self.weights() {
            let shape = var.size();
            let value = if name.ends_with(".bias") || name.ends_with("running_mean") {
                Tensor::zeros(&shape, (Kind::Float, Device::Cpu))
            } else if name.ends_with("running_var") || (name.starts_with("bn") && name.ends_with(".weight")) {
                Tensor::ones(&shape, (Kind::Float, Device::Cpu))
            } else if name.starts_with("table") {
                rng::normal(rng, &shape, Kind::Float)
            } else {
                rng::normal(rng, &shape, Kind::Float) * self.arch.init_std
            };
            tch::no_grad(|| var.copy_(&value));
        }
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn topology_id(&self) -> &'static str {
        self.topology.id()
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.topology {
            Topology::Embedding { num_classes } | Topology::DiscLabelEmbed { num_classes } => Some(num_classes),
            _ => None,
        }
    }

    /// Input shape with `-1` for the batch axis.
    pub fn input_signature(&self) -> Vec<i64> {
        let a = &self.arch;
        match self.topology {
            Topology::Encoder | Topology::DiscTrunk => {
                vec![-1, a.channels as i64, IMAGE_SIZE as i64, IMAGE_SIZE as i64]
            }
            Topology::Decoder => vec![-1, a.latent_dim as i64],
            Topology::Embedding { .. } | Topology::DiscLabelEmbed { .. } => vec![-1],
            Topology::DiscHead => vec![-1, a.feature_len() as i64],
        }
    }

    pub fn output_signature(&self) -> Vec<i64> {
        let a = &self.arch;
        match self.topology {
            Topology::Encoder | Topology::Embedding { .. } => vec![-1, a.latent_dim as i64],
            Topology::Decoder => vec![-1, a.channels as i64, IMAGE_SIZE as i64, IMAGE_SIZE as i64],
            Topology::DiscTrunk | Topology::DiscLabelEmbed { .. } => vec![-1, a.feature_len() as i64],
            Topology::DiscHead => vec![-1],
        }
    }

    /// All weights (trainable and running statistics), sorted by name.
    pub fn weights(&self) -> Vec<(String, Tensor)> {
        let mut named: Vec<_> = self.vs.variables().into_iter().collect();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        named
    }

    pub fn trainable_weights(&self) -> Vec<(String, Tensor)> {
        self.weights()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    /// Distinct layer names (`conv0`, `bn1`, `table`, ...).
    pub fn layer_names(&self) -> Vec<String> {
        let names: BTreeSet<String> = self
            .weights()
            .into_iter()
            .map(|(n, _)| n.split('.').next().unwrap_or_default().to_string())
            .collect();
        names.into_iter().collect()
    }

    pub fn has_batch_norm(&self) -> bool {
        matches!(&self.layers, Layers::Deconv { norms, .. } if norms.iter().any(Option::is_some))
    }

    pub fn weights_finite(&self) -> bool {
        self.weights()
            .iter()
            .all(|(_, t)| bool::try_from(t.isfinite().all()).unwrap_or(false))
    }

    pub fn freeze(&mut self) {
        self.vs.freeze();
    }

    pub fn unfreeze(&mut self) {
        self.vs.unfreeze();
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let expected = self.input_signature();
        let size = input.size();
        let ok = size.len() == expected.len()
            && size.first().is_some_and(|&n| n >= 1)
            && size.iter().zip(&expected).skip(1).all(|(a, b)| a == b);
        if !ok {
            return Err(Error::DimMismatch(format!(
                "{} expects input {:?}, got {:?}",
                self.topology_id(),
                expected,
                size
            )));
        }
        Ok(())
    }

    /// Evaluates the network. `train` switches batch normalization between
    /// batch statistics (updating running averages) and running statistics.
    pub fn forward(&self, input: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(input)?;
        let slope = self.arch.leaky_slope;
        Ok(match &self.layers {
            Layers::Conv { convs, out } => {
                let mut x = input.shallow_clone();
                for conv in convs {
                    x = leaky(&conv.forward(&x), slope);
                }
                let x = x.flatten(1, -1);
                match out {
                    Some(out) => out.forward(&x),
                    None => x,
                }
            }
            Layers::Deconv { fc, norms, deconvs } => {
                let w = self.arch.widths[3] as i64;
                let mut x = fc.forward(input).view([-1, w, 4, 4]);
                for (norm, deconv) in norms.iter().zip(deconvs) {
                    if let Some(norm) = norm {
                        x = norm.forward_t(&x, train);
                    }
                    x = deconv.forward(&leaky(&x, slope));
                }
                x.tanh()
            }
            Layers::Table(table) => {
                let n = self.num_classes().unwrap_or(0);
                if input.numel() > 0 {
                    let (lo, hi) = (input.min().int64_value(&[]), input.max().int64_value(&[]));
                    if lo < 0 || hi as usize >= n {
                        let label = if lo < 0 { lo } else { hi };
                        return Err(Error::OutOfRangeLabel { label, num_classes: n });
                    }
                }
                table.forward(&input.to_kind(Kind::Int64))
            }
            Layers::Dense(dense) => dense.forward(input).squeeze_dim(1),
        })
    }

    /// Fresh network of the same topology holding bitwise copies of all weights.
    pub fn try_clone(&self) -> Result<Self> {
        let mut rng = rng::seeded(0);
        let mut copy = Self::build(self.topology, &self.arch, &mut rng)?;
        copy.vs.copy(&self.vs)?;
        Ok(copy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.vs.save(path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.vs.load(path)?;
        Ok(())
    }
}

pub fn build_encoder(arch: &ArchitectureConfig, rng: &mut impl Rng) -> Result<NetworkHandle> {
    NetworkHandle::build(Topology::Encoder, arch, rng)
}

pub fn build_decoder(arch: &ArchitectureConfig, rng: &mut impl Rng) -> Result<NetworkHandle> {
    NetworkHandle::build(Topology::Decoder, arch, rng)
}

pub fn build_embedding(arch: &ArchitectureConfig, num_classes: usize, rng: &mut impl Rng) -> Result<NetworkHandle> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig(format!("embedding needs >= 2 classes, got {num_classes}")));
    }
    NetworkHandle::build(Topology::Embedding { num_classes }, arch, rng)
}

pub fn build_disc_trunk(arch: &ArchitectureConfig, rng: &mut impl Rng) -> Result<NetworkHandle> {
    NetworkHandle::build(Topology::DiscTrunk, arch, rng)
}

pub fn build_disc_label_embed(
    arch: &ArchitectureConfig,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<NetworkHandle> {
    if num_classes < 1 {
        return Err(Error::InvalidConfig("label embedding needs at least one class".into()));
    }
    NetworkHandle::build(Topology::DiscLabelEmbed { num_classes }, arch, rng)
}

pub fn build_disc_head(arch: &ArchitectureConfig, rng: &mut impl Rng) -> Result<NetworkHandle> {
    NetworkHandle::build(Topology::DiscHead, arch, rng)
}

/// Conditional generator `G(z, c) = decoder(embed(c) ⊙ z)`.
#[derive(Debug)]
pub struct GeneratorAssembly {
    pub embedding: NetworkHandle,
    pub decoder: NetworkHandle,
}

pub fn assemble_generator(embedding: NetworkHandle, decoder: NetworkHandle) -> Result<GeneratorAssembly> {
    if !matches!(embedding.topology(), Topology::Embedding { .. }) || decoder.topology() != Topology::Decoder {
        return Err(Error::DimMismatch(format!(
            "generator needs (embedding, decoder), got ({}, {})",
            embedding.topology_id(),
            decoder.topology_id()
        )));
    }
    let (e, d) = (embedding.output_signature()[1], decoder.input_signature()[1]);
    if e != d {
        return Err(Error::DimMismatch(format!("embedding width {e} != decoder input {d}")));
    }
    Ok(GeneratorAssembly { embedding, decoder })
}

impl GeneratorAssembly {
    pub fn generate(&self, z: &Tensor, labels: &Tensor, train: bool) -> Result<Tensor> {
        let conditioned = self.embedding.forward(labels, train)? * z;
        self.decoder.forward(&conditioned, train)
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.arch().latent_dim
    }

    pub fn num_classes(&self) -> usize {
        self.embedding.num_classes().unwrap_or(0)
    }

    pub fn trainable_weights(&self) -> Vec<(String, Tensor)> {
        prefixed(&[("embedding", &self.embedding), ("decoder", &self.decoder)])
    }

    pub fn try_clone(&self) -> Result<Self> {
        assemble_generator(self.embedding.try_clone()?, self.decoder.try_clone()?)
    }
}

/// Conditional critic `D(x, c) = head(trunk(x) ⊙ label_embed(c))`, emitting
/// one unconstrained logit per sample.
#[derive(Debug)]
pub struct DiscriminatorAssembly {
    pub trunk: NetworkHandle,
    pub label_embed: NetworkHandle,
    pub head: NetworkHandle,
}

pub fn assemble_discriminator(
    trunk: NetworkHandle,
    label_embed: NetworkHandle,
    head: NetworkHandle,
) -> Result<DiscriminatorAssembly> {
    let roles = (trunk.topology(), label_embed.topology(), head.topology());
    if !matches!(
        roles,
        (Topology::DiscTrunk, Topology::DiscLabelEmbed { .. }, Topology::DiscHead)
    ) {
        return Err(Error::DimMismatch(format!(
            "discriminator needs (disc_trunk, disc_label_embed, disc_head), got ({}, {}, {})",
            trunk.topology_id(),
            label_embed.topology_id(),
            head.topology_id()
        )));
    }
    let t = trunk.output_signature()[1];
    let l = label_embed.output_signature()[1];
    let h = head.input_signature()[1];
    if t != l || t != h {
        return Err(Error::DimMismatch(format!(
            "trunk features {t}, label embedding {l} and head input {h} must agree"
        )));
    }
    Ok(DiscriminatorAssembly {
        trunk,
        label_embed,
        head,
    })
}

impl DiscriminatorAssembly {
    pub fn logits(&self, images: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let label_vectors = self.label_vectors(labels)?;
        self.logits_with_label_vectors(images, &label_vectors)
    }

    pub fn label_vectors(&self, labels: &Tensor) -> Result<Tensor> {
        self.label_embed.forward(labels, true)
    }

    /// Scores images against already-embedded labels, which lets a caller
    /// differentiate through the label path.
    pub fn logits_with_label_vectors(&self, images: &Tensor, label_vectors: &Tensor) -> Result<Tensor> {
        let features = self.trunk.forward(images, true)?;
        if features.size() != label_vectors.size() {
            return Err(Error::DimMismatch(format!(
                "features {:?} vs label vectors {:?}",
                features.size(),
                label_vectors.size()
            )));
        }
        self.head.forward(&(features * label_vectors), true)
    }

    pub fn num_classes(&self) -> usize {
        self.label_embed.num_classes().unwrap_or(0)
    }

    pub fn has_batch_norm(&self) -> bool {
        self.trunk.has_batch_norm() || self.label_embed.has_batch_norm() || self.head.has_batch_norm()
    }

    pub fn trainable_weights(&self) -> Vec<(String, Tensor)> {
        prefixed(&[
            ("trunk", &self.trunk),
            ("label_embed", &self.label_embed),
            ("head", &self.head),
        ])
    }

    pub fn try_clone(&self) -> Result<Self> {
        assemble_discriminator(
            self.trunk.try_clone()?,
            self.label_embed.try_clone()?,
            self.head.try_clone()?,
        )
    }
}

fn prefixed(nets: &[(&str, &NetworkHandle)]) -> Vec<(String, Tensor)> {
    nets.iter()
        .flat_map(|(prefix, net)| {
            net.trainable_weights()
                .into_iter()
                .map(move |(name, t)| (format!("{prefix}.{name}"), t))
        })
        .collect()
}

/// Source layer name → target layer name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerMap(pub Vec<(String, String)>);

impl LayerMap {
    pub fn identity<S: AsRef<str>>(layers: &[S]) -> Self {
        Self(
            layers
                .iter()
                .map(|l| (l.as_ref().to_string(), l.as_ref().to_string()))
                .collect(),
        )
    }

    /// Every layer of `net` onto the same name.
    pub fn all(net: &NetworkHandle) -> Self {
        Self::identity(&net.layer_names())
    }

    /// Encoder convolution blocks onto a discriminator trunk.
    pub fn encoder_to_trunk() -> Self {
        Self::identity(&["conv0", "conv1", "conv2", "conv3"])
    }
}

/// Copies the mapped layers of `source` into `target` bit for bit; all other
/// target weights are left untouched.
pub fn transfer_weights(source: &NetworkHandle, target: &mut NetworkHandle, map: &LayerMap) -> Result<()> {
    let src: BTreeMap<String, Tensor> = source.weights().into_iter().collect();
    let dst: BTreeMap<String, Tensor> = target.weights().into_iter().collect();
    let mut pairs = Vec::new();
    for (from, to) in &map.0 {
        let src_params: Vec<_> = src
            .iter()
            .filter(|(n, _)| n.split('.').next() == Some(from.as_str()))
            .collect();
        if src_params.is_empty() {
            return Err(Error::ShapeMismatch(format!("{from} (absent in {})", source.topology_id())));
        }
        for (name, tensor) in src_params {
            let suffix = &name[from.len()..];
            let target_name = format!("{to}{suffix}");
            let dst_tensor = dst
                .get(&target_name)
                .ok_or_else(|| Error::ShapeMismatch(format!("{target_name} (absent in {})", target.topology_id())))?;
            if dst_tensor.size() != tensor.size() {
                return Err(Error::ShapeMismatch(format!(
                    "{target_name}: {:?} vs {:?}",
                    tensor.size(),
                    dst_tensor.size()
                )));
            }
            pairs.push((tensor.shallow_clone(), dst_tensor.shallow_clone()));
        }
    }
    // validated before any write so a failed transfer leaves the target intact
    for (src, mut dst) in pairs {
        tch::no_grad(|| dst.copy_(&src));
    }
    Ok(())
}

/// Key-value text manifest (`key = value` per line).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest(pub BTreeMap<String, String>);

pub const MANIFEST_FILE: &str = "manifest.txt";

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::CheckpointIncompatible(format!("manifest lacks `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.require(key)?
            .parse()
            .map_err(|_| Error::CheckpointIncompatible(format!("manifest `{key}` is malformed")))
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::CheckpointIncompatible(format!("manifest line {}: `{line}`", i + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::CheckpointIncompatible(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }
}

/// Writes one `<name>.safetensors` per network plus the manifest. The
/// manifest records the architecture, `num_classes` and `net.<name>` topology
/// ids next to whatever `manifest` already holds.
pub fn save_networks(dir: &Path, mut manifest: Manifest, nets: &[(&str, &NetworkHandle)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    if let Some((_, first)) = nets.first() {
        first.arch().to_manifest(&mut manifest);
    }
    for (name, net) in nets {
        if let Some(n) = net.num_classes() {
            manifest.set("num_classes", n);
        }
        manifest.set(&format!("net.{name}"), net.topology_id());
        net.save(&dir.join(format!("{name}.safetensors")))?;
    }
    manifest.save(dir)
}

/// Rebuilds network `name` from a checkpoint directory.
pub fn load_network(dir: &Path, manifest: &Manifest, name: &str) -> Result<NetworkHandle> {
    let arch = ArchitectureConfig::from_manifest(manifest)?;
    let num_classes = manifest.get("num_classes").and_then(|v| v.parse().ok()).unwrap_or(0);
    let topology = Topology::from_id(manifest.require(&format!("net.{name}"))?, num_classes)?;
    let mut net = NetworkHandle::build(topology, &arch, &mut rng::seeded(0))?;
    net.load(&dir.join(format!("{name}.safetensors")))?;
    Ok(net)
}
