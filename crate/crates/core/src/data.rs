//! Dataset ingestion, per-class imbalance schedules and preprocessing into the
//! network input domain.
//!
//! Images are held host-side as `N × H × W × C` arrays of `f32`. Raw batches keep
//! the original `0..=255` pixel scale; [`preprocess`] resizes to 64×64 and maps
//! pixel values affinely onto `[-1, 1]`, the range of the generator's `tanh` output.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use ndarray::{s, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};

/// Side length every image is resized to before entering a network.
pub const IMAGE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeTag {
    Raw0To255,
    ScaledMinus1To1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Array4<f32>,
    range: RangeTag,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>, range: RangeTag) -> Result<Self> {
        if data.shape()[0] == 0 {
            return Err(Error::DimMismatch("image batch must hold at least one image".into()));
        }
        let channels = data.shape()[3];
        if channels != 1 && channels != 3 {
            return Err(Error::DimMismatch(format!("unsupported channel count {channels}")));
        }
        if range == RangeTag::ScaledMinus1To1 && data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::DimMismatch("scaled batch has values outside [-1, 1]".into()));
        }
        Ok(Self { data, range })
    }

    /// Builds a raw batch from `u8` pixels laid out `N × H × W × C`.
    pub fn from_u8(pixels: &[u8], shape: (usize, usize, usize, usize)) -> Result<Self> {
        let data = Array4::from_shape_vec(shape, pixels.iter().map(|&p| p as f32).collect())
            .map_err(|e| Error::DimMismatch(e.to_string()))?;
        Self::new(data, RangeTag::Raw0To255)
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(height, width, channels)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, index: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), index)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), indices),
            range: self.range,
        }
    }

    pub fn concat(batches: &[&ImageBatch]) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| Error::DimMismatch("nothing to concatenate".into()))?;
        if batches.iter().any(|b| b.range != first.range) {
            return Err(Error::DimMismatch("cannot mix raw and scaled batches".into()));
        }
        let views: Vec<_> = batches.iter().map(|b| b.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::DimMismatch(e.to_string()))?;
        Ok(Self { data, range: first.range })
    }

    /// Maps a scaled batch back to the `0..=255` scale (no rounding).
    pub fn to_raw(&self) -> Result<Self> {
        match self.range {
            RangeTag::Raw0To255 => Ok(self.clone()),
            RangeTag::ScaledMinus1To1 => Ok(Self {
                data: self.data.mapv(|v| (v + 1.0) * 127.5),
                range: RangeTag::Raw0To255,
            }),
        }
    }

    /// Quantized `u8` pixels in `N × H × W × C` order.
    pub fn to_u8(&self) -> Vec<u8> {
        let raw = match self.range {
            RangeTag::Raw0To255 => self.data.view().to_owned(),
            RangeTag::ScaledMinus1To1 => self.data.mapv(|v| (v + 1.0) * 127.5),
        };
        raw.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }

    /// Writes image `index` as an 8-bit PNG.
    pub fn save_png(&self, index: usize, path: &Path) -> Result<()> {
        let (h, w, c) = self.image_shape();
        let pixels = self.select(&[index]).to_u8();
        let color = if c == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(path, &pixels, w as u32, h as u32, color, image::ImageFormat::Png)?;
        Ok(())
    }

    /// `N × C × H × W` tensor, the layout the networks consume.
    pub fn to_tensor(&self) -> Tensor {
        let s = self.data.shape();
        let flat: Vec<f32> = self.data.iter().copied().collect();
        Tensor::from_slice(&flat)
            .view([s[0] as i64, s[1] as i64, s[2] as i64, s[3] as i64])
            .permute([0, 3, 1, 2])
            .contiguous()
    }

    /// Inverse of [`ImageBatch::to_tensor`] for network outputs in `[-1, 1]`.
    pub fn from_tensor(images: &Tensor) -> Result<Self> {
        let (n, c, h, w) = images
            .size4()
            .map_err(|_| Error::DimMismatch(format!("expected a rank-4 tensor, got {:?}", images.size())))?;
        let nhwc = images
            .detach()
            .to_device(Device::Cpu)
            .to_kind(Kind::Float)
            .permute([0, 2, 3, 1])
            .contiguous();
        let flat = Vec::<f32>::try_from(nhwc.flatten(0, -1))?;
        let data = Array4::from_shape_vec((n as usize, h as usize, w as usize, c as usize), flat)
            .map_err(|e| Error::DimMismatch(e.to_string()))?;
        Self::new(data.mapv(|v| v.clamp(-1.0, 1.0)), RangeTag::ScaledMinus1To1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<i64>,
    num_classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<i64>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l < 0 || l as usize >= num_classes) {
            return Err(Error::OutOfRangeLabel { label: bad, num_classes });
        }
        Ok(Self { labels, num_classes })
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    /// Optional; when empty the names come from the source.
    pub class_names: Vec<String>,
    /// Expected `(height, width, channels)` of the source images.
    pub image_shape: (usize, usize, usize),
    pub source: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: ImageBatch,
    pub labels: LabelBatch,
    pub class_names: Vec<String>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Loads every sample of `spec.source`, either an image-folder tree
/// (`root/<class_name>/*.png|jpg`) or a tensor container file.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let source = &spec.source;
    if !source.exists() {
        return Err(Error::MissingSource(source.clone()));
    }
    let dataset = if source.is_dir() {
        load_image_folder(source, spec.image_shape.2)?
    } else {
        let (images, labels) = read_container(source)?;
        let num_classes = if spec.class_names.is_empty() {
            labels.iter().copied().max().map_or(0, |m| m as usize + 1)
        } else {
            spec.class_names.len()
        };
        let class_names = if spec.class_names.is_empty() {
            (0..num_classes).map(|c| c.to_string()).collect()
        } else {
            spec.class_names.clone()
        };
        Dataset {
            images,
            labels: LabelBatch::new(labels, num_classes)?,
            class_names,
        }
    };
    if dataset.labels.num_classes() < 2 {
        return Err(Error::InvalidConfig(format!(
            "dataset {} has {} classes, need at least 2",
            spec.name,
            dataset.labels.num_classes()
        )));
    }
    let (h, w, c) = dataset.images.image_shape();
    let (eh, ew, ec) = spec.image_shape;
    if (eh, ew, ec) != (0, 0, 0) && (h, w, c) != (eh, ew, ec) {
        return Err(Error::DimMismatch(format!(
            "expected images of {eh}x{ew}x{ec}, found {h}x{w}x{c}"
        )));
    }
    Ok(dataset)
}

fn load_image_folder(root: &Path, channels: usize) -> Result<Dataset> {
    let mut class_dirs: Vec<(String, PathBuf)> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    class_dirs.sort();

    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<(usize, usize, usize)> = None;
    for (class, (_, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        for path in files {
            let img = image::open(&path).map_err(|_| Error::UndecodableImage(path.clone()))?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            let c = if channels == 0 {
                shape.map_or_else(|| if img.color().has_color() { 3 } else { 1 }, |s| s.2)
            } else {
                channels
            };
            match shape {
                None => shape = Some((h, w, c)),
                Some(s) if s != (h, w, c) => {
                    return Err(Error::DimMismatch(format!(
                        "{} is {h}x{w}, expected {}x{}",
                        path.display(),
                        s.0,
                        s.1
                    )))
                }
                _ => {}
            }
            if c == 1 {
                pixels.extend_from_slice(img.to_luma8().as_raw());
            } else {
                pixels.extend_from_slice(img.to_rgb8().as_raw());
            }
            labels.push(class as i64);
        }
    }
    let Some((h, w, c)) = shape else {
        return Err(Error::MissingSource(root.to_path_buf()));
    };
    let images = ImageBatch::from_u8(&pixels, (labels.len(), h, w, c))?;
    Ok(Dataset {
        images,
        labels: LabelBatch::new(labels, class_dirs.len())?,
        class_names: class_dirs.into_iter().map(|(name, _)| name).collect(),
    })
}

/// Writes a tensor container with arrays `images` (u8, N×H×W×C) and
/// `labels` (i64, N).
pub fn write_container(path: &Path, images: &ImageBatch, labels: &LabelBatch) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::LabelMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let pixels = images.to_u8();
    let (h, w, c) = images.image_shape();
    let label_bytes: Vec<u8> = labels.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
    let tensors = [
        ("images", TensorView::new(Dtype::U8, vec![images.len(), h, w, c], &pixels)?),
        ("labels", TensorView::new(Dtype::I64, vec![labels.len()], &label_bytes)?),
    ];
    let bytes = safetensors::serialize(tensors, &None)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a tensor container written by [`write_container`] (or any
/// safetensors file following the same naming).
pub fn read_container(path: &Path) -> Result<(ImageBatch, Vec<i64>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingSource(path.to_path_buf()),
        _ => e.into(),
    })?;
    let st = SafeTensors::deserialize(&bytes)?;
    let images = st.tensor("images")?;
    let labels = st.tensor("labels")?;
    if images.dtype() != Dtype::U8 || images.shape().len() != 4 {
        return Err(Error::Container("`images` must be u8 with shape N×H×W×C".into()));
    }
    if labels.dtype() != Dtype::I64 || labels.shape().len() != 1 {
        return Err(Error::Container("`labels` must be i64 with shape N".into()));
    }
    let s = images.shape();
    if s[0] == 0 {
        return Err(Error::MissingSource(path.to_path_buf()));
    }
    if s[0] != labels.shape()[0] {
        return Err(Error::LabelMismatch {
            images: s[0],
            labels: labels.shape()[0],
        });
    }
    let labels: Vec<i64> = labels
        .data()
        .chunks_exact(8)
        .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((ImageBatch::from_u8(images.data(), (s[0], s[1], s[2], s[3]))?, labels))
}

/// Exact per-class sample counts plus the seed of the subsampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImbalanceSchedule {
    pub per_class_target: BTreeMap<usize, usize>,
    pub seed: u64,
}

impl ImbalanceSchedule {
    pub fn new(targets: impl IntoIterator<Item = (usize, usize)>, seed: u64) -> Result<Self> {
        let per_class_target: BTreeMap<_, _> = targets.into_iter().collect();
        if let Some((class, _)) = per_class_target.iter().find(|(_, &n)| n == 0) {
            return Err(Error::InvalidConfig(format!("class {class} has a target of 0")));
        }
        if per_class_target.is_empty() {
            return Err(Error::InvalidConfig("schedule has no classes".into()));
        }
        Ok(Self { per_class_target, seed })
    }

    /// Parses `class_index = count` lines plus one `seed = <int>` line.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("line {line}: {msg}"),
        };
        let mut targets = BTreeMap::new();
        let mut seed = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let value: u64 = value
                .parse()
                .map_err(|_| err(i + 1, format!("`{value}` is not a non-negative integer")))?;
            if key == "seed" {
                seed = Some(value);
            } else {
                let class: usize = key
                    .parse()
                    .map_err(|_| err(i + 1, format!("unknown key `{key}`")))?;
                if targets.insert(class, value as usize).is_some() {
                    return Err(err(i + 1, format!("class {class} listed twice")));
                }
            }
        }
        let seed = seed.ok_or_else(|| err(0, "missing `seed = <int>`".into()))?;
        Self::new(targets, seed).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }
}

impl fmt::Display for ImbalanceSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed = {}", self.seed)?;
        for (class, count) in &self.per_class_target {
            writeln!(f, "{class} = {count}")?;
        }
        Ok(())
    }
}

/// Seeded uniform subsample without replacement to the exact per-class
/// targets. Selected samples keep their original relative order, so applying
/// the same schedule to its own output is the identity. Classes absent from
/// the schedule are dropped.
pub fn apply_schedule(
    images: &ImageBatch,
    labels: &LabelBatch,
    schedule: &ImbalanceSchedule,
) -> Result<(ImageBatch, LabelBatch)> {
    if images.len() != labels.len() {
        return Err(Error::LabelMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut selected = Vec::new();
    for (&class, &target) in &schedule.per_class_target {
        if class >= labels.num_classes() {
            return Err(Error::OutOfRangeLabel {
                label: class as i64,
                num_classes: labels.num_classes(),
            });
        }
        let pool = labels.indices_of(class);
        if target > pool.len() {
            return Err(Error::TargetExceedsAvailable {
                class,
                requested: target,
                available: pool.len(),
            });
        }
        let picks = rand::seq::index::sample(&mut rng, pool.len(), target);
        selected.extend(picks.into_iter().map(|i| pool[i]));
    }
    selected.sort_unstable();
    Ok((images.select(&selected), labels.select(&selected)))
}

/// Bilinear resize to 64×64 followed by `v / 127.5 - 1`.
pub fn preprocess(images: &ImageBatch) -> Result<ImageBatch> {
    if images.range() != RangeTag::Raw0To255 {
        return Err(Error::AlreadyScaled);
    }
    let resized = resize(images.data(), IMAGE_SIZE, IMAGE_SIZE);
    ImageBatch::new(
        resized.mapv(|v| (v / 127.5 - 1.0).clamp(-1.0, 1.0)),
        RangeTag::ScaledMinus1To1,
    )
}

fn resize(data: &Array4<f32>, height: usize, width: usize) -> Array4<f32> {
    let (n, h, w, c) = data.dim();
    if (h, w) == (height, width) {
        return data.clone();
    }
    let mut out = Array4::<f32>::zeros((n, height, width, c));
    for i in 0..n {
        let img: Vec<f32> = data.slice(s![i, .., .., ..]).iter().copied().collect();
        let resized: Vec<f32> = if c == 1 {
            let buf = ImageBuffer::<Luma<f32>, _>::from_raw(w as u32, h as u32, img).unwrap();
            imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle).into_raw()
        } else {
            let buf = ImageBuffer::<Rgb<f32>, _>::from_raw(w as u32, h as u32, img).unwrap();
            imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle).into_raw()
        };
        out.slice_mut(s![i, .., .., ..])
            .iter_mut()
            .zip(resized)
            .for_each(|(o, v)| *o = v);
    }
    out
}
