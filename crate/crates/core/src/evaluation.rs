//! FID with a pluggable feature extractor, conditional image grids with a
//! shared noise vector per row, latent dispersion (silhouette) and joint
//! real/generated feature projections.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use tch::{Kind, Tensor};

use crate::data::{ImageBatch, LabelBatch, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::nets::GeneratorAssembly;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

/// Sample mean and covariance (denominator `N − 1`) of the rows of `features`.
pub fn compute_stats(features: &DMatrix<f64>) -> Result<FeatureStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mean = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let covariance = (&cov + cov.transpose()) * 0.5;
    Ok(FeatureStats {
        mean,
        covariance,
        count: n,
    })
}

/// Square root of a symmetric PSD matrix; eigenvalues are clamped at zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`.
///
/// The trace of `(Σ_a Σ_b)^{1/2}` is taken from the eigenvalues of the
/// symmetric similar matrix `Σ_a^{1/2} Σ_b Σ_a^{1/2}`. Negative eigenvalues
/// correspond to imaginary square roots: magnitudes below `1e−6·‖Σ‖` are
/// discarded, larger ones fail with `ComplexResidual`.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.covariance.nrows() != d || b.covariance.nrows() != d {
        return Err(Error::DimMismatch(format!(
            "feature dims {} and {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let root_a = psd_sqrt(&a.covariance);
    let m = &root_a * &b.covariance * &root_a;
    let m = (&m + m.transpose()) * 0.5;
    let scale = a.covariance.norm().max(b.covariance.norm());
    let mut trace_sqrt = 0.0;
    for v in SymmetricEigen::new(m).eigenvalues.iter() {
        if *v >= 0.0 {
            trace_sqrt += v.sqrt();
        } else if v.abs().sqrt() >= 1e-6 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::ComplexResidual(v.abs().sqrt()));
        }
    }
    let value = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * trace_sqrt;
    if value < 0.0 {
        if value >= -1e-8 {
            return Ok(0.0);
        }
        return Err(Error::ComplexResidual(value));
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassFid {
    pub class: usize,
    pub fid: f64,
    pub n_real: usize,
    pub n_gen: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidReport {
    pub per_class: Vec<ClassFid>,
    pub extractor_id: String,
}

impl FidReport {
    pub fn fid(&self, class: usize) -> Option<f64> {
        self.per_class.iter().find(|c| c.class == class).map(|c| c.fid)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,fid,n_real,n_gen,extractor_id\n");
        for c in &self.per_class {
            let _ = writeln!(out, "{},{},{},{},{}", c.class, c.fid, c.n_real, c.n_gen, self.extractor_id);
        }
        out
    }
}

/// Images to compare against the validation reals.
pub enum Target<'a> {
    /// Draw from a generator; `samples_per_class` defaults to the
    /// validation-class count.
    Generator {
        generator: &'a GeneratorAssembly,
        samples_per_class: Option<usize>,
        seed: u64,
    },
    Samples {
        images: &'a ImageBatch,
        labels: &'a LabelBatch,
    },
}

/// `n` images of class `class` from `g` in inference mode, with the noise
/// used.
pub fn generate_class(g: &GeneratorAssembly, class: usize, n: usize, seed: u64) -> Result<(ImageBatch, Tensor)> {
    if class >= g.num_classes() {
        return Err(Error::OutOfRangeLabel {
            label: class as i64,
            num_classes: g.num_classes(),
        });
    }
    let mut rng = rng::seeded(seed);
    let z = rng::normal(&mut rng, &[n as i64, g.latent_dim() as i64], Kind::Float);
    let labels = Tensor::full([n as i64], class as i64, (Kind::Int64, tch::Device::Cpu));
    let images = tch::no_grad(|| g.generate(&z, &labels, false))?;
    Ok((ImageBatch::from_tensor(&images)?, z))
}

/// Per-class FID between the target images of each class and the validation
/// reals of that class.
pub fn fid_per_class(
    target: &Target<'_>,
    real_images: &ImageBatch,
    real_labels: &LabelBatch,
    extractor: &dyn FeatureExtractor,
) -> Result<FidReport> {
    let k = real_labels.num_classes();
    let mut per_class = Vec::with_capacity(k);
    for class in 0..k {
        let real_idx = real_labels.indices_of(class);
        if real_idx.is_empty() {
            return Err(Error::EmptyClassInValidation(class));
        }
        let real = compute_stats(&extractor.features(&real_images.select(&real_idx))?)?;
        let gen_images = match target {
            Target::Generator {
                generator,
                samples_per_class,
                seed,
            } => {
                let n = samples_per_class.unwrap_or(real_idx.len());
                let class_seed = seed.wrapping_add(class as u64);
                generate_class(generator, class, n, class_seed)?.0
            }
            Target::Samples { images, labels } => {
                let idx = labels.indices_of(class);
                if idx.is_empty() {
                    return Err(Error::TooFewSamples(0));
                }
                images.select(&idx)
            }
        };
        let generated = compute_stats(&extractor.features(&gen_images)?)?;
        per_class.push(ClassFid {
            class,
            fid: fid(&real, &generated)?,
            n_real: real.count,
            n_gen: generated.count,
        });
    }
    Ok(FidReport {
        per_class,
        extractor_id: extractor.extractor_id(),
    })
}

/// Grid layout: row 0 holds one real image per class, row `r ≥ 1` holds
/// `G(z_{r−1}, class)` for every column.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub rows: usize,
    pub classes: Vec<usize>,
    pub seed: u64,
    /// `z[r]` is the noise shared by grid row `r + 1`.
    pub z: Vec<Vec<f32>>,
    /// Cells in row-major order, `(rows + 1) × classes.len()`.
    pub cells: Vec<ImageBatch>,
    /// Index of the real example shown for each class.
    pub real_indices: Vec<usize>,
}

impl ImageGrid {
    pub fn dims(&self) -> (usize, usize) {
        (self.rows + 1, self.classes.len())
    }

    pub fn cell(&self, row: usize, col: usize) -> &ImageBatch {
        &self.cells[row * self.classes.len() + col]
    }

    /// Noise index behind cell `(row, col)`; `None` for the real row.
    pub fn z_index(&self, row: usize, _col: usize) -> Option<usize> {
        row.checked_sub(1)
    }

    /// Sidecar text: seed, layout and the noise vector of every row.
    pub fn sidecar(&self) -> String {
        let (r, c) = self.dims();
        let mut out = format!("seed = {}\nrows = {r}\ncols = {c}\n", self.seed);
        let classes: Vec<String> = self.classes.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "classes = {}", classes.join(","));
        let reals: Vec<String> = self.real_indices.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "row0 = real {}", reals.join(","));
        for (i, z) in self.z.iter().enumerate() {
            let values: Vec<String> = z.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "row{} = z{} {}", i + 1, i, values.join(","));
        }
        out
    }

    /// Tiles the cells into one 8-bit image with a 2-pixel gutter.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        const GUTTER: usize = 2;
        let (rows, cols) = self.dims();
        let (h, w, channels) = self.cells[0].image_shape();
        let width = cols * w + (cols + 1) * GUTTER;
        let height = rows * h + (rows + 1) * GUTTER;
        let mut canvas = vec![0u8; width * height * channels];
        for r in 0..rows {
            for c in 0..cols {
                let pixels = self.cell(r, c).to_u8();
                let (x0, y0) = (GUTTER + c * (w + GUTTER), GUTTER + r * (h + GUTTER));
                for y in 0..h {
                    let src = &pixels[y * w * channels..(y + 1) * w * channels];
                    let start = ((y0 + y) * width + x0) * channels;
                    canvas[start..start + w * channels].copy_from_slice(src);
                }
            }
        }
        let mut bytes = Vec::new();
        let cursor = std::io::Cursor::new(&mut bytes);
        if channels == 1 {
            ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, canvas)
                .expect("canvas size")
                .write_to(&mut { cursor }, image::ImageFormat::Png)?;
        } else {
            ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, canvas)
                .expect("canvas size")
                .write_to(&mut { cursor }, image::ImageFormat::Png)?;
        }
        Ok(bytes)
    }

    /// Writes `<stem>.png` and `<stem>.txt` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.png")), self.to_png_bytes()?)?;
        fs::write(dir.join(format!("{stem}.txt")), self.sidecar())?;
        Ok(())
    }
}

/// Builds the conditional grid for `classes` with `rows` noise rows drawn
/// from `seed`. The first real example of each class fills row 0.
pub fn image_grid(
    g: &GeneratorAssembly,
    classes: &[usize],
    rows: usize,
    seed: u64,
    real_images: &ImageBatch,
    real_labels: &LabelBatch,
) -> Result<ImageGrid> {
    let mut real_indices = Vec::with_capacity(classes.len());
    for &c in classes {
        let idx = real_labels.indices_of(c);
        real_indices.push(*idx.first().ok_or(Error::MissingRealExample(c))?);
    }
    let mut cells: Vec<ImageBatch> = real_indices.iter().map(|&i| real_images.select(&[i])).collect();
    let mut rng = rng::seeded(seed);
    let z = rng::normal(&mut rng, &[rows as i64, g.latent_dim() as i64], Kind::Float);
    let k = classes.len() as i64;
    for r in 0..rows as i64 {
        let zr = z.get(r).unsqueeze(0).expand([k, -1], false).contiguous();
        let labels = Tensor::from_slice(&classes.iter().map(|&c| c as i64).collect::<Vec<_>>());
        let out = tch::no_grad(|| g.generate(&zr, &labels, false))?;
        let batch = ImageBatch::from_tensor(&out)?;
        for c in 0..classes.len() {
            cells.push(batch.select(&[c]));
        }
    }
    let z = (0..rows as i64)
        .map(|r| Vec::<f32>::try_from(&z.get(r)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if cells[0].image_shape().2 != cells.last().expect("non-empty").image_shape().2
        || cells[0].image_shape().0 != IMAGE_SIZE
    {
        return Err(Error::DimMismatch("real examples must be preprocessed 64×64 with the generator's channels".into()));
    }
    Ok(ImageGrid {
        rows,
        classes: classes.to_vec(),
        seed,
        z,
        cells,
        real_indices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Pca,
    Tsne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dispersion {
    pub points: Vec<[f64; 2]>,
    pub silhouette: f64,
    /// Set when every point coincides and the silhouette is defined as 0.
    pub degenerate: bool,
}

impl Dispersion {
    pub fn to_csv(&self, labels: &[i64]) -> String {
        let mut out = String::from("x,y,class\n");
        for (p, l) in self.points.iter().zip(labels) {
            let _ = writeln!(out, "{},{},{l}", p[0], p[1]);
        }
        out
    }
}

/// Mean silhouette with Euclidean distances; singleton clusters score 0.
pub fn silhouette(points: &DMatrix<f64>, labels: &[i64]) -> Result<f64> {
    let n = points.nrows();
    let mut classes: Vec<i64> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    let slot = |l: i64| classes.binary_search(&l).expect("known class");
    let sizes = labels.iter().fold(vec![0usize; classes.len()], |mut acc, &l| {
        acc[slot(l)] += 1;
        acc
    });
    let mut total = 0.0;
    let mut sums = vec![0.0; classes.len()];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[slot(labels[j])] += (points.row(i) - points.row(j)).norm();
            }
        }
        let own = slot(labels[i]);
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..classes.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Rows projected onto the top two principal axes (sign fixed so the largest
/// loading of each axis is positive).
pub fn pca_2d(points: &DMatrix<f64>) -> Vec<[f64; 2]> {
    let n = points.nrows();
    let mean = points.row_mean();
    let mut centered = points.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n.max(2) as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> DVector<f64> {
        match order.get(k) {
            Some(&i) => {
                let v = eig.eigenvectors.column(i).into_owned();
                let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if pivot < 0.0 {
                    -v
                } else {
                    v
                }
            }
            None => DVector::zeros(points.ncols()),
        }
    };
    let (a0, a1) = (axis(0), axis(1));
    centered
        .row_iter()
        .map(|r| [(r * &a0)[0], (r * &a1)[0]])
        .collect()
}

fn tsne_2d(points: &DMatrix<f64>, seed: u64) -> Vec<[f64; 2]> {
    let n = points.nrows();
    if n < 4 {
        return pca_2d(points);
    }
    let rows: Vec<Vec<f64>> = points.row_iter().map(|r| r.iter().copied().collect()).collect();
    let samples: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let mut rng = rng::seeded(seed);
    let init: Vec<f64> = Vec::<f64>::try_from(rng::normal(&mut rng, &[n as i64 * 2], Kind::Double) * 1e-4)
        .expect("double tensor");
    let perplexity = 30.0f64.min((n as f64 - 1.0) / 3.0);
    let mut tsne = bhtsne::tSNE::<f64, &[f64], 2>::new(&samples);
    tsne.perplexity(perplexity)
        .epochs(500)
        .initial_embedding(init)
        .exact(|a, b| a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>());
    tsne.embedding().chunks(2).map(|p| [p[0], p[1]]).collect()
}

/// 2-D projection for plotting plus the silhouette of `labels` in the full
/// latent space.
pub fn latent_dispersion(latents: &DMatrix<f64>, labels: &[i64], method: Projection, seed: u64) -> Result<Dispersion> {
    if latents.nrows() != labels.len() {
        return Err(Error::LabelMismatch {
            images: latents.nrows(),
            labels: labels.len(),
        });
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::SingleClass);
    }
    let spread = compute_stats(latents).map(|s| s.covariance.trace()).unwrap_or(0.0);
    let (silhouette, degenerate) = if spread <= 0.0 {
        log::warn!("all latents coincide; silhouette defined as 0");
        (0.0, true)
    } else {
        (silhouette(latents, labels)?, false)
    };
    let points = match method {
        Projection::Pca => pca_2d(latents),
        Projection::Tsne => tsne_2d(latents, seed),
    };
    Ok(Dispersion {
        points,
        silhouette,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub class: i64,
    pub is_real: bool,
}

pub fn scatter_csv(points: &[ScatterPoint]) -> String {
    let mut out = String::from("x,y,class,is_real\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.x, p.y, p.class, p.is_real as u8);
    }
    out
}

/// Extractor features of both sets projected jointly onto two principal
/// axes; reals come first in the output.
pub fn feature_projection(
    real: &ImageBatch,
    real_labels: &LabelBatch,
    generated: &ImageBatch,
    gen_labels: &LabelBatch,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<ScatterPoint>> {
    let fr = extractor.features(real)?;
    let fg = extractor.features(generated)?;
    if fr.ncols() != fg.ncols() {
        return Err(Error::DimMismatch("extractor returned differing feature widths".into()));
    }
    let mut joint = DMatrix::zeros(fr.nrows() + fg.nrows(), fr.ncols());
    joint.rows_mut(0, fr.nrows()).copy_from(&fr);
    joint.rows_mut(fr.nrows(), fg.nrows()).copy_from(&fg);
    let points = pca_2d(&joint);
    let tags = real_labels
        .labels()
        .iter()
        .map(|&c| (c, true))
        .chain(gen_labels.labels().iter().map(|&c| (c, false)));
    Ok(points
        .into_iter()
        .zip(tags)
        .map(|(p, (class, is_real))| ScatterPoint {
            x: p[0],
            y: p[1],
            class,
            is_real,
        })
        .collect())
}
