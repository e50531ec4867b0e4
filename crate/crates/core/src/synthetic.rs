//! Toy dataset of visually similar classes: every image is the same noisy disk
//! on a dark background, and classes differ only by a small bright mark whose
//! position around the disk center encodes the class.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{ImageBatch, LabelBatch, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::rng;

const DISK_RADIUS: f64 = 18.0;
const MARK_OFFSET: f64 = 9.0;
const MARK_HALF: i64 = 3;
const JITTER: f64 = 4.0;

/// Class counts used by the dispersion and training checks.
pub const TOY_COUNTS: [usize; 4] = [500, 50, 50, 100];

/// Raw (`0..=255`) 64×64 images with `counts[c]` samples of class `c`, in
/// class order.
pub fn similar_shapes(counts: &[usize], channels: usize, seed: u64) -> Result<(ImageBatch, LabelBatch)> {
    if counts.len() < 2 {
        return Err(Error::InvalidConfig("need at least two classes".into()));
    }
    let k = counts.len();
    let n: usize = counts.iter().sum();
    let s = IMAGE_SIZE;
    let mut rng = rng::seeded(seed);
    let noise = Normal::new(0.0, 6.0).expect("valid normal");
    let mut pixels = Vec::with_capacity(n * s * s * channels);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        let angle = std::f64::consts::TAU * class as f64 / k as f64;
        for _ in 0..count {
            let cx = s as f64 / 2.0 + rng.gen_range(-JITTER..JITTER);
            let cy = s as f64 / 2.0 + rng.gen_range(-JITTER..JITTER);
            let radius = DISK_RADIUS + rng.gen_range(-2.0..2.0);
            let shade = rng.gen_range(150.0..190.0);
            let mx = (cx + MARK_OFFSET * angle.cos()).round() as i64;
            let my = (cy + MARK_OFFSET * angle.sin()).round() as i64;
            for y in 0..s {
                for x in 0..s {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let mut v: f64 = if dx * dx + dy * dy <= radius * radius { shade } else { 20.0 };
                    if (x as i64 - mx).abs() <= MARK_HALF && (y as i64 - my).abs() <= MARK_HALF {
                        v = 255.0;
                    }
                    v += noise.sample(&mut rng);
                    let v = v.clamp(0.0, 255.0).round() as u8;
                    pixels.extend(std::iter::repeat(v).take(channels));
                }
            }
            labels.push(class as i64);
        }
    }
    Ok((
        ImageBatch::from_u8(&pixels, (n, s, s, channels))?,
        LabelBatch::new(labels, k)?,
    ))
}
