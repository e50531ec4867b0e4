//! Seeded sampling into tensors. Everything random in the crate draws from a
//! [`ChaCha8Rng`] owned by the caller, never from libtorch's global generator,
//! so runs are reproducible even when several run in one process.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tch::{Kind, Tensor};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Serializable position of a [`ChaCha8Rng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn encode(&self) -> String {
        let seed: String = self.seed.iter().map(|b| format!("{b:02x}")).collect();
        format!("{seed}:{}:{}", self.stream, self.word_pos)
    }

    pub fn decode(text: &str) -> Option<Self> {
        let mut parts = text.trim().split(':');
        let hex = parts.next()?;
        let stream = parts.next()?.parse().ok()?;
        let word_pos = parts.next()?.parse().ok()?;
        if hex.len() != 64 || parts.next().is_some() {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).ok()?;
        }
        Some(Self { seed, stream, word_pos })
    }
}

fn numel(shape: &[i64]) -> usize {
    shape.iter().product::<i64>() as usize
}

pub fn normal(rng: &mut impl Rng, shape: &[i64], kind: Kind) -> Tensor {
    let values: Vec<f64> = (0..numel(shape)).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_slice(&values).view(shape).to_kind(kind)
}

/// Uniform on `[0, 1)`.
pub fn uniform(rng: &mut impl Rng, shape: &[i64], kind: Kind) -> Tensor {
    let values: Vec<f64> = (0..numel(shape)).map(|_| rng.gen::<f64>()).collect();
    Tensor::from_slice(&values).view(shape).to_kind(kind)
}
