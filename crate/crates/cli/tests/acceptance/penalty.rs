//! Criterion 3: autograd gradient norms against central finite differences,
//! plus the two analytic penalty values.

use bagan::losses::{gradient_norms, gradient_penalty, value};
use bagan::rng;
use rand::Rng;
use tch::{Kind, Tensor};

use crate::Verdict;

const REL_TOL: f64 = 1e-4;
const EXACT_TOL: f64 = 1e-10;
const STEP: f64 = 1e-5;

/// `D(x) = v · tanh(W x + b)` in f64, small enough to difference by hand.
struct ToyCritic {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    v: Vec<f64>,
}

impl ToyCritic {
    fn random(rng: &mut impl Rng, d: usize, h: usize) -> Self {
        let mut u = || rng.gen::<f64>() * 2.0 - 1.0;
        // fan-in scaling keeps tanh out of saturation
        let scale = 1.0 / (d as f64).sqrt();
        Self {
            w: (0..h).map(|_| (0..d).map(|_| u() * scale).collect()).collect(),
            b: (0..h).map(|_| u()).collect(),
            v: (0..h).map(|_| u()).collect(),
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.w
            .iter()
            .zip(&self.b)
            .zip(&self.v)
            .map(|((row, b), v)| v * (row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b).tanh())
            .sum()
    }

    fn tensor(&self, x: &Tensor) -> Tensor {
        let w: Vec<f64> = self.w.iter().flatten().copied().collect();
        let w = Tensor::from_slice(&w).view([self.w.len() as i64, -1]);
        let hidden = (x.matmul(&w.tr()) + Tensor::from_slice(&self.b)).tanh();
        hidden.matmul(&Tensor::from_slice(&self.v))
    }

    fn fd_norm(&self, x: &[f64]) -> f64 {
        let mut sq = 0.0;
        let mut probe = x.to_vec();
        for j in 0..x.len() {
            probe[j] = x[j] + STEP;
            let up = self.eval(&probe);
            probe[j] = x[j] - STEP;
            let down = self.eval(&probe);
            probe[j] = x[j];
            sq += ((up - down) / (2.0 * STEP)).powi(2);
        }
        sq.sqrt()
    }
}

pub fn criterion() -> bagan::Result<Verdict> {
    let mut rng = rng::seeded(3);
    let mut worst_rel: f64 = 0.0;
    let mut samples = 0;
    for _ in 0..50 {
        let (n, d, h) = (rng.gen_range(1..=16), rng.gen_range(1..=12), rng.gen_range(1..=10));
        let critic = ToyCritic::random(&mut rng, d, h);
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let xt = Tensor::from_slice(&x).view([n as i64, d as i64]);
        let norms = gradient_norms(|x| Ok(critic.tensor(x)), &xt)?;
        let norms = Vec::<f64>::try_from(norms.to_kind(Kind::Double))?;
        for (i, got) in norms.iter().enumerate() {
            let want = critic.fd_norm(&x[i * d..(i + 1) * d]);
            let rel = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
            worst_rel = if rel.is_nan() { f64::INFINITY } else { worst_rel.max(rel) };
            samples += 1;
        }
    }

    // unit-slope linear critic: ‖∇D‖ = 1 everywhere
    let d = 7;
    let u: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
    let len = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u = Tensor::from_slice(&u.iter().map(|v| v / len).collect::<Vec<_>>());
    let x = Tensor::from_slice(&(0..32 * d).map(|_| rng.gen::<f64>()).collect::<Vec<_>>()).view([32, d as i64]);
    let linear = value(&gradient_penalty(|x| Ok(x.matmul(&u)), &x)?);
    // constant critic: still a function of x so autograd sees the input
    let constant = value(&gradient_penalty(|x| Ok(x.sum_dim_intlist(1, false, Kind::Double) * 0.0 + 3.5), &x)?);

    let pass = worst_rel <= REL_TOL && linear.abs() <= EXACT_TOL && (constant - 1.0).abs() <= EXACT_TOL;
    Ok(Verdict::new(
        pass,
        format!(
            "{samples} samples, worst relative error {worst_rel:.2e} (tol {REL_TOL:e}); GP linear {linear:.1e}, GP constant {constant}"
        ),
    ))
}
