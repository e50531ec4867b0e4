//! Criterion 2: every loss against its textbook formula, evaluated naively in
//! plain f64 with `σ(x) = 1 / (1 + e^{-x})`.

use std::f64::consts::LN_2;

use bagan::losses::{
    bagan_gp_d_loss, bagan_gp_g_loss, cdragan_d_loss, dragan_d_loss, original_d_loss, original_g_loss, value,
    wgan_d_objective, wgan_g_loss, Critic, InterpolationMode, LossConfig, LossVariant,
};
use bagan::rng;
use rand::Rng;
use tch::{Kind, Tensor};

use crate::Verdict;

const TOL: f64 = 1e-6;
const BATCHES: usize = 1000;
/// Largest logit magnitude drawn; keeps the naive `ln(1 - σ)` accurate.
const LOGIT_BOUND: f64 = 15.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn naive_d(real: &[f64], fake: &[f64]) -> f64 {
    -mean(real.iter().map(|&x| sigmoid(x).ln())) - mean(fake.iter().map(|&x| (1.0 - sigmoid(x)).ln()))
}

fn naive_g(fake: &[f64]) -> f64 {
    -mean(fake.iter().map(|&x| sigmoid(x).ln()))
}

fn logits(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let scale = [0.1, 1.0, 4.0, 10.0][rng.gen_range(0..4)];
    (0..n)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
        .map(|x: f64| x.clamp(-LOGIT_BOUND, LOGIT_BOUND))
        .collect()
}

fn t(v: &[f64]) -> Tensor {
    Tensor::from_slice(v)
}

/// `D(x, y) = x·w + table[y]`: a linear critic whose input gradient is `w`
/// everywhere, so its penalty is `(‖w‖ - 1)²` exactly.
struct LinearCritic {
    w: Vec<f64>,
    table: Vec<f64>,
}

impl LinearCritic {
    fn score(&self, x: &[f64], y: usize) -> f64 {
        x.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.table[y]
    }

    fn w(&self) -> Tensor {
        Tensor::from_slice(&self.w).view([-1, 1])
    }

    fn penalty(&self) -> f64 {
        (self.w.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).powi(2)
    }
}

impl Critic for LinearCritic {
    fn logits(&self, images: &Tensor, labels: &Tensor) -> bagan::Result<Tensor> {
        self.logits_embedded(images, &self.embed_labels(labels)?)
    }

    fn embed_labels(&self, labels: &Tensor) -> bagan::Result<Tensor> {
        Ok(Tensor::from_slice(&self.table).index_select(0, labels).view([-1, 1]))
    }

    fn logits_embedded(&self, images: &Tensor, label_vectors: &Tensor) -> bagan::Result<Tensor> {
        Ok((images.matmul(&self.w()) + label_vectors).view([-1]))
    }
}

fn rows(flat: &[f64], d: usize) -> Vec<&[f64]> {
    flat.chunks(d).collect()
}

fn labels(rng: &mut impl Rng, n: usize, k: usize) -> Vec<i64> {
    (0..n).map(|_| rng.gen_range(0..k as i64)).collect()
}

struct Tally {
    worst: f64,
    checks: usize,
}

impl Tally {
    fn check(&mut self, got: f64, want: f64) {
        let err = (got - want).abs();
        self.worst = if err.is_nan() { f64::INFINITY } else { self.worst.max(err) };
        self.checks += 1;
    }
}

fn batch(rng: &mut impl Rng, tally: &mut Tally) -> bagan::Result<()> {
    let n = rng.gen_range(1..=64);
    let real = logits(rng, n);
    let fake = logits(rng, n);
    tally.check(value(&original_d_loss(&t(&real), &t(&fake))?), naive_d(&real, &fake));
    tally.check(value(&original_g_loss(&t(&fake))?), naive_g(&fake));
    tally.check(value(&wgan_d_objective(&t(&real), &t(&fake))?), mean(real.iter().copied()) - mean(fake.iter().copied()));
    tally.check(value(&wgan_g_loss(&t(&fake))?), -mean(fake.iter().copied()));
    let gp = rng.gen::<f64>() * 3.0;
    let lambda = rng.gen::<f64>() * 20.0;
    tally.check(
        value(&dragan_d_loss(&t(&real), &t(&fake), &Tensor::from(gp), lambda)?),
        naive_d(&real, &fake) + lambda * gp,
    );

    // conditional losses through a linear critic with an exact penalty
    let (d, k) = (rng.gen_range(1..=8), rng.gen_range(2..=6));
    let critic = LinearCritic {
        w: (0..d).map(|_| rng.gen::<f64>() * 0.8 - 0.4).collect(),
        table: logits(rng, k),
    };
    let xr: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let z: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let (yr, yf) = (labels(rng, n, k), labels(rng, n, k));
    let yw: Vec<i64> = yr.iter().map(|&y| (y + rng.gen_range(1..k as i64)) % k as i64).collect();
    let (xr_t, z_t) = (t(&xr).view([n as i64, d as i64]), t(&z).view([n as i64, d as i64]));
    let (yr_t, yf_t, yw_t) = (Tensor::from_slice(&yr), Tensor::from_slice(&yf), Tensor::from_slice(&yw));
    let score = |x: &[f64], y: &[i64]| -> Vec<f64> {
        rows(x, d).iter().zip(y).map(|(r, &c)| critic.score(r, c as usize)).collect()
    };
    // the identity generator makes G(z, y) = z
    let generator = |z: &Tensor, _: &Tensor| -> bagan::Result<Tensor> { Ok(z.shallow_clone()) };

    let mut cfg = LossConfig {
        variant: LossVariant::BaganGp,
        lambda,
        ..Default::default()
    };
    cfg.wrong_label_term = rng.gen();
    let wrong = if cfg.wrong_label_term {
        -mean(score(&xr, &yw).iter().map(|&x| (1.0 - sigmoid(x)).ln()))
    } else {
        0.0
    };
    let want = naive_d(&score(&xr, &yr), &score(&z, &yf)) + wrong + lambda * critic.penalty();
    let got = bagan_gp_d_loss(&critic, &generator, &xr_t, &yr_t, &z_t, &yf_t, &yw_t, &cfg, rng)?;
    tally.check(value(&got.total), want);
    tally.check(value(&got.penalty), critic.penalty());
    tally.check(
        value(&bagan_gp_g_loss(&critic, &generator, &z_t, &yf_t)?),
        naive_g(&score(&z, &yf)),
    );

    cfg.variant = LossVariant::Cdragan;
    cfg.interpolation = if rng.gen() { InterpolationMode::Model } else { InterpolationMode::Noise };
    let got = cdragan_d_loss(&critic, &xr_t, &yr_t, &z_t, &cfg, rng)?;
    tally.check(
        value(&got.total),
        naive_d(&score(&xr, &yr), &score(&z, &yr)) + lambda * critic.penalty(),
    );
    Ok(())
}

/// The symmetric original D-loss at zero logits and the balanced critic loss
/// of a constant-zero critic at λ = 0.
fn closed_forms() -> bagan::Result<(f64, f64)> {
    let zeros = Tensor::zeros([16], (Kind::Double, tch::Device::Cpu));
    let sym = value(&original_d_loss(&zeros, &zeros)?);
    let critic = LinearCritic {
        w: vec![0.0; 3],
        table: vec![0.0; 4],
    };
    let x = Tensor::ones([8, 3], (Kind::Double, tch::Device::Cpu));
    let y = Tensor::from_slice(&[0i64, 1, 2, 3, 0, 1, 2, 3]);
    let yw = Tensor::from_slice(&[1i64, 2, 3, 0, 1, 2, 3, 0]);
    let generator = |z: &Tensor, _: &Tensor| -> bagan::Result<Tensor> { Ok(z.shallow_clone()) };
    let cfg = LossConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let eq = bagan_gp_d_loss(&critic, &generator, &x, &y, &x, &y, &yw, &cfg, &mut rng::seeded(0))?;
    Ok((sym, value(&eq.total)))
}

pub fn criterion() -> bagan::Result<Verdict> {
    let mut rng = rng::seeded(2024);
    let mut tally = Tally { worst: 0.0, checks: 0 };
    for _ in 0..BATCHES {
        batch(&mut rng, &mut tally)?;
    }
    let (sym, three) = closed_forms()?;
    let sym_err = (sym - 2.0 * LN_2).abs();
    let three_err = (three - 3.0 * LN_2).abs();
    // "exactly" means to the last few ulps of the f64 result
    let exact = 1e-12;
    let pass = tally.worst <= TOL && sym_err <= exact && three_err <= exact;
    Ok(Verdict::new(
        pass,
        format!(
            "{} checks over {BATCHES} batches, worst |err| {:.2e} (tol {TOL:e}); 2ln2 err {sym_err:.1e}; 3ln2 err {three_err:.1e}",
            tally.checks, tally.worst
        ),
    ))
}
