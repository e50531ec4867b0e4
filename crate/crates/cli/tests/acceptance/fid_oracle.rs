//! Criterion 4: `fid` against a double-double oracle that never forms a
//! matrix square root. With `Σa = L Lᵀ`, the spectrum of `Lᵀ Σb L` equals that
//! of `√Σa Σb √Σa`, so `tr √(Σa Σb) = Σ √λ_i(Lᵀ Σb L)`; the eigenvalues come
//! from cyclic Jacobi rotations in ~106-bit arithmetic.

use bagan::evaluation::{fid, FeatureStats};
use bagan::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use twofloat::TwoFloat;

use crate::Verdict;

const ORACLE_TOL: f64 = 1e-6;
const SELF_TOL: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-8;
const ROTATION_TOL: f64 = 1e-6;
const PAIRS: usize = 100;

type Dd = TwoFloat;

fn dd(x: f64) -> Dd {
    Dd::from(x)
}

fn cholesky(a: &[Vec<Dd>]) -> Vec<Vec<Dd>> {
    let n = a.len();
    let mut l = vec![vec![dd(0.0); n]; n];
    for j in 0..n {
        let mut diag = a[j][j];
        for k in 0..j {
            diag -= l[j][k] * l[j][k];
        }
        l[j][j] = diag.sqrt();
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / l[j][j];
        }
    }
    l
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi sweeps.
fn jacobi_eigenvalues(mut a: Vec<Vec<Dd>>) -> Vec<Dd> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j].hi().powi(2))
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i].hi().powi(2)).sum();
        if off <= 1e-60 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].hi() == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (dd(2.0) * a[p][q]);
                let sign = if theta.hi() >= 0.0 { dd(1.0) } else { dd(-1.0) };
                let t = sign / (theta.abs() + (theta * theta + dd(1.0)).sqrt());
                let c = dd(1.0) / (t * t + dd(1.0)).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

fn to_dd(m: &DMatrix<f64>) -> Vec<Vec<Dd>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| dd(m[(i, j)])).collect()).collect()
}

fn oracle(a: &FeatureStats, b: &FeatureStats) -> f64 {
    let n = a.mean.len();
    let sa = to_dd(&a.covariance);
    let sb = to_dd(&b.covariance);
    let l = cholesky(&sa);
    // M = Lᵀ Σb L
    let mut bl = vec![vec![dd(0.0); n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = dd(0.0);
            for k in j..n {
                s += sb[i][k] * l[k][j];
            }
            bl[i][j] = s;
        }
    }
    let mut m = vec![vec![dd(0.0); n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = dd(0.0);
            for k in i..n {
                s += l[k][i] * bl[k][j];
            }
            m[i][j] = s;
        }
    }
    let mut total = dd(0.0);
    for i in 0..n {
        let diff = dd(a.mean[i]) - dd(b.mean[i]);
        total += diff * diff + sa[i][i] + sb[i][i];
    }
    for lambda in jacobi_eigenvalues(m) {
        if lambda.hi() > 0.0 {
            total -= dd(2.0) * lambda.sqrt();
        }
    }
    total.hi()
}

fn centered(rng: &mut impl Rng) -> f64 {
    rng.gen::<f64>() * 2.0 - 1.0
}

fn random_stats(rng: &mut impl Rng, d: usize) -> FeatureStats {
    let scale = [0.1, 1.0, 10.0][rng.gen_range(0..3)];
    let extra = d + rng.gen_range(1..8);
    let a = DMatrix::from_fn(d, extra, |_, _| centered(rng) * scale);
    FeatureStats {
        mean: DVector::from_fn(d, |_, _| centered(rng) * scale),
        covariance: &a * a.transpose() / extra as f64,
        count: extra,
    }
}

fn rotated(s: &FeatureStats, q: &DMatrix<f64>) -> FeatureStats {
    let c = q * &s.covariance * q.transpose();
    FeatureStats {
        mean: q * &s.mean,
        covariance: (&c + c.transpose()) * 0.5,
        count: s.count,
    }
}

pub fn criterion() -> bagan::Result<Verdict> {
    let mut rng = rng::seeded(4);
    let (mut worst_oracle, mut worst_self, mut worst_sym, mut worst_rot) = (0f64, 0f64, 0f64, 0f64);
    for _ in 0..PAIRS {
        let d = rng.gen_range(8..=64);
        let a = random_stats(&mut rng, d);
        let b = random_stats(&mut rng, d);
        let got = fid(&a, &b)?;
        worst_oracle = worst_oracle.max((got - oracle(&a, &b)).abs());
        worst_self = worst_self.max(fid(&a, &a)?.abs());
        worst_sym = worst_sym.max((got - fid(&b, &a)?).abs());
        let q = DMatrix::from_fn(d, d, |_, _| centered(&mut rng)).qr().q();
        worst_rot = worst_rot.max((got - fid(&rotated(&a, &q), &rotated(&b, &q))?).abs());
    }
    let pass = worst_oracle <= ORACLE_TOL && worst_self < SELF_TOL && worst_sym <= SYMMETRY_TOL && worst_rot <= ROTATION_TOL;
    Ok(Verdict::new(
        pass,
        format!(
            "{PAIRS} pairs: oracle {worst_oracle:.1e} (tol {ORACLE_TOL:e}), self {worst_self:.1e}, symmetry {worst_sym:.1e}, rotation {worst_rot:.1e}"
        ),
    ))
}
