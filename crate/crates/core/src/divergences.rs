//! Latent priors and the divergences that compare encoded batches against
//! them: the unbiased MMD² estimator and the closed-form diagonal-Gaussian KL.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DivergenceError {
    #[error("kernel scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("need at least 2 samples on each side, got {0} and {1}")]
    TooFewSamples(usize, usize),
    #[error("median-heuristic bandwidth needs sample context")]
    UnresolvedBandwidth,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    StandardGaussian,
    UniformBox,
}

/// Latent prior: `N(0, I)` or uniform on `[−1, 1]^dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub dim: usize,
}

impl PriorSpec {
    pub fn gaussian(dim: usize) -> Self {
        Self {
            kind: PriorKind::StandardGaussian,
            dim,
        }
    }

    pub fn uniform_box(dim: usize) -> Self {
        Self {
            kind: PriorKind::UniformBox,
            dim,
        }
    }

    /// Per-coordinate variance of the prior marginal.
    pub fn marginal_variance(&self) -> f64 {
        match self.kind {
            PriorKind::StandardGaussian => 1.0,
            PriorKind::UniformBox => 1.0 / 3.0,
        }
    }

    /// IMQ kernel with `C = 2 · dim · σ²`.
    pub fn default_kernel(&self) -> KernelSpec {
        KernelSpec::Imq {
            scale: 2.0 * self.dim as f64 * self.marginal_variance(),
        }
    }
}

/// `n × dim` i.i.d. prior draws.
pub fn sample_prior(prior: &PriorSpec, n: usize, rng: &mut impl Rng) -> Tensor {
    let data: Vec<f64> = (0..n * prior.dim)
        .map(|_| match prior.kind {
            PriorKind::StandardGaussian => rng.sample(StandardNormal),
            PriorKind::UniformBox => rng.random_range(-1.0..=1.0),
        })
        .collect();
    Tensor::new(&[n, prior.dim], data).expect("prior sample shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled sample.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum KernelSpec {
    /// `C / (C + ‖x − y‖²)`.
    Imq { scale: f64 },
    /// `exp(−‖x − y‖² / (2h²))`.
    Rbf { bandwidth: Bandwidth },
}

impl KernelSpec {
    fn check(&self) -> Result<(), DivergenceError> {
        match *self {
            KernelSpec::Imq { scale } | KernelSpec::Rbf { bandwidth: Bandwidth::Fixed(scale) }
                if scale.is_nan() || scale <= 0.0 =>
            {
                Err(DivergenceError::NonPositiveScale(scale))
            }
            _ => Ok(()),
        }
    }

    /// Replaces a median bandwidth by its value on the pooled rows of `x`, `y`.
    pub fn resolve(&self, x: &Tensor, y: &Tensor) -> Result<KernelSpec, DivergenceError> {
        self.check()?;
        let KernelSpec::Rbf { bandwidth: Bandwidth::Median } = self else {
            return Ok(*self);
        };
        let rows: Vec<&[f64]> = x.row_iter().chain(y.row_iter()).collect();
        let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                d.push(sq_dist(rows[i], rows[j]).sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let h = if d.is_empty() { 1.0 } else { d[d.len() / 2] };
        Ok(KernelSpec::Rbf {
            bandwidth: Bandwidth::Fixed(if h > 0.0 { h } else { 1.0 }),
        })
    }

    fn of_sq_dist(&self, d2: f64) -> Result<f64, DivergenceError> {
        match *self {
            KernelSpec::Imq { scale } => Ok(scale / (scale + d2)),
            KernelSpec::Rbf {
                bandwidth: Bandwidth::Fixed(h),
            } => Ok((-d2 / (2.0 * h * h)).exp()),
            KernelSpec::Rbf {
                bandwidth: Bandwidth::Median,
            } => Err(DivergenceError::UnresolvedBandwidth),
        }
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn kernel_eval(k: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64, DivergenceError> {
    k.check()?;
    if x.len() != y.len() {
        return Err(DivergenceError::DimMismatch(x.len(), y.len()));
    }
    k.of_sq_dist(sq_dist(x, y))
}

fn check_samples(x: &Tensor, y: &Tensor) -> Result<(), DivergenceError> {
    if x.cols() != y.cols() {
        return Err(DivergenceError::DimMismatch(x.cols(), y.cols()));
    }
    if x.rows() < 2 || y.rows() < 2 {
        return Err(DivergenceError::TooFewSamples(x.rows(), y.rows()));
    }
    Ok(())
}

/// Mean of `k(aᵢ, aⱼ)` over ordered pairs `i ≠ j`.
fn within_mean(k: &KernelSpec, a: &Tensor) -> Result<f64, DivergenceError> {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += k.of_sq_dist(sq_dist(a.row(i), a.row(j)))?;
        }
    }
    Ok(2.0 * s / (n * (n - 1)) as f64)
}

/// Unbiased U-statistic estimate of MMD² between row samples `x` and `y`.
/// Can be negative.
pub fn mmd_sq_unbiased(x: &Tensor, y: &Tensor, k: &KernelSpec) -> Result<f64, DivergenceError> {
    check_samples(x, y)?;
    let k = k.resolve(x, y)?;
    let mut cross = 0.0;
    for xi in x.row_iter() {
        for yj in y.row_iter() {
            cross += k.of_sq_dist(sq_dist(xi, yj))?;
        }
    }
    let cross = cross / (x.rows() * y.rows()) as f64;
    Ok(within_mean(&k, x)? + within_mean(&k, y)? - 2.0 * cross)
}

/// The same estimator recorded on a tape; gradients flow into `x` only and
/// `y` enters as a constant.
pub fn mmd_sq_unbiased_var(
    tape: &mut Tape,
    x: Var,
    y: &Tensor,
    k: &KernelSpec,
) -> Result<Var, DivergenceError> {
    let xt = tape.value(x).clone();
    check_samples(&xt, y)?;
    let k = k.resolve(&xt, y)?;
    let (n, m) = (xt.rows(), y.rows());

    let kernel = |tape: &mut Tape, d: Var| -> Var {
        match k {
            KernelSpec::Imq { scale } => {
                let shifted = tape.add_scalar(d, scale);
                let inv = tape.pow(shifted, -1.0);
                tape.scale(inv, scale)
            }
            KernelSpec::Rbf {
                bandwidth: Bandwidth::Fixed(h),
            } => {
                let s = tape.scale(d, -1.0 / (2.0 * h * h));
                tape.exp(s)
            }
            KernelSpec::Rbf {
                bandwidth: Bandwidth::Median,
            } => unreachable!("resolved above"),
        }
    };

    let dxx = tape.pairwise_sq_dist(x, x)?;
    let kxx = kernel(tape, dxx);
    let mut off_diag = Tensor::filled(&[n, n], 1.0);
    for i in 0..n {
        off_diag.data_mut()[i * n + i] = 0.0;
    }
    let mask = tape.constant(off_diag);
    let kxx = tape.mul(kxx, mask)?;
    let sxx = tape.sum(kxx);
    let xx = tape.scale(sxx, 1.0 / (n * (n - 1)) as f64);

    let yc = tape.constant(y.clone());
    let dxy = tape.pairwise_sq_dist(x, yc)?;
    let kxy = kernel(tape, dxy);
    let sxy = tape.sum(kxy);
    let xy = tape.scale(sxy, -2.0 / (n * m) as f64);

    let yy = tape.constant(Tensor::scalar(within_mean(&k, y)?));
    let partial = tape.add(xx, xy)?;
    Ok(tape.add(partial, yy)?)
}

/// Batch mean of `½ Σᵢ (exp(lvᵢ) + μᵢ² − 1 − lvᵢ)`, the KL divergence of
/// `N(μ, diag(exp(lv)))` from `N(0, I)`.
pub fn gaussian_kl_diag(mu: &Tensor, log_var: &Tensor) -> Result<f64, DivergenceError> {
    if mu.shape() != log_var.shape() {
        return Err(DiffError::Shape(format!("kl mu {:?} vs log_var {:?}", mu.shape(), log_var.shape())).into());
    }
    let total: f64 = mu
        .data()
        .iter()
        .zip(log_var.data())
        .map(|(&m, &lv)| lv.exp() + m * m - 1.0 - lv)
        .sum();
    Ok(0.5 * total / mu.rows() as f64)
}

pub fn gaussian_kl_diag_var(tape: &mut Tape, mu: Var, log_var: Var) -> Result<Var, DivergenceError> {
    let n = tape.shape(mu)[0];
    let e = tape.exp(log_var);
    let m2 = tape.mul(mu, mu)?;
    let s = tape.add(e, m2)?;
    let s = tape.sub(s, log_var)?;
    let s = tape.add_scalar(s, -1.0);
    let total = tape.sum(s);
    Ok(tape.scale(total, 0.5 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_values() {
        let imq = KernelSpec::Imq { scale: 2.0 };
        let rbf = KernelSpec::Rbf {
            bandwidth: Bandwidth::Fixed(0.7),
        };
        let x = [0.3, -1.2];
        assert_eq!(kernel_eval(&imq, &x, &x).unwrap(), 1.0);
        assert_eq!(kernel_eval(&rbf, &x, &x).unwrap(), 1.0);
        assert_eq!(kernel_eval(&imq, &[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(
            kernel_eval(&KernelSpec::Imq { scale: 0.0 }, &x, &x),
            Err(DivergenceError::NonPositiveScale(_))
        ));
        assert!(kernel_eval(&imq, &x, &[1.0]).is_err());
    }

    #[test]
    fn two_by_two_expansion() {
        let k = KernelSpec::Imq { scale: 1.5 };
        let (a, b, c, d) = ([0.1, 0.2], [-0.4, 1.0], [2.0, 0.3], [0.5, -0.5]);
        let x = Tensor::from_rows(&[a.to_vec(), b.to_vec()]).unwrap();
        let y = Tensor::from_rows(&[c.to_vec(), d.to_vec()]).unwrap();
        let ke = |p: &[f64], q: &[f64]| kernel_eval(&k, p, q).unwrap();
        let expected = ke(&a, &b) + ke(&c, &d) - (ke(&a, &c) + ke(&a, &d) + ke(&b, &c) + ke(&b, &d)) / 2.0;
        let got = mmd_sq_unbiased(&x, &y, &k).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn too_few_samples() {
        let x = Tensor::zeros(&[1, 2]);
        let y = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            mmd_sq_unbiased(&x, &y, &KernelSpec::Imq { scale: 1.0 }),
            Err(DivergenceError::TooFewSamples(1, 4))
        ));
    }

    #[test]
    fn tape_estimator_matches_plain_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = sample_prior(&PriorSpec::gaussian(3), 7, &mut rng);
        let y = sample_prior(&PriorSpec::uniform_box(3), 5, &mut rng);
        for k in [
            KernelSpec::Imq { scale: 6.0 },
            KernelSpec::Rbf {
                bandwidth: Bandwidth::Median,
            },
        ] {
            let plain = mmd_sq_unbiased(&x, &y, &k).unwrap();
            let swapped = mmd_sq_unbiased(&y, &x, &k).unwrap();
            assert!((plain - swapped).abs() < 1e-14);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let v = mmd_sq_unbiased_var(&mut tape, xv, &y, &k).unwrap();
            assert!((tape.value(v).item() - plain).abs() < 1e-13);
        }
    }

    #[test]
    fn separated_gaussians_are_far_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = sample_prior(&PriorSpec::gaussian(2), 256, &mut rng);
        let y = sample_prior(&PriorSpec::gaussian(2), 256, &mut rng).map(|v| v + 5.0);
        let mmd = mmd_sq_unbiased(&x, &y, &KernelSpec::Imq { scale: 4.0 }).unwrap();
        assert!(mmd > 0.5, "mmd {mmd}");
    }

    #[test]
    fn prior_support_and_determinism() {
        let p = PriorSpec::uniform_box(4);
        let a = sample_prior(&p, 500, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_prior(&p, 500, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn gaussian_moments() {
        let p = PriorSpec::gaussian(3);
        let s = sample_prior(&p, 100_000, &mut ChaCha8Rng::seed_from_u64(8));
        for d in 0..3 {
            let col: Vec<f64> = s.row_iter().map(|r| r[d]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.03, "var {var}");
        }
    }

    #[test]
    fn kl_closed_form_values() {
        let z = Tensor::zeros(&[3, 2]);
        assert_eq!(gaussian_kl_diag(&z, &z).unwrap(), 0.0);
        let one = Tensor::filled(&[1, 1], 1.0);
        let zero = Tensor::zeros(&[1, 1]);
        assert_eq!(gaussian_kl_diag(&one, &zero).unwrap(), 0.5);
        let lv = Tensor::filled(&[1, 1], 4f64.ln());
        let kl = gaussian_kl_diag(&zero, &lv).unwrap();
        assert!((kl - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-15);
        assert!((kl - 0.8069).abs() < 1e-4);

        let mut tape = Tape::new();
        let m = tape.constant(one);
        let l = tape.constant(Tensor::filled(&[1, 1], 4f64.ln()));
        let v = gaussian_kl_diag_var(&mut tape, m, l).unwrap();
        assert!((tape.value(v).item() - (0.5 + kl)).abs() < 1e-15);
    }
}
