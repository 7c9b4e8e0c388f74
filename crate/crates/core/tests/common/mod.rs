//! Independent oracles shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waelab::diffcore::{DiffError, ParamId, ParamSet, Tape, Tensor, Var};
use waelab::divergences::{Bandwidth, KernelSpec};
use waelab::models::WaeModel;

pub mod suites;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Largest accepted `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)`.
pub const GRAD_REL_TOL: f64 = 1e-4;

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>>;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[lo, hi)` and a random sign.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Relative error between backward-mode gradients of `Σ w ∘ f(inputs)` and
/// central differences, over every element of every input.
pub fn check_op(inputs: &[Tensor], f: &OpFn, seed: u64) -> f64 {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let w = uniform(&mut ChaCha8Rng::seed_from_u64(seed), &out_shape, -1.0, 1.0);
    let eval = |inputs: &[Tensor], leaves: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| if leaves { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let out = f(&mut tape, &vars).unwrap();
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let root = tape.sum(prod);
        (tape, vars, root)
    };

    let (tape, vars, root) = eval(inputs, true);
    let grads = tape.backward(root, &mut Default::default()).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.get(v).unwrap().to_vec()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let at = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[j] += delta;
                let (tape, _, root) = eval(&moved, false);
                tape.value(root).item()
            };
            numeric.push((at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

/// Relative error of parameter gradients of `loss(params, tape)` against
/// central differences over every parameter scalar. `loss` must be deterministic.
pub fn check_params(params: &ParamSet, loss: &dyn Fn(&ParamSet, &mut Tape) -> Var) -> f64 {
    let mut ps = params.clone();
    ps.zero_grad();
    let mut tape = Tape::new();
    let root = loss(&ps, &mut tape);
    tape.backward(root, &mut ps).unwrap();
    let analytic = ps.flat_grads().unwrap();

    let mut numeric = Vec::with_capacity(analytic.len());
    for pi in 0..params.len() {
        for j in 0..params.get(ParamId(pi)).tensor.numel() {
            let at = |delta: f64| {
                let mut moved = params.clone();
                moved.get_mut(ParamId(pi)).tensor.data_mut()[j] += delta;
                let mut tape = Tape::inference();
                let root = loss(&moved, &mut tape);
                tape.value(root).item()
            };
            numeric.push((at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

/// [`check_params`] for a whole model.
pub fn check_model(model: &WaeModel, loss: &dyn Fn(&WaeModel, &mut Tape) -> Var) -> f64 {
    check_params(&model.params, &|ps, tape| {
        let mut m = model.clone();
        m.params = ps.clone();
        loss(&m, tape)
    })
}

/// Kernel value computed straight from its formula.
pub fn kernel_oracle(k: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    match *k {
        KernelSpec::Imq { scale } => scale / (scale + d2),
        KernelSpec::Rbf { bandwidth: Bandwidth::Fixed(h) } => (-d2 / (2.0 * h * h)).exp(),
        KernelSpec::Rbf { bandwidth: Bandwidth::Median } => panic!("oracle needs a resolved bandwidth"),
    }
}

/// Unbiased MMD² by explicit double loops.
pub fn mmd_oracle(x: &Tensor, y: &Tensor, k: &KernelSpec) -> f64 {
    let (n, m) = (x.rows(), y.rows());
    let mut xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                xx += kernel_oracle(k, x.row(i), x.row(j));
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                yy += kernel_oracle(k, y.row(i), y.row(j));
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            xy += kernel_oracle(k, x.row(i), y.row(j));
        }
    }
    xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64 - 2.0 * xy / (n * m) as f64
}

/// Largest gap between the empirical CDF of `samples` and `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Features that are the true factor indices scaled to `[0, 1]`.
pub fn oracle_features(data: &waelab::datasets::LabeledImageDataset) -> Tensor {
    let counts = &data.grid.counts;
    let k = counts.len();
    let rows = (0..data.len())
        .flat_map(|i| {
            data.factors_of(i)
                .iter()
                .zip(counts)
                .map(|(&v, &c)| v as f64 / (c.max(2) - 1) as f64)
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(&[data.len(), k], rows).unwrap()
}

/// Standard normal features independent of the images.
pub fn random_features(n: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..n * d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    Tensor::new(&[n, d], data).unwrap()
}
