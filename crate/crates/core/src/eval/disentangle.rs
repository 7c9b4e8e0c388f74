use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, EVAL_CHUNK};
use crate::datasets::{sample_pair_with_shared_factor, FactorGrid, LabeledImageDataset};
use crate::diffcore::Tensor;
use crate::models::WaeModel;

/// Multinomial logistic regression fitted by full-batch gradient descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 1.0,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Labelled feature vectors drawn in total (train + held out).
    pub n_points: usize,
    /// Pairs averaged into one feature vector.
    pub pairs_per_point: usize,
    pub test_fraction: f64,
    pub classifier: ClassifierConfig,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            n_points: 5000,
            pairs_per_point: 64,
            test_fraction: 0.2,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementResult {
    /// Held-out accuracy; the mean over replicates when there are several.
    pub accuracy: f64,
    pub factors: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub pairs_per_point: usize,
    pub train_accuracy: f64,
    pub replicate_accuracies: Vec<f64>,
}

/// Factor indices for the 5-variable task (every factor) or the 4-variable
/// task (every factor except shape).
pub fn factor_set(grid: &FactorGrid, size: usize) -> Result<Vec<usize>, EvalError> {
    let all: Vec<usize> = (0..grid.num_factors()).collect();
    if size == all.len() {
        return Ok(all);
    }
    match grid.factor_index("shape") {
        Some(shape) if size + 1 == all.len() => Ok(all.into_iter().filter(|&f| f != shape).collect()),
        _ => Err(EvalError::FactorSet(format!(
            "no {size}-variable task on a grid with factors {:?}",
            grid.names
        ))),
    }
}

/// Encoder means φ(x) of every dataset image, in row order.
pub fn encoder_features(model: &WaeModel, data: &LabeledImageDataset) -> Result<Tensor, EvalError> {
    let d = model.spec.latent_dim;
    let mut out = Vec::with_capacity(data.len() * d);
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        out.extend_from_slice(model.encode_mean(&data.batch(chunk))?.data());
    }
    Ok(Tensor::new(&[data.len(), d], out).map_err(crate::models::ModelError::from)?)
}

/// Accuracy of predicting which factor a set of image pairs shares from the
/// mean absolute difference of their representations.
///
/// `features` holds one representation row per dataset image.
pub fn disentanglement_score(
    features: &Tensor,
    data: &LabeledImageDataset,
    factors: &[usize],
    cfg: &MetricConfig,
    rng: &mut impl Rng,
) -> Result<DisentanglementResult, EvalError> {
    let k = factors.len();
    if k < 2 {
        return Err(EvalError::FactorSet(format!("need at least 2 factors, got {k}")));
    }
    if let Some(&f) = factors.iter().find(|&&f| f >= data.grid.num_factors()) {
        return Err(EvalError::FactorSet(format!("factor {f} out of range")));
    }
    if features.rows() != data.len() {
        return Err(EvalError::FactorSet(format!(
            "{} feature rows for {} images",
            features.rows(),
            data.len()
        )));
    }
    let n_test = (cfg.n_points as f64 * cfg.test_fraction).round() as usize;
    let n_train = cfg.n_points.saturating_sub(n_test);
    if n_train == 0 || n_test == 0 || cfg.pairs_per_point == 0 {
        return Err(EvalError::Empty("disentanglement_score"));
    }

    let d = features.cols();
    let mut x = Vec::with_capacity(cfg.n_points * d);
    let mut y = Vec::with_capacity(cfg.n_points);
    for _ in 0..cfg.n_points {
        let label = rng.random_range(0..k);
        let mut acc = vec![0.0; d];
        for _ in 0..cfg.pairs_per_point {
            let (a, b) = sample_pair_with_shared_factor(data, factors[label], rng)?;
            for ((s, u), v) in acc.iter_mut().zip(features.row(a)).zip(features.row(b)) {
                *s += (u - v).abs();
            }
        }
        x.extend(acc.iter().map(|s| s / cfg.pairs_per_point as f64));
        y.push(label);
    }

    let (x_train, x_test) = x.split_at(n_train * d);
    let (y_train, y_test) = y.split_at(n_train);
    let (mu, sd) = standardizer(x_train, d);
    let standardize = |rows: &[f64]| -> Vec<f64> {
        rows.chunks(d)
            .flat_map(|r| r.iter().zip(&mu).zip(&sd).map(|((v, m), s)| (v - m) / s))
            .collect()
    };
    let (x_train, x_test) = (standardize(x_train), standardize(x_test));
    let clf = Softmax::fit(&x_train, y_train, d, k, &cfg.classifier);
    let accuracy = clf.accuracy(&x_test, y_test);
    Ok(DisentanglementResult {
        accuracy,
        factors: factors.iter().map(|&f| data.grid.names[f].clone()).collect(),
        n_train,
        n_test,
        pairs_per_point: cfg.pairs_per_point,
        train_accuracy: clf.accuracy(&x_train, y_train),
        replicate_accuracies: vec![accuracy],
    })
}

/// `evals` independent evaluations of [`disentanglement_score`].
pub fn disentanglement_replicates(
    features: &Tensor,
    data: &LabeledImageDataset,
    factors: &[usize],
    cfg: &MetricConfig,
    evals: usize,
    rng: &mut impl Rng,
) -> Result<DisentanglementResult, EvalError> {
    if evals == 0 {
        return Err(EvalError::Empty("disentanglement_replicates"));
    }
    let runs = (0..evals)
        .map(|_| disentanglement_score(features, data, factors, cfg, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = runs[0].clone();
    out.replicate_accuracies = runs.iter().map(|r| r.accuracy).collect();
    out.accuracy = out.replicate_accuracies.iter().sum::<f64>() / evals as f64;
    out.train_accuracy = runs.iter().map(|r| r.train_accuracy).sum::<f64>() / evals as f64;
    Ok(out)
}

fn standardizer(rows: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (rows.len() / d) as f64;
    let mut mu = vec![0.0; d];
    for r in rows.chunks(d) {
        mu.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for r in rows.chunks(d) {
        var.iter_mut().zip(r).zip(&mu).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    let sd = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mu, sd)
}

struct Softmax {
    d: usize,
    k: usize,
    /// `d × k`, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Softmax {
    fn fit(x: &[f64], y: &[usize], d: usize, k: usize, cfg: &ClassifierConfig) -> Self {
        let mut clf = Softmax {
            d,
            k,
            w: vec![0.0; d * k],
            b: vec![0.0; k],
        };
        let n = y.len() as f64;
        let mut gw = vec![0.0; d * k];
        let mut gb = vec![0.0; k];
        for _ in 0..cfg.iterations {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for (row, &label) in x.chunks(d).zip(y) {
                let mut p = clf.logits(row);
                let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                p.iter_mut().for_each(|v| *v = (*v - max).exp());
                let z: f64 = p.iter().sum();
                for c in 0..k {
                    let err = p[c] / z - if c == label { 1.0 } else { 0.0 };
                    gb[c] += err;
                    for (j, v) in row.iter().enumerate() {
                        gw[j * k + c] += err * v;
                    }
                }
            }
            for (w, g) in clf.w.iter_mut().zip(&gw) {
                *w -= cfg.learning_rate * (g / n + cfg.l2 * *w);
            }
            for (b, g) in clf.b.iter_mut().zip(&gb) {
                *b -= cfg.learning_rate * g / n;
            }
        }
        clf
    }

    fn logits(&self, row: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (j, v) in row.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += v * self.w[j * self.k + c];
            }
        }
        out
    }

    fn accuracy(&self, x: &[f64], y: &[usize]) -> f64 {
        let hits = x
            .chunks(self.d)
            .zip(y)
            .filter(|(row, &label)| {
                let l = self.logits(row);
                let best = (0..self.k).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap();
                best == label
            })
            .count();
        hits as f64 / y.len() as f64
    }
}

/// Mean and spread of the retained half of a replicate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub n_input: usize,
    /// Retained `(recon, score)` pairs, best score first.
    pub retained: Vec<(f64, f64)>,
    pub score_mean: f64,
    pub score_sd: f64,
    pub recon_mean: f64,
    pub recon_sd: f64,
}

/// Keeps the top `ceil(n / 2)` of `(recon, score)` entries by score (ties
/// broken toward lower recon) and summarizes them with the mean and the
/// sample standard deviation.
pub fn replicate_protocol(runs: &[(f64, f64)]) -> Result<ProtocolSummary, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::Empty("replicate_protocol"));
    }
    let mut sorted = runs.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
    sorted.truncate(runs.len().div_ceil(2));
    let (recon_mean, recon_sd) = mean_sd(sorted.iter().map(|r| r.0));
    let (score_mean, score_sd) = mean_sd(sorted.iter().map(|r| r.1));
    Ok(ProtocolSummary {
        n_input: runs.len(),
        retained: sorted,
        score_mean,
        score_sd,
        recon_mean,
        recon_sd,
    })
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
