//! Diagnostics for trained models: held-out reconstruction, mean-pixel CDF
//! deviation, per-dimension variance profiles, the disentanglement metric,
//! and CSV/PNG exports of the latent space.

mod disentangle;
mod export;

pub use disentangle::{
    disentanglement_replicates, disentanglement_score, encoder_features, factor_set, replicate_protocol,
    ClassifierConfig, DisentanglementResult, MetricConfig, ProtocolSummary,
};
pub use export::{decoder_grid_export, latent_scatter_export, prior_grid_range, write_cdf_csv, GridExport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetError, LabeledImageDataset, FADING_BLOCK, FADING_SIDE};
use crate::diffcore::Tape;
use crate::divergences::sample_prior;
use crate::models::{recon_loss_from_logits, EncoderKind, ModelError, WaeModel};

/// Points on the CDF evaluation grid.
pub const CDF_GRID_POINTS: usize = 1024;
/// Mean log-variance below which a dimension counts as collapsed.
pub const COLLAPSE_LOG_VAR: f64 = -10.0;
/// Noise dimension: encoder variance at least this fraction of the prior variance …
pub const NOISE_ENCODER_FRACTION: f64 = 0.5;
/// … while the encoder means vary by less than this fraction of it.
pub const NOISE_MEAN_FRACTION: f64 = 0.1;

const EVAL_CHUNK: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0} needs a random encoder, the model's is {1:?}")]
    EncoderKind(&'static str, EncoderKind),
    #[error("{what}: expected latent dimension {expected}, model has {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("factor set: {0}")]
    FactorSet(String),
    #[error("{0} needs a non-empty input")]
    Empty(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
}

/// Mean reconstruction loss over `indices`, encoding with the mean φ(x).
pub fn test_recon_error(model: &WaeModel, data: &LabeledImageDataset, indices: &[usize]) -> Result<f64, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::Empty("test_recon_error"));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let mut tape = Tape::inference();
        let x = tape.constant(data.batch(chunk));
        let z = model.encode(&mut tape, x)?.mean;
        let logits = model.decode_logits(&mut tape, z)?;
        let r = recon_loss_from_logits(&mut tape, x, logits)?;
        total += tape.value(r).item() * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Largest mean pixel value of a fading-squares image.
pub fn fading_mean_pixel_max() -> f64 {
    let side = (FADING_BLOCK.end - FADING_BLOCK.start) as f64;
    side * side / (FADING_SIDE * FADING_SIDE) as f64
}

/// Empirical-minus-theoretical CDF of mean pixel values on a fixed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfDeviation {
    pub grid: Vec<f64>,
    pub empirical: Vec<f64>,
    pub theoretical: Vec<f64>,
    pub deviation: Vec<f64>,
    pub max_abs: f64,
    pub n_samples: usize,
}

/// Compares the empirical CDF of `values` with the uniform CDF on
/// `[0, upper]`, evaluated on [`CDF_GRID_POINTS`] points spanning `[0, upper]`.
pub fn cdf_deviation(values: &[f64], upper: f64) -> Result<CdfDeviation, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty("cdf_deviation"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let grid: Vec<f64> = (0..CDF_GRID_POINTS)
        .map(|i| upper * i as f64 / (CDF_GRID_POINTS - 1) as f64)
        .collect();
    let empirical: Vec<f64> = grid
        .iter()
        .map(|&t| sorted.partition_point(|&v| v <= t) as f64 / n)
        .collect();
    let theoretical: Vec<f64> = grid.iter().map(|&t| (t / upper).clamp(0.0, 1.0)).collect();
    let deviation: Vec<f64> = empirical.iter().zip(&theoretical).map(|(e, t)| e - t).collect();
    let max_abs = deviation.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    Ok(CdfDeviation {
        grid,
        empirical,
        theoretical,
        deviation,
        max_abs,
        n_samples: values.len(),
    })
}

/// Mean pixel values of `n` images decoded from prior samples.
pub fn generated_mean_pixels(model: &WaeModel, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>, EvalError> {
    let prior = model.spec.prior_spec();
    let mut out = Vec::with_capacity(n);
    let mut left = n;
    while left > 0 {
        let m = left.min(EVAL_CHUNK);
        let z = sample_prior(&prior, m, rng);
        let probs = model.decode_probs(&z)?;
        out.extend(probs.row_iter().map(|r| r.iter().sum::<f64>() / r.len() as f64));
        left -= m;
    }
    Ok(out)
}

/// CDF deviation of `n_samples` generated images from the uniform
/// distribution of fading-squares mean pixel values.
pub fn mean_pixel_cdf_deviation(
    model: &WaeModel,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<CdfDeviation, EvalError> {
    let values = generated_mean_pixels(model, n_samples, rng)?;
    cdf_deviation(&values, fading_mean_pixel_max())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimClass {
    Collapsed,
    Noise,
    Informative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceProfile {
    /// Mean over the sample of the encoder variance.
    pub encoder_variance: Vec<f64>,
    /// Mean over the sample of the encoder log-variance.
    pub mean_log_variance: Vec<f64>,
    /// Variance of the encoder means over the sample.
    pub mean_variance: Vec<f64>,
    pub prior_variance: Vec<f64>,
    pub classes: Vec<DimClass>,
    pub collapsed: usize,
    pub noise: usize,
    pub informative: usize,
}

/// Per-dimension variance summary of encoder outputs.
///
/// `log_scale` is the encoder's log-scale head: log-variances for Gaussian
/// encoders, log side lengths for box encoders (variance `side² / 12`).
pub fn variance_profile_from(
    mean: &crate::diffcore::Tensor,
    log_scale: &crate::diffcore::Tensor,
    kind: EncoderKind,
    prior_variance: f64,
) -> Result<VarianceProfile, EvalError> {
    let to_log_var: fn(f64) -> f64 = match kind {
        EncoderKind::Deterministic => return Err(EvalError::EncoderKind("variance_profile", kind)),
        EncoderKind::Gaussian => |l| l,
        EncoderKind::UniformBox => |l| 2.0 * l - 12f64.ln(),
    };
    let (n, d) = (mean.rows(), mean.cols());
    if n < 2 {
        return Err(EvalError::Empty("variance_profile"));
    }
    let mut profile = VarianceProfile {
        encoder_variance: vec![0.0; d],
        mean_log_variance: vec![0.0; d],
        mean_variance: vec![0.0; d],
        prior_variance: vec![prior_variance; d],
        classes: Vec::with_capacity(d),
        collapsed: 0,
        noise: 0,
        informative: 0,
    };
    for i in 0..d {
        let lv: Vec<f64> = log_scale.row_iter().map(|r| to_log_var(r[i])).collect();
        profile.mean_log_variance[i] = lv.iter().sum::<f64>() / n as f64;
        profile.encoder_variance[i] = lv.iter().map(|l| l.exp()).sum::<f64>() / n as f64;
        let mu: Vec<f64> = mean.row_iter().map(|r| r[i]).collect();
        let m = mu.iter().sum::<f64>() / n as f64;
        profile.mean_variance[i] = mu.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;

        let class = if profile.mean_log_variance[i] < COLLAPSE_LOG_VAR {
            DimClass::Collapsed
        } else if profile.encoder_variance[i] >= NOISE_ENCODER_FRACTION * prior_variance
            && profile.mean_variance[i] < NOISE_MEAN_FRACTION * prior_variance
        {
            DimClass::Noise
        } else {
            DimClass::Informative
        };
        match class {
            DimClass::Collapsed => profile.collapsed += 1,
            DimClass::Noise => profile.noise += 1,
            DimClass::Informative => profile.informative += 1,
        }
        profile.classes.push(class);
    }
    Ok(profile)
}

/// [`variance_profile_from`] on the model's encodings of `indices`.
pub fn variance_profile(
    model: &WaeModel,
    data: &LabeledImageDataset,
    indices: &[usize],
) -> Result<VarianceProfile, EvalError> {
    let kind = model.spec.encoder;
    if !kind.is_random() {
        return Err(EvalError::EncoderKind("variance_profile", kind));
    }
    if indices.is_empty() {
        return Err(EvalError::Empty("variance_profile"));
    }
    let (mean, log_scale) = model.encode_full(&data.batch(indices))?;
    let log_scale = log_scale.expect("random encoders have a log-scale head");
    variance_profile_from(&mean, &log_scale, kind, model.spec.prior_spec().marginal_variance())
}
