//! Fully connected encoder/decoder pairs, reparameterized latent sampling and
//! the two training objectives: the MMD-regularized auto-encoder (with an
//! optional L_p penalty on encoder log-variances) and the β-VAE baseline.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Dense, DiffError, ParamSet, Tape, Tensor, Var};
use crate::divergences::{
    gaussian_kl_diag_var, mmd_sq_unbiased, mmd_sq_unbiased_var, DivergenceError, KernelSpec, PriorKind,
    PriorSpec,
};

/// Bounds applied to the log-scale head.
pub const LOG_SCALE_MIN: f64 = -30.0;
pub const LOG_SCALE_MAX: f64 = 10.0;

/// Rows per forward pass when running a model over many inputs.
const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("{op} is not defined for a {kind:?} encoder")]
    EncoderKind { op: &'static str, kind: EncoderKind },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Deterministic,
    Gaussian,
    UniformBox,
}

impl EncoderKind {
    pub fn is_random(self) -> bool {
        !matches!(self, EncoderKind::Deterministic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Wae,
    BetaVae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderKind,
    pub objective: ObjectiveKind,
    pub image_width: usize,
    pub image_height: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub prior: PriorKind,
    /// Weight of the MMD term.
    pub lambda: f64,
    /// Weight of the log-variance penalty.
    pub lambda_p: f64,
    /// Exponent of the log-variance penalty (1 or 2).
    pub p: u32,
    /// KL weight of the β-VAE objective.
    pub beta: f64,
    /// Squash encoder means into (−1, 1) with tanh.
    pub bound_means: bool,
    pub hidden_activation: Activation,
    /// MMD kernel; `None` picks the prior's default IMQ kernel.
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
}

impl ModelSpec {
    /// 1024→256→128 encoder, mirrored decoder, 2-D latent space.
    pub fn fading_squares(encoder: EncoderKind, prior: PriorKind) -> Self {
        Self {
            encoder,
            objective: ObjectiveKind::Wae,
            image_width: 32,
            image_height: 32,
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![128, 256],
            latent_dim: 2,
            prior,
            lambda: 10.0,
            lambda_p: 0.0,
            p: 1,
            beta: 1.0,
            bound_means: false,
            hidden_activation: Activation::Tanh,
            kernel: None,
        }
    }

    /// 4096→1200→1200 encoder, 16→1200→1200→1200→4096 decoder.
    pub fn dsprites(encoder: EncoderKind, prior: PriorKind, objective: ObjectiveKind) -> Self {
        Self {
            encoder,
            objective,
            image_width: 64,
            image_height: 64,
            encoder_hidden: vec![1200, 1200],
            decoder_hidden: vec![1200, 1200, 1200],
            latent_dim: 16,
            prior,
            lambda: 10.0,
            lambda_p: 0.0,
            p: 1,
            beta: 1.0,
            bound_means: objective == ObjectiveKind::Wae,
            hidden_activation: Activation::Tanh,
            kernel: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.image_width * self.image_height
    }

    pub fn prior_spec(&self) -> PriorSpec {
        PriorSpec {
            kind: self.prior,
            dim: self.latent_dim,
        }
    }

    pub fn kernel(&self) -> KernelSpec {
        self.kernel.unwrap_or_else(|| self.prior_spec().default_kernel())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Spec(m));
        if self.latent_dim == 0 || self.input_dim() == 0 {
            return bad("latent and input dimensions must be positive".into());
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&w| w == 0) {
            return bad("hidden widths must be positive".into());
        }
        match (self.encoder, self.prior) {
            (EncoderKind::UniformBox, PriorKind::StandardGaussian) => {
                return bad("uniform-box encoder requires the uniform-box prior".into())
            }
            (EncoderKind::Gaussian, PriorKind::UniformBox) => {
                return bad("gaussian encoder requires the gaussian prior".into())
            }
            _ => {}
        }
        if self.objective == ObjectiveKind::BetaVae && self.encoder != EncoderKind::Gaussian {
            return bad("the β-VAE objective needs a gaussian encoder".into());
        }
        if !(self.lambda >= 0.0 && self.lambda_p >= 0.0 && self.beta >= 0.0) {
            return bad("λ, λ_p and β must be non-negative".into());
        }
        if !matches!(self.p, 1 | 2) {
            return bad(format!("penalty exponent must be 1 or 2, got {}", self.p));
        }
        Ok(())
    }

    /// Whether two specs describe the same parameter layout.
    pub fn same_architecture(&self, other: &ModelSpec) -> bool {
        self.encoder == other.encoder
            && self.image_width == other.image_width
            && self.image_height == other.image_height
            && self.encoder_hidden == other.encoder_hidden
            && self.decoder_hidden == other.decoder_hidden
            && self.latent_dim == other.latent_dim
    }
}

/// Encoder heads for a batch: means φ(x) and, for random encoders, the
/// log-scale head (log-variances for Gaussian, log side lengths for boxes).
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub mean: Var,
    pub log_scale: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaeModel {
    pub spec: ModelSpec,
    pub params: ParamSet,
    trunk: Vec<Dense>,
    mean_head: Dense,
    scale_head: Option<Dense>,
    decoder: Vec<Dense>,
}

impl WaeModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let act = spec.hidden_activation;

        let mut trunk = Vec::new();
        let mut width = spec.input_dim();
        for (i, &h) in spec.encoder_hidden.iter().enumerate() {
            trunk.push(Dense::new(&mut params, &format!("enc.{i}"), width, h, act, seeds.random())?);
            width = h;
        }
        let mean_act = if spec.bound_means {
            Activation::Tanh
        } else {
            Activation::Identity
        };
        let mean_head = Dense::new(&mut params, "enc.mean", width, spec.latent_dim, mean_act, seeds.random())?;
        let scale_head = if spec.encoder.is_random() {
            Some(Dense::new(
                &mut params,
                "enc.log_scale",
                width,
                spec.latent_dim,
                Activation::Identity,
                seeds.random(),
            )?)
        } else {
            None
        };

        let mut decoder = Vec::new();
        let mut width = spec.latent_dim;
        for (i, &h) in spec.decoder_hidden.iter().enumerate() {
            decoder.push(Dense::new(&mut params, &format!("dec.{i}"), width, h, act, seeds.random())?);
            width = h;
        }
        decoder.push(Dense::new(
            &mut params,
            "dec.out",
            width,
            spec.input_dim(),
            Activation::Identity,
            seeds.random(),
        )?);

        Ok(Self {
            spec,
            params,
            trunk,
            mean_head,
            scale_head,
            decoder,
        })
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<EncoderOutput, ModelError> {
        let mut h = x;
        for layer in &self.trunk {
            h = layer.forward(tape, &self.params, h)?;
        }
        let mean = self.mean_head.forward(tape, &self.params, h)?;
        let log_scale = match &self.scale_head {
            Some(head) => {
                let raw = head.forward(tape, &self.params, h)?;
                Some(tape.clamp(raw, LOG_SCALE_MIN, LOG_SCALE_MAX))
            }
            None => None,
        };
        Ok(EncoderOutput { mean, log_scale })
    }

    /// Decoder logits; pixel probabilities are their sigmoid.
    pub fn decode_logits(&self, tape: &mut Tape, z: Var) -> Result<Var, ModelError> {
        let mut h = z;
        for layer in &self.decoder {
            h = layer.forward(tape, &self.params, h)?;
        }
        Ok(h)
    }

    /// Per-pixel Bernoulli means in (0, 1).
    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var, ModelError> {
        let logits = self.decode_logits(tape, z)?;
        Ok(tape.sigmoid(logits))
    }

    fn chunked(
        &self,
        x: &Tensor,
        out_cols: usize,
        mut f: impl FnMut(&mut Tape, Var) -> Result<Vec<Var>, ModelError>,
    ) -> Result<Vec<Tensor>, ModelError> {
        let mut outs: Vec<Vec<f64>> = Vec::new();
        let idx: Vec<usize> = (0..x.rows()).collect();
        for chunk in idx.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::inference();
            let xv = tape.constant(x.select_rows(chunk));
            let vars = f(&mut tape, xv)?;
            outs.resize(vars.len(), Vec::new());
            for (o, v) in outs.iter_mut().zip(vars) {
                o.extend_from_slice(tape.value(v).data());
            }
        }
        outs.into_iter()
            .map(|d| Tensor::new(&[x.rows(), out_cols], d).map_err(Into::into))
            .collect()
    }

    /// Encoder means φ(x) for every row of `x`.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut out = self.chunked(x, self.spec.latent_dim, |tape, xv| Ok(vec![self.encode(tape, xv)?.mean]))?;
        Ok(out.remove(0))
    }

    /// Means and (for random encoders) log-scales for every row of `x`.
    pub fn encode_full(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>), ModelError> {
        let random = self.spec.encoder.is_random();
        let mut out = self.chunked(x, self.spec.latent_dim, |tape, xv| {
            let enc = self.encode(tape, xv)?;
            Ok(std::iter::once(enc.mean).chain(enc.log_scale).collect())
        })?;
        let mean = out.remove(0);
        Ok((mean, if random { Some(out.remove(0)) } else { None }))
    }

    /// Decoder probabilities for every latent row of `z`.
    pub fn decode_probs(&self, z: &Tensor) -> Result<Tensor, ModelError> {
        let mut out = self.chunked(z, self.spec.input_dim(), |tape, zv| Ok(vec![self.decode(tape, zv)?]))?;
        Ok(out.remove(0))
    }

    /// Draws one latent code per row of `x` from the encoder distribution.
    pub fn sample_posterior(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor, ModelError> {
        let mut rows = Vec::with_capacity(x.rows() * self.spec.latent_dim);
        let idx: Vec<usize> = (0..x.rows()).collect();
        for chunk in idx.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::inference();
            let xv = tape.constant(x.select_rows(chunk));
            let enc = self.encode(&mut tape, xv)?;
            let z = sample_latent(&mut tape, &enc, self.spec.encoder, rng)?;
            rows.extend_from_slice(tape.value(z).data());
        }
        Ok(Tensor::new(&[x.rows(), self.spec.latent_dim], rows)?)
    }
}

/// Reparameterized draw `z` from the encoder distribution; gradients reach
/// both the mean and the log-scale head.
///
/// * deterministic: `z = mean`
/// * gaussian: `z = mean + exp(log_scale / 2) ∘ ε`, `ε ~ N(0, I)`
/// * uniform box: `z = mean + exp(log_scale) ∘ (u − ½)`, `u ~ U[0, 1]`
pub fn sample_latent(
    tape: &mut Tape,
    enc: &EncoderOutput,
    kind: EncoderKind,
    rng: &mut impl Rng,
) -> Result<Var, ModelError> {
    if kind == EncoderKind::Deterministic {
        return Ok(enc.mean);
    }
    let log_scale = enc.log_scale.ok_or(ModelError::EncoderKind {
        op: "sampling without a log-scale head",
        kind,
    })?;
    let shape = tape.shape(enc.mean).to_vec();
    let numel = shape.iter().product();
    let (noise, spread): (Vec<f64>, Var) = match kind {
        EncoderKind::Gaussian => {
            let eps = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
            let half = tape.scale(log_scale, 0.5);
            (eps, tape.exp(half))
        }
        EncoderKind::UniformBox => {
            let u = (0..numel).map(|_| rng.random::<f64>() - 0.5).collect();
            (u, tape.exp(log_scale))
        }
        EncoderKind::Deterministic => unreachable!(),
    };
    let noise = tape.constant(Tensor::new(&shape, noise)?);
    let offset = tape.mul(spread, noise)?;
    Ok(tape.add(enc.mean, offset)?)
}

/// Mean over the batch of the per-image Bernoulli cross-entropy summed over
/// pixels. Probabilities must lie strictly inside (0, 1).
pub fn recon_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64, ModelError> {
    if x.shape() != x_hat.shape() {
        return Err(DiffError::Shape(format!("recon {:?} vs {:?}", x.shape(), x_hat.shape())).into());
    }
    let total: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&t, &q)| -(t * q.ln() + (1.0 - t) * (1.0 - q).ln()))
        .sum();
    Ok(total / x.rows() as f64)
}

/// [`recon_loss`] computed from decoder logits on the tape.
pub fn recon_loss_from_logits(tape: &mut Tape, x: Var, logits: Var) -> Result<Var, ModelError> {
    let n = tape.shape(x)[0];
    let per_pixel = tape.bce_with_logits(logits, x)?;
    let total = tape.sum(per_pixel);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// `(λ_p / N) Σₙ Σᵢ |log σ²ᵢ(xₙ)|^p`.
///
/// For box encoders σᵢ is the side length, so `log σ²ᵢ = 2 · log_scale`.
pub fn log_var_penalty(
    tape: &mut Tape,
    enc: &EncoderOutput,
    kind: EncoderKind,
    lambda_p: f64,
    p: u32,
) -> Result<Var, ModelError> {
    let log_scale = match (kind, enc.log_scale) {
        (EncoderKind::Deterministic, _) | (_, None) => {
            return Err(ModelError::EncoderKind {
                op: "the log-variance penalty",
                kind,
            })
        }
        (_, Some(v)) => v,
    };
    let n = tape.shape(log_scale)[0];
    let log_var = match kind {
        EncoderKind::UniformBox => tape.scale(log_scale, 2.0),
        _ => log_scale,
    };
    let a = tape.abs(log_var);
    let powered = if p == 1 { a } else { tape.pow(a, p as f64) };
    let total = tape.sum(powered);
    Ok(tape.scale(total, lambda_p / n as f64))
}

/// Values of the individual objective terms. `divergence` and `penalty` are
/// already weighted, so `recon + divergence + penalty == total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub total: f64,
    pub recon: f64,
    pub divergence: f64,
    /// Unweighted MMD² (WAE) or KL (β-VAE).
    pub divergence_raw: f64,
    pub penalty: f64,
}

impl Breakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.recon, self.divergence, self.divergence_raw, self.penalty]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub struct Objective {
    pub loss: Var,
    pub breakdown: Breakdown,
}

/// Reconstruction + λ·MMD²(encoded batch, prior batch) + log-variance penalty.
///
/// With λ = 0 the MMD value is still reported but stays off the tape; the
/// penalty is present only for random encoders with λ_p > 0.
pub fn wae_objective(
    model: &WaeModel,
    tape: &mut Tape,
    x: &Tensor,
    prior_sample: &Tensor,
    rng: &mut impl Rng,
) -> Result<Objective, ModelError> {
    let spec = &model.spec;
    if x.rows() < 2 {
        return Err(ModelError::Spec("the WAE objective needs a batch of at least 2".into()));
    }
    let xv = tape.constant(x.clone());
    let enc = model.encode(tape, xv)?;
    let z = sample_latent(tape, &enc, spec.encoder, rng)?;
    let logits = model.decode_logits(tape, z)?;
    let recon = recon_loss_from_logits(tape, xv, logits)?;
    let kernel = spec.kernel();

    let mut loss = recon;
    let (divergence, divergence_raw) = if spec.lambda > 0.0 {
        let mmd = mmd_sq_unbiased_var(tape, z, prior_sample, &kernel)?;
        let weighted = tape.scale(mmd, spec.lambda);
        loss = tape.add(loss, weighted)?;
        (tape.value(weighted).item(), tape.value(mmd).item())
    } else {
        (0.0, mmd_sq_unbiased(tape.value(z), prior_sample, &kernel)?)
    };

    let mut penalty = 0.0;
    if spec.encoder.is_random() && spec.lambda_p > 0.0 {
        let pen = log_var_penalty(tape, &enc, spec.encoder, spec.lambda_p, spec.p)?;
        penalty = tape.value(pen).item();
        loss = tape.add(loss, pen)?;
    }

    Ok(Objective {
        loss,
        breakdown: Breakdown {
            total: tape.value(loss).item(),
            recon: tape.value(recon).item(),
            divergence,
            divergence_raw,
            penalty,
        },
    })
}

/// Reconstruction + β·KL with one reparameterized code per input.
pub fn bvae_objective(
    model: &WaeModel,
    tape: &mut Tape,
    x: &Tensor,
    rng: &mut impl Rng,
) -> Result<Objective, ModelError> {
    let spec = &model.spec;
    if spec.encoder != EncoderKind::Gaussian {
        return Err(ModelError::EncoderKind {
            op: "the β-VAE objective",
            kind: spec.encoder,
        });
    }
    let xv = tape.constant(x.clone());
    let enc = model.encode(tape, xv)?;
    let z = sample_latent(tape, &enc, spec.encoder, rng)?;
    let logits = model.decode_logits(tape, z)?;
    let recon = recon_loss_from_logits(tape, xv, logits)?;
    let log_var = enc.log_scale.expect("gaussian encoders have a log-scale head");
    let kl = gaussian_kl_diag_var(tape, enc.mean, log_var)?;
    let weighted = tape.scale(kl, spec.beta);
    let loss = tape.add(recon, weighted)?;
    Ok(Objective {
        loss,
        breakdown: Breakdown {
            total: tape.value(loss).item(),
            recon: tape.value(recon).item(),
            divergence: tape.value(weighted).item(),
            divergence_raw: tape.value(kl).item(),
            penalty: 0.0,
        },
    })
}

/// Dispatches on `ModelSpec::objective`. `prior_sample` is ignored by the β-VAE.
pub fn objective(
    model: &WaeModel,
    tape: &mut Tape,
    x: &Tensor,
    prior_sample: &Tensor,
    rng: &mut impl Rng,
) -> Result<Objective, ModelError> {
    match model.spec.objective {
        ObjectiveKind::Wae => wae_objective(model, tape, x, prior_sample, rng),
        ObjectiveKind::BetaVae => bvae_objective(model, tape, x, rng),
    }
}
