//! Gradient-check instances: every tape op, dense layers and the three objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waelab::diffcore::{Activation, Dense, ParamSet, Tape, Tensor};
use waelab::divergences::{sample_prior, PriorKind};
use waelab::models::{objective, EncoderKind, ModelSpec, ObjectiveKind, WaeModel};

use super::{away_from_zero, check_model, check_op, check_params, uniform, OpFn};

/// Worst relative error of one family over all its instances.
#[derive(Debug, Clone)]
pub struct FamilyResult {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
}

fn dims(rng: &mut impl Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

type Sampler = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, OpFn);

fn unary(
    rng: &mut ChaCha8Rng,
    lo: f64,
    hi: f64,
    signed: bool,
    f: fn(&mut Tape, waelab::diffcore::Var) -> waelab::diffcore::Var,
) -> (Vec<Tensor>, OpFn) {
    let (m, n) = dims(rng);
    let x = if signed { away_from_zero(rng, &[m, n], lo, hi) } else { uniform(rng, &[m, n], lo, hi) };
    (vec![x], Box::new(move |t, v| Ok(f(t, v[0]))))
}

fn op_families() -> Vec<(&'static str, Sampler)> {
    vec![
        ("matmul", |rng| {
            let (m, k) = dims(rng);
            let n = rng.random_range(1..5);
            (
                vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)],
                Box::new(|t, v| t.matmul(v[0], v[1])),
            )
        }),
        ("add", |rng| {
            let (m, n) = dims(rng);
            (
                vec![uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[m, n], -1.0, 1.0)],
                Box::new(|t, v| t.add(v[0], v[1])),
            )
        }),
        ("add-broadcast-row", |rng| {
            let (m, n) = dims(rng);
            (
                vec![uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[n], -1.0, 1.0)],
                Box::new(|t, v| t.add(v[0], v[1])),
            )
        }),
        ("add-broadcast-1xn", |rng| {
            let (m, n) = dims(rng);
            (
                vec![uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[1, n], -1.0, 1.0)],
                Box::new(|t, v| t.add(v[0], v[1])),
            )
        }),
        ("sub", |rng| {
            let (m, n) = dims(rng);
            (
                vec![uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[m, n], -1.0, 1.0)],
                Box::new(|t, v| t.sub(v[0], v[1])),
            )
        }),
        ("sub-broadcast-row", |rng| {
            let (m, n) = dims(rng);
            (
                vec![uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[n], -1.0, 1.0)],
                Box::new(|t, v| t.sub(v[0], v[1])),
            )
        }),
        ("mul", |rng| {
            let (m, n) = dims(rng);
            (
                vec![uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[m, n], -1.0, 1.0)],
                Box::new(|t, v| t.mul(v[0], v[1])),
            )
        }),
        ("tanh", |rng| unary(rng, -2.0, 2.0, false, Tape::tanh)),
        ("relu", |rng| unary(rng, 0.05, 2.0, true, Tape::relu)),
        ("sigmoid", |rng| unary(rng, -3.0, 3.0, false, Tape::sigmoid)),
        ("exp", |rng| unary(rng, -2.0, 2.0, false, Tape::exp)),
        ("log", |rng| unary(rng, 0.2, 3.0, false, Tape::log)),
        ("abs", |rng| unary(rng, 0.05, 2.0, true, Tape::abs)),
        ("sum", |rng| unary(rng, -1.0, 1.0, false, Tape::sum)),
        ("mean", |rng| unary(rng, -1.0, 1.0, false, Tape::mean)),
        ("pow", |rng| {
            let (m, n) = dims(rng);
            let p = [0.5, 1.5, 2.0, 3.0][rng.random_range(0..4)];
            (vec![uniform(rng, &[m, n], 0.2, 2.0)], Box::new(move |t, v| Ok(t.pow(v[0], p))))
        }),
        ("scale", |rng| {
            let (m, n) = dims(rng);
            let c = rng.random_range(-3.0..3.0);
            (vec![uniform(rng, &[m, n], -1.0, 1.0)], Box::new(move |t, v| Ok(t.scale(v[0], c))))
        }),
        ("add_scalar", |rng| {
            let (m, n) = dims(rng);
            let c = rng.random_range(-3.0..3.0);
            (vec![uniform(rng, &[m, n], -1.0, 1.0)], Box::new(move |t, v| Ok(t.add_scalar(v[0], c))))
        }),
        ("clamp", |rng| {
            let (m, n) = dims(rng);
            // keep every element at least 0.02 from either bound
            let x = away_from_zero(rng, &[m, n], 0.0, 1.5).map(|v| {
                if (v.abs() - 0.5).abs() < 0.02 { v + 0.05 * v.signum() } else { v }
            });
            (vec![x], Box::new(|t, v| Ok(t.clamp(v[0], -0.5, 0.5))))
        }),
        ("concat-axis0", |rng| {
            let n = rng.random_range(1..5);
            let k = rng.random_range(2..4);
            let xs = (0..k).map(|_| {
                let m = rng.random_range(1..4);
                uniform(rng, &[m, n], -1.0, 1.0)
            });
            (xs.collect(), Box::new(|t, v| t.concat(v, 0)))
        }),
        ("concat-axis1", |rng| {
            let m = rng.random_range(1..5);
            let k = rng.random_range(2..4);
            let xs = (0..k).map(|_| {
                let n = rng.random_range(1..4);
                uniform(rng, &[m, n], -1.0, 1.0)
            });
            (xs.collect(), Box::new(|t, v| t.concat(v, 1)))
        }),
        ("slice", |rng| {
            let (m, n) = dims(rng);
            let axis = rng.random_range(0..2);
            let len = [m, n][axis];
            let start = rng.random_range(0..len);
            let end = rng.random_range(start + 1..=len);
            (
                vec![uniform(rng, &[m, n], -1.0, 1.0)],
                Box::new(move |t, v| t.slice(v[0], axis, start, end)),
            )
        }),
        ("pairwise_sq_dist", |rng| {
            let (m, n) = dims(rng);
            let d = rng.random_range(1..4);
            (
                vec![uniform(rng, &[m, d], -1.0, 1.0), uniform(rng, &[n, d], -1.0, 1.0)],
                Box::new(|t, v| t.pairwise_sq_dist(v[0], v[1])),
            )
        }),
        ("bce_with_logits", |rng| {
            let (m, n) = dims(rng);
            (
                vec![uniform(rng, &[m, n], -4.0, 4.0), uniform(rng, &[m, n], 0.0, 1.0)],
                Box::new(|t, v| t.bce_with_logits(v[0], v[1])),
            )
        }),
    ]
}

/// Every tape op on `instances` random toy inputs each.
pub fn op_suite(instances: usize, seed: u64) -> Vec<FamilyResult> {
    op_families()
        .into_iter()
        .enumerate()
        .map(|(fi, (name, sample))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((fi as u64) << 32));
            let worst = (0..instances)
                .map(|i| {
                    let (inputs, f) = sample(&mut rng);
                    check_op(&inputs, &f, seed + i as u64)
                })
                .fold(0.0, f64::max);
            FamilyResult {
                name: name.into(),
                instances,
                worst,
            }
        })
        .collect()
}

/// Two-layer dense stacks, one family per hidden activation.
pub fn dense_suite(instances: usize, seed: u64) -> Vec<FamilyResult> {
    [Activation::Tanh, Activation::Sigmoid, Activation::Identity]
        .into_iter()
        .enumerate()
        .map(|(ai, act)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ai as u64 + 100) << 32));
            let worst = (0..instances)
                .map(|_| {
                    let (batch, input) = dims(&mut rng);
                    let (hidden, out) = dims(&mut rng);
                    let mut ps = ParamSet::new();
                    let l1 = Dense::new(&mut ps, "l1", input, hidden, act, rng.random()).unwrap();
                    let l2 = Dense::new(&mut ps, "l2", hidden, out, Activation::Identity, rng.random()).unwrap();
                    // nonzero biases so their gradients are exercised off the origin
                    for p in ps.iter_mut() {
                        if p.name.ends_with("bias") {
                            p.tensor.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
                        }
                    }
                    let x = uniform(&mut rng, &[batch, input], -1.0, 1.0);
                    let w = uniform(&mut rng, &[batch, out], -1.0, 1.0);
                    check_params(&ps, &|ps, tape| {
                        let xv = tape.constant(x.clone());
                        let h = l1.forward(tape, ps, xv).unwrap();
                        let y = l2.forward(tape, ps, h).unwrap();
                        let wv = tape.constant(w.clone());
                        let prod = tape.mul(y, wv).unwrap();
                        tape.sum(prod)
                    })
                })
                .fold(0.0, f64::max);
            FamilyResult {
                name: format!("dense-{act:?}").to_lowercase(),
                instances,
                worst,
            }
        })
        .collect()
}

fn toy_spec(encoder: EncoderKind, prior: PriorKind, objective: ObjectiveKind) -> ModelSpec {
    ModelSpec {
        image_width: 3,
        image_height: 2,
        encoder_hidden: vec![5],
        decoder_hidden: vec![4],
        latent_dim: 2,
        ..ModelSpec::dsprites(encoder, prior, objective)
    }
}

/// The deterministic WAE, the random-encoder WAE with log-variance penalty
/// (box/L1 and Gaussian/L2) and the β-VAE, on toy networks with fixed noise.
pub fn objective_suite(instances: usize, seed: u64) -> Vec<FamilyResult> {
    let mut box_l1 = toy_spec(EncoderKind::UniformBox, PriorKind::UniformBox, ObjectiveKind::Wae);
    box_l1.lambda_p = 0.7;
    box_l1.bound_means = false;
    let mut gauss_l2 = toy_spec(EncoderKind::Gaussian, PriorKind::StandardGaussian, ObjectiveKind::Wae);
    gauss_l2.lambda_p = 0.3;
    gauss_l2.p = 2;
    let mut bvae = toy_spec(EncoderKind::Gaussian, PriorKind::StandardGaussian, ObjectiveKind::BetaVae);
    bvae.beta = 4.0;
    let families = [
        ("wae-deterministic", toy_spec(EncoderKind::Deterministic, PriorKind::StandardGaussian, ObjectiveKind::Wae)),
        ("wae-box-l1-penalty", box_l1),
        ("wae-gaussian-l2-penalty", gauss_l2),
        ("beta-vae", bvae),
    ];
    families
        .into_iter()
        .enumerate()
        .map(|(fi, (name, spec))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((fi as u64 + 200) << 32));
            let worst = (0..instances)
                .map(|_| {
                    let model = WaeModel::new(spec.clone(), rng.random()).unwrap();
                    let batch = rng.random_range(2..6);
                    let x = uniform(&mut rng, &[batch, spec.input_dim()], 0.0, 1.0);
                    let z_prior = sample_prior(&spec.prior_spec(), batch + 1, &mut rng);
                    let noise_seed: u64 = rng.random();
                    check_model(&model, &|m, tape| {
                        let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
                        objective(m, tape, &x, &z_prior, &mut noise).unwrap().loss
                    })
                })
                .fold(0.0, f64::max);
            FamilyResult {
                name: name.into(),
                instances,
                worst,
            }
        })
        .collect()
}
