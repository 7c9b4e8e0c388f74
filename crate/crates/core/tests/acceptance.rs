//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs criteria 1-6 and 8. Criterion 7 trains
//! 21 dSprites models and runs only when `--ignored`/`--include-ignored` is
//! passed or `WAELAB_ACCEPTANCE_LONG=1`; its runs are cached under
//! `target/acceptance-long` (override with `WAELAB_ACCEPTANCE_DIR`).
//! Numeric arguments restrict the run to those criteria.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waelab::datasets::{gen_dsprites, gen_fading_squares, DspritesConfig, LabeledImageDataset};
use waelab::diffcore::Tape;
use waelab::divergences::{mmd_sq_unbiased, sample_prior, Bandwidth, KernelSpec, PriorKind, PriorSpec};
use waelab::eval::{
    disentanglement_score, encoder_features, factor_set, mean_pixel_cdf_deviation, test_recon_error,
    variance_profile, MetricConfig, VarianceProfile,
};
use waelab::experiments::{cdf_study_configs, run_sweep, Preset, SweepParam, SweepPlan, SweepReport, STREAM_EVAL};
use waelab::models::{objective, EncoderKind, ModelSpec, ObjectiveKind, WaeModel};
use waelab::rng::stream;
use waelab::training::{TrainConfig, Trainer};

use common::suites::{dense_suite, objective_suite, op_suite};
use common::{mmd_oracle, oracle_features, random_features, uniform, GRAD_REL_TOL};

const GRAD_INSTANCES: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(60);

const MMD_ORACLE_INSTANCES: usize = 100;
const MMD_ORACLE_TOL: f64 = 1e-12;
const MMD_TRIALS: usize = 1000;
const MMD_SE_BOUND: f64 = 3.0;
const MMD_BUDGET: Duration = Duration::from_secs(60);

const FADING_STEP: f64 = 1e-3;
const RECON_RATIO_MAX: f64 = 0.10;
const CURVE_STEPS: usize = 3;
const CURVE_FRACTION_MIN: f64 = 0.90;
const CURLING_BUDGET: Duration = Duration::from_secs(10 * 60);

const NOISE_SEEDS: usize = 3;
const NOISE_BUDGET: Duration = Duration::from_secs(15 * 60);

const CDF_SAMPLES: usize = 100_000;
const CDF_BUDGET: Duration = Duration::from_secs(60 * 60);

const ORACLE_SCORE_MIN: f64 = 0.95;
const CHANCE_TOL: f64 = 0.05;
const RESCALE_TOL: f64 = 0.02;
const METRIC_BUDGET: Duration = Duration::from_secs(5 * 60);

const REDUCTION_TOL: f64 = 1e-9;
const REDUCTION_INSTANCES: usize = 20;

/// Reduced dSprites widths of the long tier.
const LONG_ENCODER_HIDDEN: [usize; 2] = [400, 400];
const LONG_DECODER_HIDDEN: [usize; 2] = [400, 400];
const LONG_WAE_GRID: [f64; 4] = [0.0, 0.5, 2.0, 8.0];
const LONG_BVAE_GRID: [f64; 3] = [1.0, 10.0, 40.0];
const LONG_REPLICATES: usize = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed <= budget
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut families = op_suite(GRAD_INSTANCES, 101);
    families.extend(dense_suite(GRAD_INSTANCES, 102));
    families.extend(objective_suite(GRAD_INSTANCES, 103));
    let elapsed = t0.elapsed();
    let failing: Vec<String> = families
        .iter()
        .filter(|f| f.worst.is_nan() || f.worst >= GRAD_REL_TOL)
        .map(|f| format!("{}={:.1e}", f.name, f.worst))
        .collect();
    let worst = families.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).unwrap();
    outcome(
        failing.is_empty() && within(elapsed, GRAD_BUDGET),
        format!(
            "{} families x {GRAD_INSTANCES} instances, worst {} {:.2e} (< {GRAD_REL_TOL:e}), failing [{}], {:.1}s",
            families.len(),
            worst.name,
            worst.worst,
            failing.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let mut max_gap: f64 = 0.0;
    for _ in 0..MMD_ORACLE_INSTANCES {
        let d = rng.random_range(1..6);
        let (n, m) = (rng.random_range(2..13), rng.random_range(2..13));
        let x = uniform(&mut rng, &[n, d], -2.0, 2.0);
        let y = uniform(&mut rng, &[m, d], -1.0, 3.0);
        let k = if rng.random::<bool>() {
            KernelSpec::Imq { scale: 2.0 * d as f64 * rng.random_range(0.1..2.0) }
        } else {
            KernelSpec::Rbf { bandwidth: Bandwidth::Fixed(rng.random_range(0.3..3.0)) }
        };
        let got = mmd_sq_unbiased(&x, &y, &k).unwrap();
        max_gap = max_gap.max((got - mmd_oracle(&x, &y, &k)).abs());
    }

    let prior = PriorSpec::gaussian(2);
    let k = prior.default_kernel();
    let est: Vec<f64> = (0..MMD_TRIALS)
        .map(|_| {
            let x = sample_prior(&prior, 20, &mut rng);
            let y = sample_prior(&prior, 20, &mut rng);
            mmd_sq_unbiased(&x, &y, &k).unwrap()
        })
        .collect();
    let mean = est.iter().sum::<f64>() / MMD_TRIALS as f64;
    let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (MMD_TRIALS - 1) as f64).sqrt();
    let se = sd / (MMD_TRIALS as f64).sqrt();
    let elapsed = t0.elapsed();
    outcome(
        max_gap <= MMD_ORACLE_TOL && mean.abs() <= MMD_SE_BOUND * se && within(elapsed, MMD_BUDGET),
        format!(
            "max |estimator - oracle| {max_gap:.1e} over {MMD_ORACLE_INSTANCES} instances; same-distribution mean {mean:.2e} = {:.2} SE over {MMD_TRIALS} trials; {:.1}s",
            mean / se,
            elapsed.as_secs_f64()
        ),
    )
}

/// One trained fading-squares run of the CDF study.
struct FadingRun {
    encoder: EncoderKind,
    seed: u64,
    elapsed: Duration,
    untrained_recon: f64,
    trained_recon: f64,
    curve_fraction: Option<f64>,
    profile: Option<VarianceProfile>,
    cdf_max: f64,
}

/// Fraction of images whose nearest neighbour in latent space lies within
/// `CURVE_STEPS` positions in intensity order.
fn curve_fraction(model: &WaeModel, data: &LabeledImageDataset) -> f64 {
    let z = encoder_features(model, data).unwrap();
    let n = z.rows();
    let hits = (0..n)
        .filter(|&i| {
            let nearest = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da: f64 = z.row(i).iter().zip(z.row(a)).map(|(u, v)| (u - v).powi(2)).sum();
                    let db: f64 = z.row(i).iter().zip(z.row(b)).map(|(u, v)| (u - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            nearest.abs_diff(i) <= CURVE_STEPS
        })
        .count();
    hits as f64 / n as f64
}

fn fading_run(config: TrainConfig, data: &LabeledImageDataset) -> FadingRun {
    let t0 = Instant::now();
    let seed = config.seed;
    let encoder = config.model.encoder;
    let mut trainer = Trainer::new(config, data).unwrap();
    let test = trainer.split().test.clone();
    let untrained_recon = test_recon_error(trainer.model(), data, &test).unwrap();
    trainer.run().unwrap();
    let model = trainer.into_model();
    let trained_recon = test_recon_error(&model, data, &test).unwrap();
    let cdf_max = mean_pixel_cdf_deviation(&model, CDF_SAMPLES, &mut stream(seed, STREAM_EVAL)).unwrap().max_abs;
    let (curve_fraction, profile) = if encoder.is_random() {
        let all: Vec<usize> = (0..data.len()).collect();
        (None, Some(variance_profile(&model, data, &all).unwrap()))
    } else {
        (Some(curve_fraction(&model, data)), None)
    };
    let r = FadingRun {
        encoder,
        seed,
        elapsed: t0.elapsed(),
        untrained_recon,
        trained_recon,
        curve_fraction,
        profile,
        cdf_max,
    };
    eprintln!(
        "  fading {:?} seed {}: recon {:.2} -> {:.2}, cdf max {:.4}, {:.0}s",
        r.encoder,
        r.seed,
        r.untrained_recon,
        r.trained_recon,
        r.cdf_max,
        r.elapsed.as_secs_f64()
    );
    r
}

/// The five deterministic and five box runs shared by criteria 3-5.
fn cdf_study_runs() -> Vec<FadingRun> {
    let data = gen_fading_squares(FADING_STEP).unwrap();
    let base = Preset::CdfStudy.base_config("fading-squares", 0);
    cdf_study_configs(&base, 5, &PathBuf::new())
        .into_iter()
        .map(|mut c| {
            c.out_dir = None;
            fading_run(c, &data)
        })
        .collect()
}

fn criterion_3(runs: &[FadingRun]) -> Outcome {
    let r = runs.iter().find(|r| r.encoder == EncoderKind::Deterministic && r.seed == 0).unwrap();
    let ratio = r.trained_recon / r.untrained_recon;
    let frac = r.curve_fraction.unwrap();
    outcome(
        ratio < RECON_RATIO_MAX && frac >= CURVE_FRACTION_MIN && within(r.elapsed, CURLING_BUDGET),
        format!(
            "deterministic seed 0: test recon {:.2} / untrained {:.2} = {ratio:.4} (< {RECON_RATIO_MAX}); nearest latent neighbour within {CURVE_STEPS} steps for {:.1}% (>= {:.0}%); {:.0}s",
            r.trained_recon,
            r.untrained_recon,
            100.0 * frac,
            100.0 * CURVE_FRACTION_MIN,
            r.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_4(runs: &[FadingRun]) -> Outcome {
    let boxes: Vec<&FadingRun> = runs
        .iter()
        .filter(|r| r.encoder == EncoderKind::UniformBox)
        .take(NOISE_SEEDS)
        .collect();
    let elapsed: Duration = boxes.iter().map(|r| r.elapsed).sum();
    let ok = boxes.iter().all(|r| {
        let p = r.profile.as_ref().unwrap();
        p.noise >= 1 && p.informative >= 1
    });
    let per_seed: Vec<String> = boxes
        .iter()
        .map(|r| {
            let p = r.profile.as_ref().unwrap();
            format!("seed {}: {:?}", r.seed, p.classes)
        })
        .collect();
    outcome(
        ok && boxes.len() == NOISE_SEEDS && within(elapsed, NOISE_BUDGET),
        format!("uniform-box encoder, {}; {:.0}s", per_seed.join("; "), elapsed.as_secs_f64()),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_5(runs: &[FadingRun]) -> Outcome {
    let of = |kind| runs.iter().filter(|r| r.encoder == kind).map(|r| r.cdf_max).collect::<Vec<_>>();
    let (det, rnd) = (of(EncoderKind::Deterministic), of(EncoderKind::UniformBox));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    let (md, mr) = (median(det.clone()), median(rnd.clone()));
    let elapsed: Duration = runs.iter().map(|r| r.elapsed).sum();
    outcome(
        md > mr && within(elapsed, CDF_BUDGET),
        format!(
            "median max|deviation| deterministic {md:.4} [{}] vs random {mr:.4} [{}], {CDF_SAMPLES} samples each; {:.0}s",
            fmt(&det),
            fmt(&rnd),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let data = gen_dsprites(&DspritesConfig::desk_scale()).unwrap();
    let cfg = MetricConfig::default();
    let score = |features: &waelab::diffcore::Tensor, size: usize, seed: u64| {
        let factors = factor_set(&data.grid, size).unwrap();
        disentanglement_score(features, &data, &factors, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
            .accuracy
    };
    let oracle = oracle_features(&data);
    let random = random_features(data.len(), 10, &mut ChaCha8Rng::seed_from_u64(601));
    let mut ok = true;
    let mut parts = Vec::new();
    for size in [4, 5] {
        let s = score(&oracle, size, 602);
        let r = score(&random, size, 603);
        let chance = 1.0 / size as f64;
        ok &= s > ORACLE_SCORE_MIN && (r - chance).abs() <= CHANCE_TOL;
        parts.push(format!("K={size}: oracle {s:.3}, independent {r:.3} (chance {chance:.2})"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(604);
    let k = oracle.cols();
    let scales: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..100.0)).collect();
    let scaled = oracle.clone();
    let scaled = waelab::diffcore::Tensor::new(
        scaled.shape(),
        scaled.data().iter().enumerate().map(|(i, v)| v * scales[i % k]).collect(),
    )
    .unwrap();
    let (a, b) = (score(&oracle, 5, 605), score(&scaled, 5, 605));
    ok &= (a - b).abs() <= RESCALE_TOL;
    parts.push(format!("rescaled oracle {b:.3} vs {a:.3}"));
    let elapsed = t0.elapsed();
    outcome(
        ok && within(elapsed, METRIC_BUDGET),
        format!("{}; {:.1}s", parts.join("; "), elapsed.as_secs_f64()),
    )
}

fn toy_model(encoder: EncoderKind, lambda: f64, lambda_p: f64, p: u32, seed: u64) -> WaeModel {
    let prior = if encoder == EncoderKind::Gaussian { PriorKind::StandardGaussian } else { PriorKind::UniformBox };
    let spec = ModelSpec {
        image_width: 4,
        image_height: 3,
        encoder_hidden: vec![6],
        decoder_hidden: vec![6],
        latent_dim: 3,
        lambda,
        lambda_p,
        p,
        bound_means: false,
        ..ModelSpec::dsprites(encoder, prior, ObjectiveKind::Wae)
    };
    WaeModel::new(spec, seed).unwrap()
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(801);
    let mut worst_sum: f64 = 0.0;
    let mut exact = true;
    for _ in 0..REDUCTION_INSTANCES {
        for encoder in [EncoderKind::Deterministic, EncoderKind::Gaussian, EncoderKind::UniformBox] {
            for (lambda, lambda_p) in [(0.0, 0.5), (10.0, 0.0), (0.0, 0.0), (10.0, 0.5)] {
                let p = rng.random_range(1..3);
                let m = toy_model(encoder, lambda, lambda_p, p, rng.random());
                let batch = rng.random_range(2..6);
                let x = uniform(&mut rng, &[batch, m.spec.input_dim()], 0.0, 1.0);
                let z = sample_prior(&m.spec.prior_spec(), 7, &mut rng);
                let mut tape = Tape::new();
                let b = objective(&m, &mut tape, &x, &z, &mut rng).unwrap().breakdown;
                worst_sum = worst_sum.max((b.recon + b.divergence + b.penalty - b.total).abs());
                if lambda == 0.0 {
                    exact &= b.divergence == 0.0;
                }
                if lambda_p == 0.0 || !encoder.is_random() {
                    exact &= b.penalty == 0.0;
                }
                if lambda == 0.0 && (lambda_p == 0.0 || !encoder.is_random()) {
                    exact &= b.total == b.recon;
                }
            }
        }
    }

    // logged breakdowns of short training runs
    let data = gen_fading_squares(0.02).unwrap();
    for (lambda, lambda_p) in [(0.0, 0.5), (10.0, 0.0), (0.0, 0.0)] {
        let mut spec = ModelSpec::fading_squares(EncoderKind::UniformBox, PriorKind::UniformBox);
        spec.encoder_hidden = vec![16];
        spec.decoder_hidden = vec![16];
        spec.lambda = lambda;
        spec.lambda_p = lambda_p;
        let mut c = TrainConfig::new("fading-squares", spec, 3, 802);
        c.batch_size = 10;
        c.log_interval = 1;
        let mut t = Trainer::new(c, &data).unwrap();
        t.run().unwrap();
        for r in &t.log().records {
            worst_sum = worst_sum.max((r.recon + r.divergence + r.penalty - r.objective).abs());
            exact &= (lambda != 0.0 || r.divergence == 0.0) && (lambda_p != 0.0 || r.penalty == 0.0);
        }
    }

    // σ = 1 everywhere: zero log-scale head
    let mut zero_penalty = true;
    for (encoder, p) in [(EncoderKind::Gaussian, 1), (EncoderKind::Gaussian, 2), (EncoderKind::UniformBox, 1), (EncoderKind::UniformBox, 2)] {
        let mut m = toy_model(encoder, 10.0, 3.0, p, rng.random());
        for param in m.params.iter_mut().filter(|q| q.name.starts_with("enc.log_scale")) {
            param.tensor.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let x = uniform(&mut rng, &[5, m.spec.input_dim()], 0.0, 1.0);
        let z = sample_prior(&m.spec.prior_spec(), 5, &mut rng);
        let mut tape = Tape::new();
        zero_penalty &= objective(&m, &mut tape, &x, &z, &mut rng).unwrap().breakdown.penalty == 0.0;
    }
    outcome(
        worst_sum <= REDUCTION_TOL && exact && zero_penalty,
        format!(
            "max |recon + divergence + penalty - total| {worst_sum:.1e} (<= {REDUCTION_TOL:e}); dropped terms exactly zero: {exact}; penalty at sigma = 1 exactly zero: {zero_penalty}"
        ),
    )
}

fn long_dir() -> PathBuf {
    std::env::var_os("WAELAB_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-long"))
}

fn long_sweep(preset: Preset, param: SweepParam, values: &[f64], data: &LabeledImageDataset) -> SweepReport {
    let mut base = preset.base_config("dsprites-desk", 0);
    base.model.encoder_hidden = LONG_ENCODER_HIDDEN.to_vec();
    base.model.decoder_hidden = LONG_DECODER_HIDDEN.to_vec();
    let plan = SweepPlan {
        param,
        values: values.to_vec(),
        replicates: LONG_REPLICATES,
        ..preset.sweep_plan().unwrap()
    };
    run_sweep(&plan, &base, data, &MetricConfig::default(), &long_dir().join(preset.name()), 1).unwrap()
}

fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    let data = gen_dsprites(&DspritesConfig::desk_scale()).unwrap();
    let bvae = long_sweep(Preset::DspritesBvaeSweep, SweepParam::Beta, &LONG_BVAE_GRID, &data);
    let wae = long_sweep(Preset::DspritesWaeSweep, SweepParam::LambdaP, &LONG_WAE_GRID, &data);
    let row = |r: &waelab::experiments::SweepRow| {
        format!("{}: recon {:.2} score {:.3}", r.value, r.summary.recon_mean, r.summary.score_mean)
    };
    let increasing = bvae.rows.windows(2).all(|w| w[1].summary.recon_mean > w[0].summary.recon_mean);
    let best = bvae
        .rows
        .iter()
        .max_by(|a, b| a.summary.score_mean.total_cmp(&b.summary.score_mean))
        .unwrap();
    let winner = wae
        .rows
        .iter()
        .find(|w| w.summary.score_mean >= best.summary.score_mean && w.summary.recon_mean < best.summary.recon_mean);
    outcome(
        increasing && bvae.rows.len() == LONG_BVAE_GRID.len() && winner.is_some(),
        format!(
            "(a) beta recon strictly increasing: {increasing}; (b) WAE lambda_p dominating best beta ({}): {}; beta [{}]; lambda_p [{}]; {:.0}s",
            best.value,
            winner.map_or("none".into(), |w| w.value.to_string()),
            bvae.rows.iter().map(row).collect::<Vec<_>>().join("; "),
            wae.rows.iter().map(row).collect::<Vec<_>>().join("; "),
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let long = args.iter().any(|a| a == "--ignored" || a == "--include-ignored")
        || std::env::var("WAELAB_ACCEPTANCE_LONG").is_ok_and(|v| v == "1");
    let only: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let selected = |n: u32| only.is_empty() || only.contains(&n);

    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        println!("criterion {n} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    if selected(1) {
        report(1, criterion_1());
    }
    if selected(2) {
        report(2, criterion_2());
    }
    if selected(3) || selected(4) || selected(5) {
        let runs = cdf_study_runs();
        for (n, f) in [(3, criterion_3 as fn(&[FadingRun]) -> Outcome), (4, criterion_4), (5, criterion_5)] {
            if selected(n) {
                report(n, f(&runs));
            }
        }
    }
    if selected(6) {
        report(6, criterion_6());
    }
    if selected(7) {
        if long {
            report(7, criterion_7());
        } else {
            println!("criterion 7 SKIPPED: long-running tier; pass --ignored or set WAELAB_ACCEPTANCE_LONG=1");
        }
    }
    if selected(8) {
        report(8, criterion_8());
    }
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
