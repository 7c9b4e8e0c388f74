//! Named experiment recipes and the replicate sweep harness.
//!
//! A recipe expands to a list of complete, seed-pinned [`TrainConfig`]s.
//! Sweeps train every (grid value, replicate) pair in its own run directory,
//! store a `result.json` per finished run, and skip runs whose result already
//! exists, so an interrupted sweep resumes where it stopped.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImageDataset;
use crate::divergences::PriorKind;
use crate::eval::{
    disentanglement_replicates, encoder_features, factor_set, mean_pixel_cdf_deviation, replicate_protocol,
    test_recon_error, EvalError, MetricConfig, ProtocolSummary,
};
use crate::models::{EncoderKind, ModelSpec, ObjectiveKind};
use crate::rng::stream;
use crate::training::{train_on, TrainConfig, TrainError, CONFIG_FILE};

/// Stream of the run seed used by post-training evaluation.
pub const STREAM_EVAL: u64 = 16;

pub const RESULT_FILE: &str = "result.json";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("unknown preset {0:?}; available presets: {presets}", presets = Preset::names().join(", "))]
    UnknownPreset(String),
    #[error("override {0:?}: {1}")]
    Override(String, String),
    #[error("sweep: {0}")]
    Sweep(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    FadingSquaresDet,
    FadingSquaresBox,
    CdfStudy,
    DspritesWaeSweep,
    DspritesBvaeSweep,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::FadingSquaresDet,
        Preset::FadingSquaresBox,
        Preset::CdfStudy,
        Preset::DspritesWaeSweep,
        Preset::DspritesBvaeSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::FadingSquaresDet => "fading-squares-det",
            Preset::FadingSquaresBox => "fading-squares-box",
            Preset::CdfStudy => "cdf-study",
            Preset::DspritesWaeSweep => "dsprites-wae-sweep",
            Preset::DspritesBvaeSweep => "dsprites-bvae-sweep",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|p| p.name()).collect()
    }

    pub fn is_sweep(self) -> bool {
        self.sweep_plan().is_some()
    }

    /// Grid swept by the sweep presets.
    pub fn sweep_plan(self) -> Option<SweepPlan> {
        match self {
            Preset::DspritesWaeSweep => Some(SweepPlan {
                param: SweepParam::LambdaP,
                values: vec![0.0, 0.1, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0, 12.0],
                replicates: 5,
                evals: 3,
                factor_set: 5,
            }),
            Preset::DspritesBvaeSweep => Some(SweepPlan {
                param: SweepParam::Beta,
                values: vec![1.0, 3.0, 10.0, 20.0, 30.0, 40.0, 50.0, 75.0, 100.0],
                replicates: 10,
                evals: 3,
                factor_set: 5,
            }),
            _ => None,
        }
    }

    /// Base configuration of the preset; `dataset` is the dataset file path.
    pub fn base_config(self, dataset: impl Into<PathBuf>, seed: u64) -> TrainConfig {
        let dataset = dataset.into();
        match self {
            Preset::FadingSquaresDet | Preset::CdfStudy => TrainConfig::new(
                dataset,
                ModelSpec::fading_squares(EncoderKind::Deterministic, PriorKind::UniformBox),
                FADING_EPOCHS,
                seed,
            ),
            Preset::FadingSquaresBox => {
                let mut spec = ModelSpec::fading_squares(EncoderKind::UniformBox, PriorKind::UniformBox);
                spec.lambda_p = FADING_BOX_LAMBDA_P;
                TrainConfig::new(dataset, spec, FADING_EPOCHS, seed)
            }
            Preset::DspritesWaeSweep => {
                let spec = ModelSpec::dsprites(EncoderKind::Gaussian, PriorKind::StandardGaussian, ObjectiveKind::Wae);
                TrainConfig::new(dataset, spec, DSPRITES_EPOCHS, seed)
            }
            Preset::DspritesBvaeSweep => {
                let spec =
                    ModelSpec::dsprites(EncoderKind::Gaussian, PriorKind::StandardGaussian, ObjectiveKind::BetaVae);
                TrainConfig::new(dataset, spec, DSPRITES_EPOCHS, seed)
            }
        }
    }

    /// Every training run of the recipe with overrides applied, each with its
    /// own seed and run directory under `out_root`.
    pub fn expand(
        self,
        dataset: impl Into<PathBuf>,
        out_root: impl AsRef<Path>,
        seed: u64,
        overrides: &[String],
    ) -> Result<Vec<TrainConfig>, ExperimentError> {
        let root = out_root.as_ref();
        let mut base = self.base_config(dataset, seed);
        apply_overrides(&mut base, overrides)?;
        let runs = match self {
            Preset::FadingSquaresDet | Preset::FadingSquaresBox => {
                let mut c = base;
                c.out_dir = Some(root.to_path_buf());
                vec![c]
            }
            Preset::CdfStudy => cdf_study_configs(&base, CDF_STUDY_SEEDS, root),
            Preset::DspritesWaeSweep | Preset::DspritesBvaeSweep => {
                let plan = self.sweep_plan().expect("sweep preset");
                plan.expand(&base, root)?.into_iter().map(|r| r.config).collect()
            }
        };
        Ok(runs)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ExperimentError::UnknownPreset(s.to_string()))
    }
}

/// Training length of the fading-squares presets.
pub const FADING_EPOCHS: usize = 600;
/// L₁ log-variance penalty of the fading-squares box encoder.
pub const FADING_BOX_LAMBDA_P: f64 = 0.03;
/// Training length of the dSprites sweep presets.
pub const DSPRITES_EPOCHS: usize = 30;
/// Seeds per encoder kind in the CDF study.
pub const CDF_STUDY_SEEDS: usize = 5;

/// Applies `key=value` overrides. Keys name [`TrainConfig`] fields or, bare or
/// prefixed with `model.`, [`ModelSpec`] fields; values are parsed as JSON and
/// fall back to plain strings.
pub fn apply_overrides(config: &mut TrainConfig, overrides: &[String]) -> Result<(), ExperimentError> {
    let mut v = serde_json::to_value(&*config)?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| ExperimentError::Override(item.clone(), "expected key=value".into()))?;
        let key = key.trim();
        let value: serde_json::Value =
            serde_json::from_str(raw.trim()).unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
        let key = key.strip_prefix("model.").map_or(key, |k| k);
        let target = if v.get(key).is_some() && key != "model" {
            &mut v[key]
        } else if v["model"].get(key).is_some() {
            &mut v["model"][key]
        } else {
            return Err(ExperimentError::Override(item.clone(), "no such config field".into()));
        };
        *target = value;
    }
    *config = serde_json::from_value(v).map_err(|e| {
        ExperimentError::Override(overrides.join(" "), format!("does not produce a valid config: {e}"))
    })?;
    Ok(())
}

/// `seeds` deterministic and `seeds` uniform-box runs, seeds `base.seed + i`.
pub fn cdf_study_configs(base: &TrainConfig, seeds: usize, root: &Path) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    for encoder in [EncoderKind::Deterministic, EncoderKind::UniformBox] {
        for i in 0..seeds {
            let mut c = base.clone();
            c.model.encoder = encoder;
            c.model.prior = PriorKind::UniformBox;
            c.model.lambda_p = if encoder == EncoderKind::UniformBox { FADING_BOX_LAMBDA_P } else { 0.0 };
            c.seed = base.seed + i as u64;
            let tag = if encoder == EncoderKind::Deterministic { "det" } else { "box" };
            c.out_dir = Some(root.join(format!("{tag}-seed{}", c.seed)));
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub encoder: EncoderKind,
    pub seed: u64,
    pub max_abs_deviation: f64,
}

/// Trains every config and measures the mean-pixel CDF deviation of
/// `n_samples` generated images.
pub fn run_cdf_study(
    configs: &[TrainConfig],
    data: &LabeledImageDataset,
    n_samples: usize,
    jobs: usize,
) -> Result<Vec<CdfRow>, ExperimentError> {
    parallel_map(configs, jobs, |c| {
        let out = train_on(c.clone(), data)?;
        let cdf = mean_pixel_cdf_deviation(&out.model, n_samples, &mut stream(c.seed, STREAM_EVAL))?;
        Ok(CdfRow {
            encoder: c.model.encoder,
            seed: c.seed,
            max_abs_deviation: cdf.max_abs,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    /// Weight of the log-variance penalty.
    LambdaP,
    Beta,
    /// Weight of the MMD term.
    Lambda,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LambdaP => "lambda_p",
            SweepParam::Beta => "beta",
            SweepParam::Lambda => "lambda",
        }
    }

    pub fn apply(self, spec: &mut ModelSpec, value: f64) {
        match self {
            SweepParam::LambdaP => spec.lambda_p = value,
            SweepParam::Beta => spec.beta = value,
            SweepParam::Lambda => spec.lambda = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub replicates: usize,
    /// Metric evaluations per trained model.
    pub evals: usize,
    /// 4 or 5 variable disentanglement task.
    pub factor_set: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub value_index: usize,
    pub value: f64,
    pub replicate: usize,
    pub config: TrainConfig,
}

impl SweepPlan {
    /// One run per (value, replicate). Replicate `r` of every grid value uses
    /// seed `base.seed + r`.
    pub fn expand(&self, base: &TrainConfig, root: &Path) -> Result<Vec<SweepRun>, ExperimentError> {
        if self.values.is_empty() {
            return Err(ExperimentError::Sweep("the grid has no values".into()));
        }
        if self.replicates == 0 || self.evals == 0 {
            return Err(ExperimentError::Sweep("replicates and evals must be positive".into()));
        }
        let mut runs = Vec::new();
        for (vi, &value) in self.values.iter().enumerate() {
            for r in 0..self.replicates {
                let mut c = base.clone();
                self.param.apply(&mut c.model, value);
                c.seed = base.seed + r as u64;
                c.out_dir = Some(root.join(format!("{}-{value}", self.param.name())).join(format!("rep-{r}")));
                c.validate()?;
                runs.push(SweepRun {
                    value_index: vi,
                    value,
                    replicate: r,
                    config: c,
                });
            }
        }
        Ok(runs)
    }
}

/// Outcome of one trained sweep model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub value: f64,
    pub replicate: usize,
    pub seed: u64,
    pub test_recon: f64,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub summary: ProtocolSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub runs: Vec<RunResult>,
    pub rows: Vec<SweepRow>,
}

/// Trains one sweep run, or loads its stored result, and evaluates it.
pub fn sweep_run(
    run: &SweepRun,
    plan: &SweepPlan,
    data: &LabeledImageDataset,
    metric: &MetricConfig,
) -> Result<RunResult, ExperimentError> {
    let dir = run.config.out_dir.clone();
    if let Some(d) = dir.as_ref() {
        let path = d.join(RESULT_FILE);
        if path.exists() {
            let stored: TrainConfig = serde_json::from_slice(&fs::read(d.join(CONFIG_FILE))?)?;
            if stored != run.config {
                return Err(ExperimentError::Sweep(format!(
                    "{} holds a finished run with a different configuration",
                    d.display()
                )));
            }
            return Ok(serde_json::from_slice(&fs::read(path)?)?);
        }
    }
    let out = train_on(run.config.clone(), data)?;
    let test_recon = test_recon_error(&out.model, data, &out.split.test)?;
    let features = encoder_features(&out.model, data)?;
    let factors = factor_set(&data.grid, plan.factor_set)?;
    let mut rng = stream(run.config.seed, STREAM_EVAL);
    let scores = disentanglement_replicates(&features, data, &factors, metric, plan.evals, &mut rng)?;
    let result = RunResult {
        value: run.value,
        replicate: run.replicate,
        seed: run.config.seed,
        test_recon,
        scores: scores.replicate_accuracies,
    };
    if let Some(d) = dir {
        fs::write(d.join(RESULT_FILE), serde_json::to_vec_pretty(&result)?)?;
    }
    Ok(result)
}

/// Groups run results by grid value and applies the replicate protocol to
/// every `(test_recon, score)` pair of each value.
pub fn aggregate(plan: &SweepPlan, runs: Vec<RunResult>) -> Result<SweepReport, ExperimentError> {
    let mut rows = Vec::new();
    for &value in &plan.values {
        let pairs: Vec<(f64, f64)> = runs
            .iter()
            .filter(|r| r.value == value)
            .flat_map(|r| r.scores.iter().map(move |&s| (r.test_recon, s)))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        rows.push(SweepRow {
            value,
            summary: replicate_protocol(&pairs)?,
        });
    }
    Ok(SweepReport {
        param: plan.param,
        runs,
        rows,
    })
}

/// Runs (or resumes) a full sweep with up to `jobs` concurrent runs.
pub fn run_sweep(
    plan: &SweepPlan,
    base: &TrainConfig,
    data: &LabeledImageDataset,
    metric: &MetricConfig,
    root: &Path,
    jobs: usize,
) -> Result<SweepReport, ExperimentError> {
    let runs = plan.expand(base, root)?;
    let results = parallel_map(&runs, jobs, |r| sweep_run(r, plan, data, metric))?;
    let report = aggregate(plan, results)?;
    fs::create_dir_all(root)?;
    fs::write(root.join("sweep.csv"), sweep_csv(&report))?;
    fs::write(root.join("sweep.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// One line per grid value: retained count and mean ± s.d. of reconstruction
/// and disentanglement.
pub fn sweep_csv(report: &SweepReport) -> String {
    let mut s = format!("{},retained,recon_mean,recon_sd,score_mean,score_sd\n", report.param.name());
    for row in &report.rows {
        let m = &row.summary;
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.value,
            m.retained.len(),
            m.recon_mean,
            m.recon_sd,
            m.score_mean,
            m.score_sd
        ));
    }
    s
}

/// Applies `f` to every item on up to `jobs` threads; results keep input order.
/// The first error is returned after all started items finish.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R, ExperimentError> + Sync,
) -> Result<Vec<R>, ExperimentError> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R, ExperimentError>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item is processed"))
        .collect()
}
