use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use waelab::datasets::{gen_dsprites, gen_fading_squares, load_dataset, save_dataset, DspritesConfig};
use waelab::eval::{
    decoder_grid_export, disentanglement_replicates, encoder_features, factor_set, latent_scatter_export,
    mean_pixel_cdf_deviation, test_recon_error, variance_profile, write_cdf_csv, MetricConfig,
};
use waelab::experiments::{run_cdf_study, run_sweep, ExperimentError, Preset, SweepParam, SweepPlan};
use waelab::models::load_checkpoint;
use waelab::rng::stream;
use waelab::training::{checkpoint_config, resume_on, train_on, Split, TrainConfig, TrainError};

/// Wasserstein auto-encoder experiments on synthetic image datasets.
#[derive(Parser)]
#[command(name = "waelab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file.
    Generate(GenerateArgs),
    /// Train one model, or every run of a multi-run recipe.
    Train(TrainArgs),
    /// Continue a run from a checkpoint.
    Resume(ResumeArgs),
    /// Run a replicate sweep and write the aggregated table.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// List presets, or print the expanded configs of one.
    Presets {
        name: Option<String>,
        #[arg(long, default_value = "data.wlab")]
        dataset: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    FadingSquares,
    Dsprites,
}

#[derive(Args)]
struct GenerateArgs {
    kind: DatasetKind,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// Colour step of the fading-squares grid.
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    /// Factor counts: shapes, scales, orientations, x positions, y positions.
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 4, 10, 8, 8])]
    counts: Vec<usize>,
    /// Shape names, in factor order.
    #[arg(long, value_delimiter = ',')]
    shapes: Option<Vec<String>>,
}

#[derive(Args)]
struct RecipeArgs {
    /// Named preset.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file; overrides the config's.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `key=value` overrides of config or model fields.
    #[arg(long = "set")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    recipe: RecipeArgs,
    /// Run directory (root directory for multi-run recipes).
    #[arg(long)]
    out: PathBuf,
    /// Concurrent runs for multi-run recipes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Generated samples per model for the cdf-study recipe.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
}

#[derive(Args)]
struct ResumeArgs {
    checkpoint: PathBuf,
    /// `key=value` overrides; the model spec must stay unchanged.
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    recipe: RecipeArgs,
    #[arg(long)]
    out: PathBuf,
    /// Grid values; defaults to the preset's grid.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Parameter swept when running from a config file.
    #[arg(long, value_enum)]
    param: Option<ParamArg>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Metric evaluations per model.
    #[arg(long)]
    evals: Option<usize>,
    /// 4 or 5 variable disentanglement task.
    #[arg(long)]
    factors: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 5000)]
    metric_points: usize,
    #[arg(long, default_value_t = 64)]
    metric_pairs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    LambdaP,
    Beta,
    Lambda,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Dataset file; defaults to the one the checkpoint was trained on.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    recon: bool,
    #[arg(long)]
    cdf: bool,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long)]
    variance: bool,
    /// Disentanglement task size (4 or 5 variables).
    #[arg(long)]
    disentangle: Option<usize>,
    #[arg(long, default_value_t = 3)]
    disentangle_evals: usize,
    /// Latent scatter export with this many samples.
    #[arg(long)]
    scatter: Option<usize>,
    /// Decoder grid export at this resolution.
    #[arg(long, num_args = 0..=1, default_missing_value = "10")]
    grid: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure category, reported as the process exit code.
#[derive(Debug, Clone, Copy)]
enum Category {
    Usage = 2,
    Config = 3,
    Data = 4,
    Training = 5,
    Metric = 6,
    Io = 7,
}

struct Failure(Category, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        Failure(categorize(&e), e)
    }
}

fn train_category(t: &TrainError) -> Category {
    match t {
        TrainError::Config(_) | TrainError::SpecMismatch(_) => Category::Config,
        TrainError::Dataset(_) => Category::Data,
        TrainError::Io(_) => Category::Io,
        _ => Category::Training,
    }
}

fn categorize(e: &anyhow::Error) -> Category {
    for cause in e.chain() {
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return train_category(t);
        }
        if let Some(x) = cause.downcast_ref::<ExperimentError>() {
            return match x {
                ExperimentError::UnknownPreset(_) | ExperimentError::Override(..) | ExperimentError::Sweep(_) => {
                    Category::Config
                }
                ExperimentError::Train(t) => train_category(t),
                ExperimentError::Eval(_) => Category::Metric,
                ExperimentError::Io(_) => Category::Io,
                ExperimentError::Json(_) => Category::Config,
            };
        }
        if cause.is::<waelab::datasets::DatasetError>() {
            return Category::Data;
        }
        if cause.is::<waelab::eval::EvalError>() {
            return Category::Metric;
        }
        if cause.is::<waelab::models::ModelError>() || cause.is::<toml::de::Error>() {
            return Category::Config;
        }
        if cause.is::<std::io::Error>() {
            return Category::Io;
        }
    }
    Category::Config
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Resume(a) => resume(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
        Command::Presets { name, dataset } => presets(name, dataset),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(category, e)) => {
            eprintln!("error ({category:?}): {e:#}");
            ExitCode::from(category as u8)
        }
    }
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let ds = match a.kind {
        DatasetKind::FadingSquares => gen_fading_squares(a.step)?,
        DatasetKind::Dsprites => {
            let mut cfg = DspritesConfig::from_counts(&a.counts)?;
            if let Some(names) = &a.shapes {
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                cfg = cfg.with_shape_names(&names)?;
            }
            gen_dsprites(&cfg)?
        }
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_dataset(&ds, &a.out)?;
    println!(
        "wrote {} images of {}x{} (intrinsic dimension {}) to {}",
        ds.len(),
        ds.width,
        ds.height,
        ds.grid.intrinsic_dim(),
        a.out.display()
    );
    Ok(())
}

/// Single config from a TOML file, with dataset, seed and overrides applied.
fn config_from_file(r: &RecipeArgs) -> Result<TrainConfig, Failure> {
    let path = r.config.as_ref().expect("checked by caller");
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut c: TrainConfig = toml::from_str(&text).map_err(|e| Failure(Category::Config, e.into()))?;
    if let Some(d) = &r.dataset {
        c.dataset = d.clone();
    }
    waelab::experiments::apply_overrides(&mut c, &r.overrides)?;
    Ok(c)
}

fn preset(r: &RecipeArgs) -> Result<Preset, Failure> {
    let name = r.preset.as_deref().ok_or_else(|| {
        Failure(Category::Usage, anyhow!("pass --preset or --config (presets: {})", Preset::names().join(", ")))
    })?;
    Ok(name.parse::<Preset>()?)
}

fn write_snapshot(dir: &Path, config: &TrainConfig) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(config).map_err(|e| Failure(Category::Config, e.into()))?;
    fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let configs = if a.recipe.config.is_some() {
        let mut c = config_from_file(&a.recipe)?;
        c.out_dir = Some(a.out.clone());
        vec![c]
    } else {
        let p = preset(&a.recipe)?;
        if p.is_sweep() {
            return Err(Failure(Category::Config, anyhow!("{p} is a sweep recipe; use `waelab sweep`")));
        }
        let dataset = a.recipe.dataset.clone().unwrap_or_else(|| PathBuf::from("data.wlab"));
        p.expand(dataset, &a.out, a.recipe.seed, &a.recipe.overrides)?
    };
    let data = load_dataset(&configs[0].dataset)
        .with_context(|| format!("loading dataset {}", configs[0].dataset.display()))?;
    for c in &configs {
        write_snapshot(c.out_dir.as_ref().expect("runs have a directory"), c)?;
    }

    if a.recipe.preset.as_deref() == Some(Preset::CdfStudy.name()) {
        let rows = run_cdf_study(&configs, &data, a.samples, a.jobs)?;
        let mut csv = String::from("encoder,seed,max_abs_deviation\n");
        for r in &rows {
            csv.push_str(&format!("{:?},{},{}\n", r.encoder, r.seed, r.max_abs_deviation));
        }
        fs::write(a.out.join("cdf_study.csv"), &csv)?;
        print!("{csv}");
        return Ok(());
    }

    for c in configs {
        let dir = c.out_dir.clone().expect("runs have a directory");
        let out = train_on(c, &data)?;
        let last = out.log.records.last();
        println!(
            "{}: {} steps, final objective {:.4}",
            dir.display(),
            out.steps,
            last.map_or(f64::NAN, |r| r.objective)
        );
    }
    Ok(())
}

fn resume(a: ResumeArgs) -> Result<(), Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut c = checkpoint_config(&ck)?;
    if let Some(d) = a.dataset {
        c.dataset = d;
    }
    waelab::experiments::apply_overrides(&mut c, &a.overrides)?;
    if c.out_dir.is_none() {
        c.out_dir = a.checkpoint.parent().map(Path::to_path_buf);
    }
    let data = load_dataset(&c.dataset)?;
    let out = resume_on(&a.checkpoint, c, &data)?;
    println!("resumed to step {}", out.steps);
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let (mut plan, base) = if a.recipe.config.is_some() {
        let param = match a.param {
            Some(ParamArg::LambdaP) => SweepParam::LambdaP,
            Some(ParamArg::Beta) => SweepParam::Beta,
            Some(ParamArg::Lambda) => SweepParam::Lambda,
            None => return Err(Failure(Category::Usage, anyhow!("--param is required with --config"))),
        };
        let plan = SweepPlan {
            param,
            values: Vec::new(),
            replicates: 1,
            evals: 3,
            factor_set: 5,
        };
        (plan, config_from_file(&a.recipe)?)
    } else {
        let p = preset(&a.recipe)?;
        let plan = p
            .sweep_plan()
            .ok_or_else(|| Failure(Category::Config, anyhow!("{p} is not a sweep recipe")))?;
        let dataset = a.recipe.dataset.clone().unwrap_or_else(|| PathBuf::from("data.wlab"));
        let mut base = p.base_config(dataset, a.recipe.seed);
        waelab::experiments::apply_overrides(&mut base, &a.recipe.overrides)?;
        (plan, base)
    };
    if let Some(v) = a.values {
        plan.values = v;
    }
    if plan.values.is_empty() {
        return Err(Failure(Category::Usage, anyhow!("the sweep grid is empty; pass --values")));
    }
    plan.replicates = a.replicates.unwrap_or(plan.replicates);
    plan.evals = a.evals.unwrap_or(plan.evals);
    plan.factor_set = a.factors.unwrap_or(plan.factor_set);
    let metric = MetricConfig {
        n_points: a.metric_points,
        pairs_per_point: a.metric_pairs,
        ..MetricConfig::default()
    };

    fs::create_dir_all(&a.out)?;
    fs::write(
        a.out.join("sweep_plan.json"),
        serde_json::to_vec_pretty(&json!({"plan": plan, "base": base, "metric": metric}))?,
    )?;
    let data = load_dataset(&base.dataset).with_context(|| format!("loading dataset {}", base.dataset.display()))?;
    let report = run_sweep(&plan, &base, &data, &metric, &a.out, a.jobs)?;
    print!("{}", waelab::experiments::sweep_csv(&report));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let config = checkpoint_config(&ck).ok();
    let model = ck.model;
    fs::create_dir_all(&a.out)?;

    let dataset_path = a.dataset.clone().or_else(|| config.as_ref().map(|c| c.dataset.clone()));
    let needs_data = a.recon || a.variance || a.disentangle.is_some() || a.scatter.is_some();
    let data = match (&dataset_path, needs_data) {
        (Some(p), true) => Some(load_dataset(p).with_context(|| format!("loading dataset {}", p.display()))?),
        (None, true) => return Err(Failure(Category::Data, anyhow!("no dataset known; pass --dataset"))),
        _ => None,
    };
    let split = data.as_ref().map(|d| match &config {
        Some(c) => Split::new(d.len(), c.test_fraction, c.seed),
        None => Split {
            train: Vec::new(),
            test: (0..d.len()).collect(),
        },
    });

    let mut summary = serde_json::Map::new();
    let mut failed = false;
    let mut record = |name: &str, r: anyhow::Result<serde_json::Value>| match r {
        Ok(v) => {
            summary.insert(name.to_string(), v);
        }
        Err(e) => {
            eprintln!("{name}: {e:#}");
            failed = true;
            summary.insert(name.to_string(), json!({"error": format!("{e:#}")}));
        }
    };

    if a.recon {
        let (d, s) = (data.as_ref().unwrap(), split.as_ref().unwrap());
        record("recon", test_recon_error(&model, d, &s.test).map(|v| json!(v)).map_err(Into::into));
    }
    if a.cdf {
        let r = (|| -> anyhow::Result<serde_json::Value> {
            let cdf = mean_pixel_cdf_deviation(&model, a.samples, &mut stream(a.seed, 0))?;
            write_cdf_csv(&cdf, a.out.join("cdf.csv"))?;
            Ok(json!({"max_abs_deviation": cdf.max_abs, "n_samples": cdf.n_samples}))
        })();
        record("cdf", r);
    }
    if a.variance {
        let (d, s) = (data.as_ref().unwrap(), split.as_ref().unwrap());
        let idx = if s.test.is_empty() { &s.train } else { &s.test };
        record(
            "variance",
            variance_profile(&model, d, idx).map_err(Into::into).and_then(|p| Ok(serde_json::to_value(p)?)),
        );
    }
    if let Some(size) = a.disentangle {
        let d = data.as_ref().unwrap();
        let r = (|| -> anyhow::Result<serde_json::Value> {
            let factors = factor_set(&d.grid, size)?;
            let features = encoder_features(&model, d)?;
            let res = disentanglement_replicates(
                &features,
                d,
                &factors,
                &MetricConfig::default(),
                a.disentangle_evals.max(1),
                &mut stream(a.seed, 1),
            )?;
            Ok(serde_json::to_value(res)?)
        })();
        record("disentanglement", r);
    }
    if let Some(n) = a.scatter {
        let d = data.as_ref().unwrap();
        let r = latent_scatter_export(&model, d, n, a.out.join("scatter"), &mut stream(a.seed, 2))
            .map(|paths| json!(paths))
            .map_err(Into::into);
        record("scatter", r);
    }
    if let Some(res) = a.grid {
        let r = decoder_grid_export(&model, res, a.out.join("grid.png"))
            .map_err(Into::into)
            .and_then(|g| Ok(serde_json::to_value(g)?));
        record("grid", r);
    }

    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(a.out.join("eval.json"), &text)?;
    println!("{text}");
    if failed {
        return Err(Failure(Category::Metric, anyhow!("one or more metrics failed")));
    }
    Ok(())
}

fn presets(name: Option<String>, dataset: PathBuf) -> Result<(), Failure> {
    let Some(name) = name else {
        for p in Preset::ALL {
            println!("{p}");
        }
        return Ok(());
    };
    let p: Preset = name.parse()?;
    for c in p.expand(dataset, "runs", 0, &[])? {
        println!("{}", toml::to_string_pretty(&c).map_err(|e| Failure(Category::Config, e.into()))?);
    }
    Ok(())
}
