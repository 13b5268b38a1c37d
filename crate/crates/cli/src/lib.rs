//! Config-driven commands chaining simulation, training, estimation,
//! benchmarking, GEV marginal fitting and the F-madogram.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use maxstab::baselines::{self, AbcConfig, PlConfig, PlFit, ReferenceTable};
use maxstab::dataset::{self, DEFAULT_MEMORY_BUDGET};
use maxstab::evaluation::{
    self, AbcEstimator, BenchConfig, Estimate, Estimator, GenerativeEstimator, Margin, MadogramConfig, OracleEstimator,
    PlEstimator, PointCnnEstimator, Scenario,
};
use maxstab::marginals::{self, GevConfig, GridFormat};
use maxstab::nn::{self, checkpoint, HeadKind, NetworkSpec, Prediction, TrainConfig, TrainedModel, Trainer};
use maxstab::rng::{derive_seed, domain};
use maxstab::simulate::{FieldSample, GridSpec, PriorBox, SimulationMethod, TrainingSet};
use maxstab::spatial::{HGrid, ModelFamily, ParameterVector};

/// Invalid invocation or configuration; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub head: HeadKind,
    pub channels: Vec<usize>,
    pub dense: usize,
    pub theta_grid: HGrid,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let spec = NetworkSpec::new(1, 1, HeadKind::Param);
        NetworkConfig { head: HeadKind::Param, channels: spec.channels, dense: spec.dense, theta_grid: spec.theta_grid }
    }
}

impl NetworkConfig {
    pub fn spec(&self, grid: &GridSpec, head: HeadKind, noise: bool) -> NetworkSpec {
        NetworkSpec {
            nx: grid.nx,
            ny: grid.ny,
            channels: self.channels.clone(),
            dense: self.dense,
            head,
            theta_grid: self.theta_grid,
            noise,
        }
    }
}

/// Everything a run needs; a TOML file with any subset of these keys
/// overrides the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub family: ModelFamily,
    pub prior: PriorBox,
    pub grid: GridSpec,
    pub simulation: SimulationMethod,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub methods: Vec<String>,
    pub training: TrainConfig,
    pub network: NetworkConfig,
    pub pl: PlConfig,
    pub abc: AbcConfig,
    pub bench: BenchConfig,
    pub madogram: MadogramConfig,
    pub gev: GevConfig,
    /// Pretrained checkpoints keyed by method name, used by `benchmark`
    /// instead of training.
    pub models: BTreeMap<String, PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::default(),
            family: ModelFamily::BrownResnick,
            prior: PriorBox::default(),
            grid: GridSpec::default(),
            simulation: SimulationMethod::Exact,
            n_train: 5000,
            n_test: 250,
            seed: 0,
            out: None,
            methods: METHODS.iter().map(|m| m.to_string()).collect(),
            training: TrainConfig::default(),
            network: NetworkConfig::default(),
            pl: PlConfig::default(),
            abc: AbcConfig::default(),
            bench: BenchConfig::default(),
            madogram: MadogramConfig::default(),
            gev: GevConfig::default(),
            models: BTreeMap::new(),
        }
    }
}

/// Estimator names accepted by `estimate` and `benchmark`.
pub const METHODS: [&str; 5] = ["en", "en-theta", "cnn", "pl", "abc"];

fn check_method(name: &str) -> Result<()> {
    if METHODS.contains(&name) || name == "oracle" {
        Ok(())
    } else {
        Err(usage(format!("unknown method '{name}' (expected one of {}, oracle)", METHODS.join(", "))))
    }
}

#[derive(Parser, Debug)]
#[command(name = "maxstab", version, about = "Posterior estimation for max-stable processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub family: Option<String>,
    /// Network head: `param` or `theta`.
    #[arg(long, global = true)]
    pub head: Option<String>,
    /// Estimator name, or a comma-separated list for `benchmark`.
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Square grid side length.
    #[arg(long, global = true)]
    pub grid: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a training dataset directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of fields.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a generative (or point) network on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train the noise-free squared-error network.
        #[arg(long)]
        point: bool,
        /// Continue from a resumable checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Posterior or point estimate for one field.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint for `en`, `en-theta` or `cnn`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Field as `ix,iy,value` CSV.
        #[arg(long, conflicts_with = "data")]
        field: Option<PathBuf>,
        /// Dataset directory; use with `--index`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Run a scenario end to end and write metric tables.
    Benchmark {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a GEV surface and transform to unit Fréchet margins.
    Gev {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// `csv` or `dataset-dir`; inferred from the path when omitted.
        #[arg(long)]
        format: Option<String>,
        /// Inclusive year range `first:last`.
        #[arg(long)]
        years: Option<String>,
        #[arg(long, default_value_t = marginals::DEFAULT_KM_PER_UNIT)]
        km_per_unit: f64,
    },
    /// Binned F-madogram of the fields in a dataset directory.
    Madogram {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bin_width: Option<f64>,
        #[arg(long)]
        max_distance: Option<f64>,
        /// `frechet` or `empirical`.
        #[arg(long)]
        margin: Option<String>,
    },
}

fn parse_head(s: &str) -> Result<HeadKind> {
    s.parse().map_err(|e: maxstab::Error| usage(e.to_string()))
}

/// Defaults, then the config file, then command-line overrides.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.training.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(f) = &common.family {
        cfg.family = f.parse().map_err(|e: maxstab::Error| usage(e.to_string()))?;
        if let Scenario::Base { family } | Scenario::MisspecifiedRange { family } = &mut cfg.scenario {
            *family = cfg.family;
        }
    }
    if let Some(h) = &common.head {
        cfg.network.head = parse_head(h)?;
    }
    if let Some(m) = &common.method {
        cfg.methods = m.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if let Some(n) = common.grid {
        cfg.grid = GridSpec::square(n);
    }
    for m in &cfg.methods {
        check_method(m)?;
    }
    cfg.prior.validate(cfg.family).map_err(|e| usage(e.to_string()))?;
    cfg.grid.validate().map_err(|e| usage(e.to_string()))?;
    cfg.training.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.out.clone().ok_or_else(|| usage("an output directory is required (--out or `out` in the config)"))
}

/// Echoes the resolved config as JSON and freezes a copy in `dir`.
fn freeze_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(cfg)?;
    println!("{json}");
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), json + "\n")?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, n } => cmd_simulate(&common, n),
        Command::Train { common, data, epochs, point, resume } => {
            cmd_train(&common, &data, epochs, point, resume.as_deref()).map(|_| ())
        }
        Command::Estimate { common, model, field, data, index } => {
            let source = match (field, data) {
                (Some(f), None) => FieldSource::Csv(f),
                (None, Some(d)) => FieldSource::Dataset(d, index),
                _ => return Err(usage("give exactly one of --field or --data")),
            };
            cmd_estimate(&common, model.as_deref(), &source).map(|_| ())
        }
        Command::Benchmark { common } => cmd_benchmark(&common).map(|_| ()),
        Command::Gev { common, data, format, years, km_per_unit } => {
            cmd_gev(&common, &data, format.as_deref(), years.as_deref(), km_per_unit).map(|_| ())
        }
        Command::Madogram { common, data, bin_width, max_distance, margin } => {
            cmd_madogram(&common, &data, bin_width, max_distance, margin.as_deref()).map(|_| ())
        }
    }
}

pub fn cmd_simulate(common: &Common, n: Option<usize>) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(n) = n {
        cfg.n_train = n;
    }
    if cfg.n_train == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let dir = out_dir(&cfg)?;
    dataset::generate_dataset(
        &dir,
        &cfg.prior,
        cfg.n_train,
        cfg.family,
        &cfg.grid,
        cfg.simulation,
        cfg.seed,
        DEFAULT_MEMORY_BUDGET,
    )?;
    freeze_config(&cfg, &dir)
}

pub fn cmd_train(
    common: &Common,
    data: &Path,
    epochs: Option<usize>,
    point: bool,
    resume: Option<&Path>,
) -> Result<TrainedModel> {
    let mut cfg = resolve_config(common)?;
    if let Some(e) = epochs {
        cfg.training.max_epochs = e;
    }
    let dir = out_dir(&cfg)?;
    let set = dataset::load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    cfg.family = set.family;
    cfg.grid = set.grid;
    let hash = dataset::manifest_hash(data)?;
    let trainer = match resume {
        Some(path) => {
            let prev = checkpoint::load(path)?;
            if prev.manifest_hash.as_deref().is_some_and(|h| h != hash) {
                bail!("checkpoint {} was trained on a different dataset", path.display());
            }
            let state = prev.state.ok_or_else(|| usage(format!("{} has no resume state", path.display())))?;
            Trainer::with_state(&set, &cfg.training, state)?
        }
        None => Trainer::new(&set, &cfg.training, cfg.network.spec(&set.grid, cfg.network.head, !point))?,
    };
    freeze_config(&cfg, &dir)?;
    let mut model = trainer.run(|e| {
        eprintln!("epoch {:>4}  train_es {:.6}  val_es {:.6}  lr {:.3e}", e.epoch, e.train_es, e.val_es, e.lr)
    })?;
    model.manifest_hash = Some(hash);
    checkpoint::save(&model, &dir.join(MODEL_FILE))?;
    checkpoint::write_log_csv(&model.log, &dir.join("log.csv"))?;
    Ok(model)
}

pub enum FieldSource {
    Csv(PathBuf),
    Dataset(PathBuf, usize),
}

fn load_field(source: &FieldSource) -> Result<FieldSample> {
    match source {
        FieldSource::Csv(path) => {
            let (grid, values) = dataset::read_field_csv(path)?;
            Ok(FieldSample {
                grid,
                values,
                params: ParameterVector::brown_resnick(1.0, 1.0)?,
                seed: 0,
                index: 0,
            })
        }
        FieldSource::Dataset(dir, index) => {
            let set = dataset::load_dataset(dir)?;
            let n = set.len();
            set.pairs
                .into_iter()
                .nth(*index)
                .map(|(_, f)| f)
                .ok_or_else(|| usage(format!("index {index} out of range for {n} fields")))
        }
    }
}

/// Output of `estimate`: a posterior summary or a point estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimateOutput {
    Posterior { method: String, prediction: Prediction },
    Point { method: String, params: Option<ParameterVector>, theta: Option<Vec<f64>>, report: Option<PlFit> },
}

pub const ESTIMATE_FILE: &str = "estimate.json";

pub fn cmd_estimate(common: &Common, model: Option<&Path>, source: &FieldSource) -> Result<EstimateOutput> {
    let cfg = resolve_config(common)?;
    let dir = out_dir(&cfg)?;
    let loaded = model.map(checkpoint::load).transpose()?;
    let method = match (&common.method, &loaded) {
        (Some(m), _) => m.clone(),
        (None, Some(m)) if !m.network.spec.noise => "cnn".into(),
        (None, Some(m)) if m.network.spec.head == HeadKind::Theta => "en-theta".into(),
        (None, Some(_)) => "en".into(),
        (None, None) => return Err(usage("give --model or --method")),
    };
    check_method(&method)?;
    let field = load_field(source)?;
    let alpha = cfg.bench.alpha;
    let output = match method.as_str() {
        "en" | "en-theta" => {
            let model = loaded.ok_or_else(|| usage(format!("method {method} needs --model")))?;
            let posterior = nn::forward(&model, &field, model.config.m_predict, cfg.seed)?;
            let grid = model.spec().theta_grid;
            EstimateOutput::Posterior { method, prediction: nn::summarize(posterior, alpha, grid)? }
        }
        "cnn" => {
            let model = loaded.ok_or_else(|| usage("method cnn needs --model"))?;
            let (params, theta) = match model.network.spec.head {
                HeadKind::Param => (Some(baselines::point_params(&model, &field)?), None),
                HeadKind::Theta => (None, Some(baselines::point_theta(&model, &field)?.values)),
            };
            EstimateOutput::Point { method, params, theta, report: None }
        }
        "pl" => {
            let pl = PlConfig { seed: cfg.seed, ..cfg.pl };
            let fit = baselines::fit_pl(std::slice::from_ref(&field), cfg.family, &pl)?;
            EstimateOutput::Point { method, params: fit.estimate, theta: None, report: Some(fit) }
        }
        "abc" => {
            let posterior = baselines::abc(&field, &cfg.prior, cfg.family, &cfg.abc, cfg.seed)?;
            EstimateOutput::Posterior {
                method,
                prediction: nn::summarize(posterior, alpha, cfg.network.theta_grid)?,
            }
        }
        "oracle" => return Err(usage("the oracle needs known parameters; use benchmark")),
        _ => unreachable!("method checked"),
    };
    freeze_config(&cfg, &dir)?;
    write_json(&dir.join(ESTIMATE_FILE), &output)?;
    Ok(output)
}

/// Estimator that fails every observation, standing in for a method whose
/// setup failed so the table still gets its (missing) cells.
struct Unavailable {
    name: String,
    reason: String,
}

impl Estimator for Unavailable {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, _: &FieldSample) -> maxstab::Result<Estimate> {
        Err(maxstab::Error::Evaluation(self.reason.clone()))
    }
}

#[derive(Serialize)]
struct StageLog {
    stage: String,
    seconds: f64,
    note: Option<String>,
}

fn train_or_load(
    cfg: &ExperimentConfig,
    name: &str,
    train_set: &mut Option<TrainingSet>,
    head: HeadKind,
    noise: bool,
    models_dir: &Path,
) -> Result<TrainedModel> {
    if let Some(path) = cfg.models.get(name) {
        return Ok(checkpoint::load(path)?);
    }
    if train_set.is_none() {
        *train_set = Some(evaluation::make_training_set(&cfg.scenario, cfg.n_train, &cfg.grid, cfg.simulation, cfg.seed)?);
    }
    let set = train_set.as_ref().expect("built above");
    let model = nn::train(set, &cfg.training, cfg.network.spec(&cfg.grid, head, noise))?;
    fs::create_dir_all(models_dir)?;
    checkpoint::save(&model, &models_dir.join(format!("{name}.ckpt")))?;
    Ok(model)
}

pub fn cmd_benchmark(common: &Common) -> Result<evaluation::BenchmarkResult> {
    let cfg = resolve_config(common)?;
    let dir = out_dir(&cfg)?;
    cfg.scenario.validate().map_err(|e| usage(e.to_string()))?;
    freeze_config(&cfg, &dir)?;
    let mut stages = Vec::new();
    let mut stage = |name: &str, start: Instant, note: Option<String>| {
        stages.push(StageLog { stage: name.to_string(), seconds: start.elapsed().as_secs_f64(), note })
    };

    let t = Instant::now();
    let test = evaluation::make_test_set(&cfg.scenario, cfg.n_test, &cfg.grid, cfg.simulation, cfg.seed)?;
    stage("test-set", t, None);

    let family = cfg.scenario.train_family();
    let prior = cfg.scenario.train_prior();
    let models_dir = dir.join("models");
    let mut train_set = None;
    let mut methods: Vec<Box<dyn Estimator>> = Vec::new();
    for name in &cfg.methods {
        let t = Instant::now();
        let built: Result<Box<dyn Estimator>> = match name.as_str() {
            "en" | "en-theta" => {
                let head = if name == "en" { HeadKind::Param } else { HeadKind::Theta };
                train_or_load(&cfg, name, &mut train_set, head, true, &models_dir).map(|model| {
                    Box::new(GenerativeEstimator {
                        name: name.clone(),
                        m: model.config.m_predict,
                        model,
                        seed: derive_seed(cfg.seed, domain::LATENT),
                    }) as Box<dyn Estimator>
                })
            }
            "cnn" => train_or_load(&cfg, name, &mut train_set, HeadKind::Param, false, &models_dir)
                .map(|model| Box::new(PointCnnEstimator { name: name.clone(), model }) as Box<dyn Estimator>),
            "pl" => Ok(Box::new(PlEstimator { name: name.clone(), family, config: PlConfig { seed: cfg.seed, ..cfg.pl } })),
            "abc" => ReferenceTable::build(&prior, family, &cfg.grid, &cfg.abc, derive_seed(cfg.seed, domain::ABC))
                .map(|table| Box::new(AbcEstimator { name: name.clone(), table }) as Box<dyn Estimator>)
                .map_err(Into::into),
            "oracle" => Ok(Box::new(OracleEstimator)),
            _ => unreachable!("method checked"),
        };
        match built {
            Ok(m) => {
                stage(&format!("setup:{name}"), t, None);
                methods.push(m);
            }
            Err(e) => {
                eprintln!("method {name} unavailable: {e:#}");
                stage(&format!("setup:{name}"), t, Some(format!("{e:#}")));
                methods.push(Box::new(Unavailable { name: name.clone(), reason: format!("{e:#}") }));
            }
        }
    }

    let t = Instant::now();
    let refs: Vec<&dyn Estimator> = methods.iter().map(|m| m.as_ref()).collect();
    let result = evaluation::run_benchmark(&cfg.scenario, &test.pairs, &refs, &cfg.bench)?;
    stage("evaluate", t, None);

    result.table.write_csv(&dir.join("metrics.csv"))?;
    result.table.write_json(&dir.join("metrics.json"))?;
    write_json(&dir.join("records.json"), &result.records)?;
    let map: Vec<_> = cfg.methods.iter().flat_map(|m| evaluation::score_map(&result, m)).collect();
    evaluation::write_score_map_csv(&map, &dir.join("score_map.csv"))?;
    // Timings vary between runs, so they live apart from the artifacts.
    write_json(&dir.join("run_log.json"), &stages)?;
    Ok(result)
}

fn parse_years(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s.split_once(':').ok_or_else(|| usage(format!("--years expects first:last, got '{s}'")))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| usage(format!("invalid year '{v}'")));
    Ok((parse(a)?, parse(b)?))
}

#[derive(Serialize)]
struct GevOutput<'a> {
    coefficients: Vec<marginals::Coefficient>,
    surface: &'a marginals::GevSurface,
    km_per_unit: f64,
    years: (f64, f64),
}

pub fn cmd_gev(
    common: &Common,
    data: &Path,
    format: Option<&str>,
    years: Option<&str>,
    km_per_unit: f64,
) -> Result<marginals::GevSurface> {
    let cfg = resolve_config(common)?;
    let dir = out_dir(&cfg)?;
    let format = match format {
        Some(f) => f.parse::<GridFormat>().map_err(|e| usage(e.to_string()))?,
        None if data.is_dir() => GridFormat::DatasetDir,
        None => GridFormat::Csv,
    };
    let mut series = marginals::ingest_grid(data, format, km_per_unit)?;
    if let Some(y) = years {
        let (a, b) = parse_years(y)?;
        series = series.select_years(a, b)?;
    }
    let surface = marginals::fit_gev_surface(&series, &cfg.gev)?;
    let frechet = marginals::to_unit_frechet(&series, &surface)?;
    freeze_config(&cfg, &dir)?;
    let span = (series.years[0], *series.years.last().expect("nonempty"));
    write_json(
        &dir.join("surface.json"),
        &GevOutput { coefficients: surface.coefficients(), surface: &surface, km_per_unit, years: span },
    )?;
    let mut w = csv::Writer::from_path(dir.join("coefficients.csv"))?;
    for c in surface.coefficients() {
        w.serialize(c)?;
    }
    w.flush()?;
    marginals::write_series_dir(&dir.join("frechet"), &frechet)?;
    Ok(surface)
}

pub fn cmd_madogram(
    common: &Common,
    data: &Path,
    bin_width: Option<f64>,
    max_distance: Option<f64>,
    margin: Option<&str>,
) -> Result<evaluation::Madogram> {
    let mut cfg = resolve_config(common)?;
    if let Some(w) = bin_width {
        cfg.madogram.bin_width = w;
    }
    if max_distance.is_some() {
        cfg.madogram.max_distance = max_distance;
    }
    if let Some(m) = margin {
        cfg.madogram.margin = match m {
            "frechet" | "unit-frechet" => Margin::UnitFrechet,
            "empirical" => Margin::Empirical,
            other => return Err(usage(format!("unknown margin '{other}'"))),
        };
    }
    let dir = out_dir(&cfg)?;
    let set = dataset::load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let fields: Vec<FieldSample> = set.pairs.into_iter().map(|(_, f)| f).collect();
    let m = evaluation::f_madogram(&fields, &cfg.madogram)?;
    freeze_config(&cfg, &dir)?;
    m.write_csv(&dir.join("madogram.csv"))?;
    Ok(m)
}
