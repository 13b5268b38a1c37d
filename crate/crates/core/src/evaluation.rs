//! Test-set protocols, per-method metric tables, energy-score maps and the
//! binned F-madogram.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, PlConfig, ReferenceTable};
use crate::error::{Error, Result};
use crate::nn::{self, enforce_monotone, theta_curves, Functional, HeadKind, TrainedModel};
use crate::rng::{self, derive_seed, domain, Rng};
use crate::scoring::{
    energy_score, functional_energy_score, integrated_interval_score, interval_score, mse_theta, PosteriorSample,
};
use crate::simulate::{
    distance, generate_pair, simulate_indexed, FieldSample, GridSpec, PriorBox, SimulationMethod, TrainingSet,
    DEFAULT_VALIDATION_FRACTION,
};
use crate::spatial::{HGrid, ModelFamily, ParameterVector, ThetaCurve};
use crate::stats::{mean, std_dev};

/// Train/test protocol of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scenario {
    /// Train and test on the same family and prior box.
    Base { family: ModelFamily },
    /// Test parameters drawn from outside the training box.
    MisspecifiedRange { family: ModelFamily },
    /// Train on powered-exponential Schlather, test on Whittle–Matérn Schlather.
    MisspecifiedKernel,
    /// Train on an equal mix of three families, test on the same mix.
    AggregatedModels { n_each: usize },
    /// Train Brown–Resnick with ν over (0, 2], test on Smith fields.
    Overparametrized,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario::Base { family: ModelFamily::BrownResnick }
    }
}

const AGGREGATED: [ModelFamily; 3] =
    [ModelFamily::BrownResnick, ModelFamily::SchlatherPowExp, ModelFamily::SchlatherWhittleMatern];

/// Test λ support for the misspecified-range scenario: `(0, 0.5) ∪ (5, 10]`.
pub const OUTSIDE_LAMBDA: [(f64, f64); 2] = [(0.0, 0.5), (5.0, 10.0)];
/// Test ν support for the misspecified-range scenario: `(0, 0.3) ∪ (1.8, 2]`.
pub const OUTSIDE_NU: [(f64, f64); 2] = [(0.0, 0.3), (1.8, 2.0)];
/// Smith σ range of the overparametrized test set.
pub const SMITH_SIGMA: (f64, f64) = (0.5, 5.0);

/// Uniform draw on a union of disjoint intervals, excluding the endpoint 0.
fn uniform_union(parts: &[(f64, f64)], rng: &mut Rng) -> f64 {
    let total: f64 = parts.iter().map(|(a, b)| b - a).sum();
    loop {
        let mut u = rng.random_range(0.0..total);
        for &(a, b) in parts {
            if u < b - a {
                let v = a + u;
                if v > 0.0 {
                    return v;
                }
                break;
            }
            u -= b - a;
        }
    }
}

impl Scenario {
    pub fn name(&self) -> String {
        match self {
            Scenario::Base { family } => format!("base-{family}"),
            Scenario::MisspecifiedRange { family } => format!("misspecified-range-{family}"),
            Scenario::MisspecifiedKernel => "misspecified-kernel".into(),
            Scenario::AggregatedModels { n_each } => format!("aggregated-{n_each}"),
            Scenario::Overparametrized => "overparametrized".into(),
        }
    }

    /// Family the estimators are trained for (the first of the mix when aggregated).
    pub fn train_family(&self) -> ModelFamily {
        match *self {
            Scenario::Base { family } | Scenario::MisspecifiedRange { family } => family,
            Scenario::MisspecifiedKernel => ModelFamily::SchlatherPowExp,
            Scenario::AggregatedModels { .. } => AGGREGATED[0],
            Scenario::Overparametrized => ModelFamily::BrownResnick,
        }
    }

    pub fn train_families(&self) -> Vec<ModelFamily> {
        match self {
            Scenario::AggregatedModels { .. } => AGGREGATED.to_vec(),
            s => vec![s.train_family()],
        }
    }

    pub fn train_prior(&self) -> PriorBox {
        match self {
            Scenario::Overparametrized => PriorBox { nu: (0.0, 2.0), ..PriorBox::default() },
            _ => PriorBox::default(),
        }
    }

    /// Family of test observation `index`.
    pub fn test_family(&self, index: u64) -> ModelFamily {
        match *self {
            Scenario::Base { family } | Scenario::MisspecifiedRange { family } => family,
            Scenario::MisspecifiedKernel => ModelFamily::SchlatherWhittleMatern,
            Scenario::AggregatedModels { .. } => AGGREGATED[index as usize % AGGREGATED.len()],
            Scenario::Overparametrized => ModelFamily::Smith,
        }
    }

    fn draw_test(&self, index: u64, rng: &mut Rng) -> Result<ParameterVector> {
        let family = self.test_family(index);
        match self {
            Scenario::MisspecifiedRange { .. } => {
                let lambda = uniform_union(&OUTSIDE_LAMBDA, rng);
                if family == ModelFamily::Smith {
                    return ParameterVector::smith(lambda);
                }
                ParameterVector::new(family, lambda, uniform_union(&OUTSIDE_NU, rng))
            }
            Scenario::Overparametrized => ParameterVector::smith(rng.random_range(SMITH_SIGMA.0..SMITH_SIGMA.1)),
            _ => Ok(PriorBox::default().sample(family, rng)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Scenario::AggregatedModels { n_each: 0 } = self {
            return Err(Error::domain("aggregated scenario needs at least one field per family"));
        }
        for f in self.train_families() {
            self.train_prior().validate(f)?;
        }
        Ok(())
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    /// Accepts `base`, `misspecified-range`, `misspecified-kernel`,
    /// `aggregated` and `overparametrized`, with Brown–Resnick and 1666
    /// fields per family as defaults.
    fn from_str(s: &str) -> Result<Self> {
        let br = ModelFamily::BrownResnick;
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "base" => Ok(Scenario::Base { family: br }),
            "misspecified-range" | "range" => Ok(Scenario::MisspecifiedRange { family: br }),
            "misspecified-kernel" | "kernel" => Ok(Scenario::MisspecifiedKernel),
            "aggregated" | "aggregated-models" => Ok(Scenario::AggregatedModels { n_each: 1666 }),
            "overparametrized" => Ok(Scenario::Overparametrized),
            other => Err(Error::domain(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Training set of a scenario. Aggregated sets interleave the families so
/// the validation tail contains all of them.
pub fn make_training_set(
    scenario: &Scenario,
    n: usize,
    grid: &GridSpec,
    method: SimulationMethod,
    seed: u64,
) -> Result<TrainingSet> {
    scenario.validate()?;
    grid.validate()?;
    let prior = scenario.train_prior();
    let families = scenario.train_families();
    let n = match scenario {
        Scenario::AggregatedModels { n_each } => n_each * families.len(),
        _ => n,
    };
    if n == 0 {
        return Err(Error::domain("training set size must be at least 1"));
    }
    let pairs = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_pair(&prior, families[i as usize % families.len()], grid, method, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet {
        pairs,
        prior,
        family: families[0],
        grid: *grid,
        seed,
        validation_fraction: DEFAULT_VALIDATION_FRACTION,
    })
}

/// Test pairs of a scenario, drawn on their own seed domain so they never
/// coincide with training draws for the same master seed.
pub fn make_test_set(
    scenario: &Scenario,
    n_test: usize,
    grid: &GridSpec,
    method: SimulationMethod,
    seed: u64,
) -> Result<TrainingSet> {
    if n_test == 0 {
        return Err(Error::domain("test set size must be at least 1"));
    }
    scenario.validate()?;
    grid.validate()?;
    let tseed = derive_seed(seed, domain::TEST_SET);
    let pairs = (0..n_test as u64)
        .into_par_iter()
        .map(|i| {
            let p = scenario.draw_test(i, &mut rng::substream(tseed, domain::PRIOR, i))?;
            let field = simulate_indexed(&p, grid, method, tseed, i)
                .map_err(|e| Error::Simulation { index: i as usize, source: Box::new(e) })?;
            Ok((p, field))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet {
        pairs,
        prior: scenario.train_prior(),
        family: scenario.test_family(0),
        grid: *grid,
        seed,
        validation_fraction: 0.0,
    })
}

/// Output of one estimator on one field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimate {
    Posterior { posterior: PosteriorSample },
    Params { params: ParameterVector },
    Theta { curve: ThetaCurve },
}

pub trait Estimator: Sync {
    fn name(&self) -> &str;
    fn estimate(&self, field: &FieldSample) -> Result<Estimate>;
}

/// Sample-based estimator backed by a generative network.
pub struct GenerativeEstimator {
    pub name: String,
    pub model: TrainedModel,
    pub m: usize,
    pub seed: u64,
}

impl Estimator for GenerativeEstimator {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, field: &FieldSample) -> Result<Estimate> {
        Ok(Estimate::Posterior { posterior: nn::forward(&self.model, field, self.m, self.seed)? })
    }
}

/// Noise-free network trained with squared error.
pub struct PointCnnEstimator {
    pub name: String,
    pub model: TrainedModel,
}

impl Estimator for PointCnnEstimator {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, field: &FieldSample) -> Result<Estimate> {
        Ok(match self.model.network.spec.head {
            HeadKind::Param => Estimate::Params { params: baselines::point_params(&self.model, field)? },
            HeadKind::Theta => Estimate::Theta { curve: baselines::point_theta(&self.model, field)? },
        })
    }
}

pub struct PlEstimator {
    pub name: String,
    pub family: ModelFamily,
    pub config: PlConfig,
}

impl Estimator for PlEstimator {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, field: &FieldSample) -> Result<Estimate> {
        let fit = baselines::fit_pl(std::slice::from_ref(field), self.family, &self.config)?;
        Ok(Estimate::Params { params: fit.estimate()? })
    }
}

/// ABC against a reference table shared by all observations.
pub struct AbcEstimator {
    pub name: String,
    pub table: ReferenceTable,
}

impl Estimator for AbcEstimator {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, field: &FieldSample) -> Result<Estimate> {
        Ok(Estimate::Posterior { posterior: self.table.accept(field)? })
    }
}

/// Returns the true parameters stored with each field.
pub struct OracleEstimator;

impl Estimator for OracleEstimator {
    fn name(&self) -> &str {
        "oracle"
    }

    fn estimate(&self, field: &FieldSample) -> Result<Estimate> {
        Ok(Estimate::Params { params: field.params })
    }
}

/// Negatively oriented evaluation metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "MSE_lambda")]
    MseLambda,
    #[serde(rename = "MSE_nu")]
    MseNu,
    #[serde(rename = "MSE_theta")]
    MseTheta,
    #[serde(rename = "IS_lambda")]
    IsLambda,
    #[serde(rename = "IS_nu")]
    IsNu,
    #[serde(rename = "IIS")]
    Iis,
    #[serde(rename = "ES_lambda_nu")]
    EsLambdaNu,
    #[serde(rename = "ES_theta")]
    EsTheta,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::MseLambda,
        Metric::MseNu,
        Metric::MseTheta,
        Metric::IsLambda,
        Metric::IsNu,
        Metric::Iis,
        Metric::EsLambdaNu,
        Metric::EsTheta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MseLambda => "MSE_lambda",
            Metric::MseNu => "MSE_nu",
            Metric::MseTheta => "MSE_theta",
            Metric::IsLambda => "IS_lambda",
            Metric::IsNu => "IS_nu",
            Metric::Iis => "IIS",
            Metric::EsLambdaNu => "ES_lambda_nu",
            Metric::EsTheta => "ES_theta",
        }
    }

    fn index(self) -> usize {
        Metric::ALL.iter().position(|&m| m == self).expect("listed metric")
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub alpha: f64,
    /// Lag grid for θ-based metrics of parameter estimates.
    pub theta_grid: HGrid,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { alpha: 0.05, theta_grid: HGrid::default() }
    }
}

/// Metrics of one method on one test observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub method: String,
    pub index: usize,
    pub truth: ParameterVector,
    /// Posterior mean or point estimate of `(λ, ν)`.
    pub point: Option<[f64; 2]>,
    /// Equal-tailed `(λ, ν)` interval bounds.
    pub interval: Option<([f64; 2], [f64; 2])>,
    /// One entry per [`Metric::ALL`], absent when not applicable.
    pub metrics: Vec<Option<f64>>,
    pub error: Option<String>,
}

impl ObservationRecord {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        self.metrics.get(m.index()).copied().flatten()
    }
}

/// Parameters comparable with an estimate of `family`: Smith truths are
/// compared with Brown–Resnick estimates on the equivalent `(λ, 2)` scale.
fn comparable_truth(truth: &ParameterVector, family: ModelFamily) -> ParameterVector {
    if truth.family == ModelFamily::Smith && family != ModelFamily::Smith {
        truth.as_brown_resnick().unwrap_or(*truth)
    } else {
        *truth
    }
}

type Metrics = [Option<f64>; 8];

fn score_params_posterior(samples: &[ParameterVector], posterior: &PosteriorSample, truth: &ParameterVector, cfg: &BenchConfig, out: &mut Metrics) -> Result<([f64; 2], ([f64; 2], [f64; 2]))> {
    let t = comparable_truth(truth, samples[0].family);
    let m = posterior.mean();
    let iv = posterior.interval(cfg.alpha)?;
    out[Metric::MseLambda.index()] = Some((m[0] - t.lambda).powi(2));
    out[Metric::MseNu.index()] = Some((m[1] - t.nu).powi(2));
    out[Metric::IsLambda.index()] = Some(interval_score(iv.lower[0], iv.upper[0], cfg.alpha, t.lambda)?);
    out[Metric::IsNu.index()] = Some(interval_score(iv.lower[1], iv.upper[1], cfg.alpha, t.nu)?);
    out[Metric::EsLambdaNu.index()] = Some(energy_score(&posterior.rows(), &[t.lambda, t.nu])?);
    Ok(([m[0], m[1]], ([iv.lower[0], iv.lower[1]], [iv.upper[0], iv.upper[1]])))
}

fn score_curves(curves: &[ThetaCurve], truth: &ParameterVector, alpha: f64, out: &mut Metrics) -> Result<()> {
    let grid = curves[0].grid;
    let truth_curve = ThetaCurve::from_params(truth, grid)?;
    let mean_curve = enforce_monotone(curves, Functional::Mean)?;
    let lower = enforce_monotone(curves, Functional::Quantile(alpha / 2.0))?;
    let upper = enforce_monotone(curves, Functional::Quantile(1.0 - alpha / 2.0))?;
    out[Metric::MseTheta.index()] = Some(mse_theta(&mean_curve, truth)?);
    out[Metric::Iis.index()] = Some(integrated_interval_score(&lower, &upper, alpha, &truth_curve)?);
    out[Metric::EsTheta.index()] = Some(functional_energy_score(curves, &truth_curve)?);
    Ok(())
}

/// Scores one estimate against the truth.
pub fn evaluate(estimate: &Estimate, truth: &ParameterVector, cfg: &BenchConfig) -> Result<(Metrics, Option<[f64; 2]>, Option<([f64; 2], [f64; 2])>)> {
    let mut out: Metrics = [None; 8];
    let (mut point, mut interval) = (None, None);
    match estimate {
        Estimate::Posterior { posterior } => {
            if let PosteriorSample::Params(samples) = posterior {
                let (m, iv) = score_params_posterior(samples, posterior, truth, cfg, &mut out)?;
                point = Some(m);
                interval = Some(iv);
            }
            let curves = match posterior {
                PosteriorSample::Params(_) => theta_curves(posterior, cfg.theta_grid)?,
                PosteriorSample::Theta(c) => c.clone(),
            };
            score_curves(&curves, truth, cfg.alpha, &mut out)?;
        }
        Estimate::Params { params } => {
            let t = comparable_truth(truth, params.family);
            out[Metric::MseLambda.index()] = Some((params.lambda - t.lambda).powi(2));
            out[Metric::MseNu.index()] = Some((params.nu - t.nu).powi(2));
            let curve = ThetaCurve::from_params(params, cfg.theta_grid)?;
            out[Metric::MseTheta.index()] = Some(mse_theta(&curve, truth)?);
            point = Some([params.lambda, params.nu]);
        }
        Estimate::Theta { curve } => {
            let sorted = enforce_monotone(std::slice::from_ref(curve), Functional::Mean)?;
            out[Metric::MseTheta.index()] = Some(mse_theta(&sorted, truth)?);
        }
    }
    Ok((out, point, interval))
}

/// One table cell: mean and standard deviation of a metric over the test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub method: String,
    pub metric: Metric,
    /// Absent when the metric does not apply to the method or every
    /// observation failed.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub scenario: String,
    /// Method-major, metrics in [`Metric::ALL`] order.
    pub cells: Vec<MetricCell>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    scenario: &'a str,
    method: &'a str,
    metric: &'static str,
    mean: Option<f64>,
    std: Option<f64>,
    n: usize,
    failures: usize,
}

impl MetricTable {
    pub fn cell(&self, method: &str, metric: Metric) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.method == method && c.metric == metric)
    }

    pub fn mean(&self, method: &str, metric: Metric) -> Option<f64> {
        self.cell(method, metric).and_then(|c| c.mean)
    }

    /// Columns `scenario,method,metric,mean,std,n,failures`; absent cells are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for c in &self.cells {
            w.serialize(CsvRow {
                scenario: &self.scenario,
                method: &c.method,
                metric: c.metric.name(),
                mean: c.mean,
                std: c.std,
                n: c.n,
                failures: c.failures,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub table: MetricTable,
    pub records: Vec<ObservationRecord>,
}

impl BenchmarkResult {
    /// Fraction of observations whose `(λ, ν)` interval contains the truth,
    /// per parameter.
    pub fn coverage(&self, method: &str) -> Option<[f64; 2]> {
        let hits: Vec<[bool; 2]> = self
            .records
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| {
                let (lo, hi) = r.interval?;
                let t = comparable_truth(&r.truth, ModelFamily::BrownResnick);
                Some([
                    lo[0] <= t.lambda && t.lambda <= hi[0],
                    lo[1] <= t.nu && t.nu <= hi[1],
                ])
            })
            .collect();
        if hits.is_empty() {
            return None;
        }
        let n = hits.len() as f64;
        Some([
            hits.iter().filter(|h| h[0]).count() as f64 / n,
            hits.iter().filter(|h| h[1]).count() as f64 / n,
        ])
    }
}

/// Runs every method on every test observation. Failures become missing
/// cells with counts; the table is aggregated in test-set order.
pub fn run_benchmark(
    scenario: &Scenario,
    test_set: &[(ParameterVector, FieldSample)],
    methods: &[&dyn Estimator],
    cfg: &BenchConfig,
) -> Result<BenchmarkResult> {
    if test_set.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let mut records = Vec::with_capacity(test_set.len() * methods.len());
    let mut cells = Vec::with_capacity(Metric::ALL.len() * methods.len());
    for method in methods {
        let recs: Vec<ObservationRecord> = test_set
            .par_iter()
            .enumerate()
            .map(|(index, (truth, field))| {
                let outcome = method.estimate(field).and_then(|e| evaluate(&e, truth, cfg));
                let (metrics, point, interval, error) = match outcome {
                    Ok((m, p, i)) => (m.to_vec(), p, i, None),
                    Err(e) => (vec![None; 8], None, None, Some(e.to_string())),
                };
                ObservationRecord { method: method.name().to_string(), index, truth: *truth, point, interval, metrics, error }
            })
            .collect();
        let failures = recs.iter().filter(|r| r.error.is_some()).count();
        for metric in Metric::ALL {
            let values: Vec<f64> = recs.iter().filter_map(|r| r.metric(metric)).collect();
            let applicable = !values.is_empty();
            cells.push(MetricCell {
                method: method.name().to_string(),
                metric,
                mean: applicable.then(|| mean(&values)),
                std: applicable.then(|| std_dev(&values)),
                n: values.len(),
                failures: if applicable || failures == recs.len() { failures } else { 0 },
            });
        }
        records.extend(recs);
    }
    Ok(BenchmarkResult { table: MetricTable { scenario: scenario.name(), cells }, records })
}

/// One point of an energy-score map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMapRecord {
    pub lambda: f64,
    pub nu: f64,
    pub es: f64,
    pub method: String,
    pub scenario: String,
}

/// True `(λ, ν)` against the energy score of every scored observation of
/// `method`, using `ES_λν` when available and `ES_θ` otherwise.
pub fn score_map(result: &BenchmarkResult, method: &str) -> Vec<ScoreMapRecord> {
    result
        .records
        .iter()
        .filter(|r| r.method == method)
        .filter_map(|r| {
            let es = r.metric(Metric::EsLambdaNu).or_else(|| r.metric(Metric::EsTheta))?;
            Some(ScoreMapRecord {
                lambda: r.truth.lambda,
                nu: r.truth.nu,
                es,
                method: r.method.clone(),
                scenario: result.table.scenario.clone(),
            })
        })
        .collect()
}

/// Columns `lambda,nu,es,method,scenario`.
pub fn write_score_map_csv(records: &[ScoreMapRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// How site values are mapped to uniforms before the madogram.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Margin {
    /// Values are unit Fréchet: `F(z) = exp(−1/z)`.
    #[default]
    UnitFrechet,
    /// Per-site empirical CDF `rank / (n + 1)`.
    Empirical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MadogramConfig {
    pub bin_width: f64,
    /// Pairs farther apart are dropped; defaults to the largest pair distance.
    pub max_distance: Option<f64>,
    pub margin: Margin,
}

impl Default for MadogramConfig {
    fn default() -> Self {
        MadogramConfig { bin_width: 0.5, max_distance: None, margin: Margin::UnitFrechet }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MadogramBin {
    pub lower: f64,
    pub upper: f64,
    /// Mean pair distance in the bin.
    pub distance: Option<f64>,
    /// Mean of the pairwise θ̂ in the bin.
    pub theta: Option<f64>,
    pub count: usize,
    /// Pairs whose θ̂ fell outside `[1, 2]` and was clamped.
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Madogram {
    pub bins: Vec<MadogramBin>,
    pub clamped: usize,
}

impl Madogram {
    /// Columns `lower,upper,distance,theta,count,clamped`; empty bins have
    /// blank distance and θ.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for b in &self.bins {
            w.serialize(b)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pairwise θ̂ from the F-madogram `ν̂ = ½ mean |F(z_i) − F(z_j)|`,
/// `θ̂ = (1 + 2ν̂)/(1 − 2ν̂)`, clamped to `[1, 2]`. Returns `(θ̂, clamped)`.
pub fn madogram_theta(u: &[f64], v: &[f64]) -> (f64, bool) {
    let nu = 0.5 * u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum::<f64>() / u.len() as f64;
    let theta = (1.0 + 2.0 * nu) / (1.0 - 2.0 * nu);
    if (1.0..=2.0).contains(&theta) {
        (theta, false)
    } else {
        (theta.clamp(1.0, 2.0), true)
    }
}

fn to_uniform(fields: &[FieldSample], margin: Margin) -> Vec<Vec<f64>> {
    let n_sites = fields[0].values.len();
    match margin {
        Margin::UnitFrechet => {
            (0..n_sites).map(|s| fields.iter().map(|f| (-1.0 / f.values[s]).exp()).collect()).collect()
        }
        Margin::Empirical => (0..n_sites)
            .map(|s| {
                let col: Vec<f64> = fields.iter().map(|f| f.values[s]).collect();
                let mut order: Vec<usize> = (0..col.len()).collect();
                order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
                let mut u = vec![0.0; col.len()];
                for (rank, &i) in order.iter().enumerate() {
                    u[i] = (rank + 1) as f64 / (col.len() + 1) as f64;
                }
                u
            })
            .collect(),
    }
}

/// Binned F-madogram estimate of θ(h) from replicates on a common grid.
pub fn f_madogram(fields: &[FieldSample], cfg: &MadogramConfig) -> Result<Madogram> {
    if fields.len() < 2 {
        return Err(Error::TooFewSamples { required: 2, found: fields.len() });
    }
    let grid = fields[0].grid;
    if fields.iter().any(|f| f.grid != grid || f.values.len() != grid.n_sites()) {
        return Err(Error::GridMismatch("replicates must share a grid".into()));
    }
    if !(cfg.bin_width > 0.0) {
        return Err(Error::domain(format!("bin width must be positive, got {}", cfg.bin_width)));
    }
    let coords = grid.coords();
    let max_d = cfg.max_distance.unwrap_or_else(|| {
        let [x0, x1, y0, y1] = grid.extent;
        (x1 - x0).hypot(y1 - y0)
    });
    let n_bins = (max_d / cfg.bin_width).ceil().max(1.0) as usize;
    let u = to_uniform(fields, cfg.margin);
    let per_site: Vec<Vec<(usize, f64, f64, bool)>> = (0..coords.len())
        .into_par_iter()
        .map(|i| {
            (i + 1..coords.len())
                .filter_map(|j| {
                    let h = distance(coords[i], coords[j]);
                    if h > max_d {
                        return None;
                    }
                    let b = ((h / cfg.bin_width) as usize).min(n_bins - 1);
                    let (theta, clamped) = madogram_theta(&u[i], &u[j]);
                    Some((b, h, theta, clamped))
                })
                .collect()
        })
        .collect();
    let mut sums = vec![(0.0, 0.0, 0usize, 0usize); n_bins];
    for (b, h, theta, clamped) in per_site.into_iter().flatten() {
        let s = &mut sums[b];
        s.0 += h;
        s.1 += theta;
        s.2 += 1;
        s.3 += clamped as usize;
    }
    let bins: Vec<MadogramBin> = sums
        .iter()
        .enumerate()
        .map(|(k, &(hs, ts, count, clamped))| MadogramBin {
            lower: k as f64 * cfg.bin_width,
            upper: (k + 1) as f64 * cfg.bin_width,
            distance: (count > 0).then(|| hs / count as f64),
            theta: (count > 0).then(|| ts / count as f64),
            count,
            clamped,
        })
        .collect();
    let clamped = bins.iter().map(|b| b.clamped).sum();
    Ok(Madogram { bins, clamped })
}
