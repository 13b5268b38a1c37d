//! Pairwise composite likelihood with cutoff weights and a two-stage
//! multistart simplex search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::NelderMead;
use crate::rng::{self, domain};
use crate::simulate::{distance, FieldSample, GridSpec, PriorBox};
use crate::spatial::{ModelFamily, PairModel, ParameterVector};
use crate::stats::pairwise_sum;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlConfig {
    /// Pairs farther apart than this get weight zero.
    pub weight_cutoff: f64,
    pub n_starts: usize,
    /// Best stage-one results restarted in stage two.
    pub n_refine: usize,
    /// Region starting values are drawn from.
    pub start_box: PriorBox,
    pub stage1_iter: usize,
    pub stage2_iter: usize,
    pub seed: u64,
}

impl Default for PlConfig {
    fn default() -> Self {
        PlConfig {
            weight_cutoff: 5.0,
            n_starts: 20,
            n_refine: 5,
            start_box: PriorBox::default(),
            stage1_iter: 150,
            stage2_iter: 500,
            seed: 0,
        }
    }
}

/// Site pairs of a grid within the cutoff, grouped by lag so that the
/// pair model is built once per distinct distance.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub lags: Vec<f64>,
    /// `(i, j, lag index)` with `i < j`.
    pub pairs: Vec<(usize, usize, usize)>,
}

impl PairSet {
    pub fn new(grid: &GridSpec, cutoff: f64) -> Self {
        let coords = grid.coords();
        let mut lags: Vec<f64> = Vec::new();
        let mut pairs = Vec::new();
        for i in 0..coords.len() {
            for j in i + 1..coords.len() {
                let h = distance(coords[i], coords[j]);
                if h > cutoff {
                    continue;
                }
                // Lags on a lattice repeat exactly up to rounding.
                let k = match lags.iter().position(|&l| (l - h).abs() <= 1e-12 * h.max(1.0)) {
                    Some(k) => k,
                    None => {
                        lags.push(h);
                        lags.len() - 1
                    }
                };
                pairs.push((i, j, k));
            }
        }
        PairSet { lags, pairs }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairLik {
    /// `−∞` when any pair's density underflowed.
    pub value: f64,
    pub n_pairs: usize,
    pub underflow: usize,
}

fn loglik_on(p: &ParameterVector, fields: &[&[f64]], set: &PairSet) -> Result<PairLik> {
    let models = set.lags.iter().map(|&h| PairModel::new(h, p)).collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::with_capacity(set.pairs.len() * fields.len());
    let mut underflow = 0;
    for z in fields {
        for &(i, j, k) in &set.pairs {
            let ld = models[k].log_density(z[i], z[j]);
            if !ld.is_finite() {
                underflow += 1;
            }
            terms.push(ld);
        }
    }
    let value = if underflow > 0 { f64::NEG_INFINITY } else { pairwise_sum(&terms) };
    Ok(PairLik { value, n_pairs: set.pairs.len() * fields.len(), underflow })
}

/// `Σ_{i<j} w_ij log f(z_i, z_j)` summed over the given fields.
pub fn pairwise_loglik(p: &ParameterVector, fields: &[FieldSample], cfg: &PlConfig) -> Result<PairLik> {
    let Some(first) = fields.first() else {
        return Err(Error::TooFewSamples { required: 1, found: 0 });
    };
    if fields.iter().any(|f| f.grid != first.grid) {
        return Err(Error::GridMismatch("fields must share a grid".into()));
    }
    let set = PairSet::new(&first.grid, cfg.weight_cutoff);
    let values: Vec<&[f64]> = fields.iter().map(|f| f.values.as_slice()).collect();
    loglik_on(p, &values, &set)
}

/// Unconstrained coordinates used by the optimizer.
fn to_params(family: ModelFamily, x: &[f64]) -> Option<ParameterVector> {
    let lambda = x[0].exp();
    let p = match family {
        ModelFamily::Smith => ParameterVector::smith(lambda),
        ModelFamily::SchlatherWhittleMatern => ParameterVector::new(family, lambda, x[1].exp()),
        f => ParameterVector::new(f, lambda, 2.0 / (1.0 + (-x[1]).exp())),
    };
    p.ok()
}

fn from_params(p: &ParameterVector) -> Vec<f64> {
    match p.family {
        ModelFamily::Smith => vec![p.lambda.ln()],
        ModelFamily::SchlatherWhittleMatern => vec![p.lambda.ln(), p.nu.ln()],
        _ => {
            let s = p.nu / 2.0;
            vec![p.lambda.ln(), (s / (1.0 - s)).ln()]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartResult {
    pub start: ParameterVector,
    pub estimate: Option<ParameterVector>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlFit {
    /// Best admissible point, absent when every start failed.
    pub estimate: Option<ParameterVector>,
    pub loglik: f64,
    pub stage1: Vec<StartResult>,
    pub stage2: Vec<StartResult>,
    /// The estimate sits at the edge of the parameter space
    /// (λ → 0 or ∞, ν → 0 or 2).
    pub boundary: bool,
    pub failure: Option<String>,
}

impl PlFit {
    pub fn estimate(&self) -> Result<ParameterVector> {
        self.estimate.ok_or_else(|| Error::Optimizer(self.failure.clone().unwrap_or_default()))
    }
}

fn at_boundary(p: &ParameterVector) -> bool {
    let nu_edge = match p.family {
        ModelFamily::Smith => false,
        ModelFamily::SchlatherWhittleMatern => p.nu < 1e-3 || p.nu > 1e3,
        _ => p.nu < 1e-3 || p.nu > 2.0 - 1e-3,
    };
    p.lambda < 1e-3 || p.lambda > 1e3 || nu_edge
}

/// Maximizes the pairwise log-likelihood of one or more replicate fields
/// from `n_starts` seeded starting values, refining the best `n_refine`.
pub fn fit_pl(fields: &[FieldSample], family: ModelFamily, cfg: &PlConfig) -> Result<PlFit> {
    let Some(first) = fields.first() else {
        return Err(Error::TooFewSamples { required: 1, found: 0 });
    };
    if fields.iter().any(|f| f.grid != first.grid) {
        return Err(Error::GridMismatch("fields must share a grid".into()));
    }
    if cfg.n_starts == 0 {
        return Err(Error::domain("at least one starting value is required"));
    }
    cfg.start_box.validate(family)?;
    let set = PairSet::new(&first.grid, cfg.weight_cutoff);
    let values: Vec<&[f64]> = fields.iter().map(|f| f.values.as_slice()).collect();
    let objective = |x: &[f64]| match to_params(family, x) {
        Some(p) => match loglik_on(&p, &values, &set) {
            Ok(l) if l.value.is_finite() => -l.value,
            _ => f64::INFINITY,
        },
        None => f64::INFINITY,
    };
    let run = |start: ParameterVector, max_iter: usize| {
        let nm = NelderMead { max_iter, ..NelderMead::default() };
        let min = nm.minimize(objective, &from_params(&start));
        let estimate = to_params(family, &min.x).filter(|_| min.value.is_finite());
        StartResult {
            start,
            estimate,
            loglik: -min.value,
            iterations: min.iterations,
            converged: min.converged,
        }
    };
    let starts: Vec<ParameterVector> = (0..cfg.n_starts as u64)
        .map(|i| cfg.start_box.sample(family, &mut rng::substream(cfg.seed, domain::MULTISTART, i)))
        .collect();
    let stage1: Vec<StartResult> = starts.par_iter().map(|&s| run(s, cfg.stage1_iter)).collect();

    let mut ranked: Vec<&StartResult> = stage1.iter().filter(|r| r.estimate.is_some()).collect();
    ranked.sort_by(|a, b| b.loglik.total_cmp(&a.loglik));
    let refine: Vec<ParameterVector> =
        ranked.iter().take(cfg.n_refine).filter_map(|r| r.estimate).collect();
    let stage2: Vec<StartResult> = refine.par_iter().map(|&s| run(s, cfg.stage2_iter)).collect();

    let best = stage2
        .iter()
        .chain(stage1.iter())
        .filter(|r| r.estimate.is_some() && r.loglik.is_finite())
        .fold(None::<&StartResult>, |acc, r| match acc {
            Some(a) if a.loglik >= r.loglik => Some(a),
            _ => Some(r),
        });
    Ok(match best {
        Some(b) => PlFit {
            estimate: b.estimate,
            loglik: b.loglik,
            boundary: b.estimate.is_some_and(|p| at_boundary(&p)),
            stage1,
            stage2,
            failure: None,
        },
        None => PlFit {
            estimate: None,
            loglik: f64::NEG_INFINITY,
            boundary: false,
            stage1,
            stage2,
            failure: Some(format!("all {} starts failed to reach a finite likelihood", cfg.n_starts)),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate_indexed, SimulationMethod};

    fn br(l: f64, n: f64) -> ParameterVector {
        ParameterVector::brown_resnick(l, n).unwrap()
    }

    #[test]
    fn loglik_matches_brute_force_enumeration() {
        for n in [4, 6] {
            let grid = GridSpec::square(n);
            let p = br(2.0, 1.2);
            let field = simulate_indexed(&p, &grid, SimulationMethod::Exact, 5, 0).unwrap();
            let cfg = PlConfig { weight_cutoff: 2.5, ..PlConfig::default() };
            let fast = pairwise_loglik(&p, std::slice::from_ref(&field), &cfg).unwrap();
            let coords = grid.coords();
            let mut brute = 0.0;
            let mut count = 0;
            for i in 0..coords.len() {
                for j in 0..coords.len() {
                    let h = distance(coords[i], coords[j]);
                    if i < j && h <= 2.5 {
                        brute += crate::spatial::bivariate_density(field.values[i], field.values[j], h, &p)
                            .unwrap()
                            .ln();
                        count += 1;
                    }
                }
            }
            assert_eq!(fast.n_pairs, count);
            assert!((fast.value - brute).abs() < 1e-9 * brute.abs());
        }
    }

    #[test]
    fn cutoff_nesting_and_empty_sum() {
        let grid = GridSpec::square(5);
        let field = simulate_indexed(&br(1.0, 1.0), &grid, SimulationMethod::Exact, 1, 0).unwrap();
        let at = |d: f64| {
            pairwise_loglik(&br(1.0, 1.0), std::slice::from_ref(&field), &PlConfig { weight_cutoff: d, ..PlConfig::default() })
                .unwrap()
        };
        assert_eq!(at(0.0).value, 0.0);
        assert_eq!(at(0.0).n_pairs, 0);
        assert!(at(5.0).n_pairs >= at(3.0).n_pairs);
    }

    #[test]
    fn pooled_replicates_recover_truth() {
        let grid = GridSpec::square(6);
        let truth = br(2.0, 1.0);
        let fields: Vec<FieldSample> = (0..60)
            .map(|i| simulate_indexed(&truth, &grid, SimulationMethod::Exact, 17, i).unwrap())
            .collect();
        let cfg = PlConfig { n_starts: 4, n_refine: 2, weight_cutoff: 3.0, ..PlConfig::default() };
        let fit = fit_pl(&fields, ModelFamily::BrownResnick, &cfg).unwrap();
        let est = fit.estimate().unwrap();
        assert!((est.nu - truth.nu).abs() < 0.1, "{est:?}");
        assert!((est.lambda.ln() - truth.lambda.ln()).abs() < 0.1, "{est:?}");
        assert_eq!(fit, fit_pl(&fields, ModelFamily::BrownResnick, &cfg).unwrap());
        assert_eq!(fit.stage1.len(), 4);
        assert_eq!(fit.stage2.len(), 2);
    }

    #[test]
    fn estimates_stay_admissible() {
        let grid = GridSpec::square(5);
        let p = ParameterVector::new(ModelFamily::SchlatherPowExp, 1.5, 1.0).unwrap();
        let field = simulate_indexed(&p, &grid, SimulationMethod::Exact, 3, 0).unwrap();
        let cfg = PlConfig { n_starts: 3, n_refine: 1, ..PlConfig::default() };
        let fit = fit_pl(std::slice::from_ref(&field), ModelFamily::SchlatherPowExp, &cfg).unwrap();
        for r in fit.stage1.iter().chain(&fit.stage2) {
            if let Some(e) = r.estimate {
                assert!(e.validate().is_ok());
            }
        }
    }
}
