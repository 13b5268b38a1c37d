use serde::{Deserialize, Serialize};

use super::network::HeadKind;
use super::train::TrainedModel;
use crate::error::{Error, Result};
use crate::scoring::{IntervalEstimate, PosteriorSample};
use crate::simulate::FieldSample;
use crate::spatial::{theta_values, ModelFamily, ParameterVector, ThetaCurve};
use crate::stats::{pairwise_sum, quantile_sorted};

/// Pointwise summary of a set of θ curves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Functional {
    Mean,
    Quantile(f64),
}

/// Computes the pointwise functional across curves and sorts the result
/// ascending, giving a nondecreasing curve.
pub fn enforce_monotone(curves: &[ThetaCurve], functional: Functional) -> Result<ThetaCurve> {
    let first = curves.first().ok_or(Error::TooFewSamples { required: 1, found: 0 })?;
    if let Some(c) = curves.iter().find(|c| c.grid != first.grid) {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", c.grid, first.grid)));
    }
    let mut values: Vec<f64> = (0..first.grid.len())
        .map(|i| {
            let mut col: Vec<f64> = curves.iter().map(|c| c.values[i]).collect();
            match functional {
                Functional::Mean => pairwise_sum(&col) / col.len() as f64,
                Functional::Quantile(q) => {
                    col.sort_by(f64::total_cmp);
                    quantile_sorted(&col, q)
                }
            }
        })
        .collect();
    values.sort_by(f64::total_cmp);
    ThetaCurve::new(first.grid, values)
}

fn to_params(family: ModelFamily, s: &[f64]) -> Result<ParameterVector> {
    match family {
        ModelFamily::Smith => ParameterVector::smith(s[0]),
        f => ParameterVector::new(f, s[0], s[1]),
    }
}

/// `m` posterior samples for one field.
pub fn forward(model: &TrainedModel, field: &FieldSample, m: usize, seed: u64) -> Result<PosteriorSample> {
    let spec = model.spec();
    if field.grid.nx != spec.nx || field.grid.ny != spec.ny {
        return Err(Error::GridMismatch(format!(
            "field grid {}×{} vs network input {}×{}",
            field.grid.nx, field.grid.ny, spec.nx, spec.ny
        )));
    }
    if m < 2 {
        return Err(Error::TooFewSamples { required: 2, found: m });
    }
    let rows = model.network.sample(&[&field.values], m, seed, field.index)?.remove(0);
    samples_to_posterior(model, rows)
}

pub(crate) fn samples_to_posterior(model: &TrainedModel, rows: Vec<Vec<f64>>) -> Result<PosteriorSample> {
    let spec = model.spec();
    match spec.head {
        HeadKind::Param => {
            let params = rows.iter().map(|r| to_params(model.family, r)).collect::<Result<Vec<_>>>()?;
            PosteriorSample::params(params)
        }
        HeadKind::Theta => {
            let curves = rows
                .into_iter()
                .map(|values| ThetaCurve::new(spec.theta_grid, values))
                .collect::<Result<Vec<_>>>()?;
            PosteriorSample::theta(curves)
        }
    }
}

/// Posterior summary for one field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub posterior: PosteriorSample,
    /// Sample mean of `(λ, ν)` or of the θ values.
    pub mean: Vec<f64>,
    pub interval: IntervalEstimate,
    /// Monotone θ curves: pointwise mean and `α/2`, `1 − α/2` quantiles.
    pub theta_mean: ThetaCurve,
    pub theta_lower: ThetaCurve,
    pub theta_upper: ThetaCurve,
}

/// θ curves implied by a posterior sample, mapping parameter samples
/// through the closed form.
pub fn theta_curves(posterior: &PosteriorSample, grid: crate::spatial::HGrid) -> Result<Vec<ThetaCurve>> {
    match posterior {
        PosteriorSample::Params(ps) => ps
            .iter()
            .map(|p| Ok(ThetaCurve { grid, values: theta_values(p, &grid)? }))
            .collect(),
        PosteriorSample::Theta(cs) => Ok(cs.clone()),
    }
}

pub fn summarize(posterior: PosteriorSample, alpha: f64, grid: crate::spatial::HGrid) -> Result<Prediction> {
    let curves = theta_curves(&posterior, grid)?;
    Ok(Prediction {
        mean: posterior.mean(),
        interval: posterior.interval(alpha)?,
        theta_mean: enforce_monotone(&curves, Functional::Mean)?,
        theta_lower: enforce_monotone(&curves, Functional::Quantile(alpha / 2.0))?,
        theta_upper: enforce_monotone(&curves, Functional::Quantile(1.0 - alpha / 2.0))?,
        posterior,
    })
}

/// `m_predict` samples plus mean and 95% interval summaries.
pub fn predict(model: &TrainedModel, field: &FieldSample, seed: u64) -> Result<Prediction> {
    let posterior = forward(model, field, model.config.m_predict, seed)?;
    summarize(posterior, 0.05, model.spec().theta_grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Network, NetworkSpec, TrainConfig};
    use crate::simulate::{simulate, GridSpec};
    use crate::spatial::HGrid;
    use proptest::prelude::*;

    fn curve(values: &[f64]) -> ThetaCurve {
        ThetaCurve::new(HGrid::new(0.1, values.len()).unwrap(), values.to_vec()).unwrap()
    }

    #[test]
    fn monotone_hand_values() {
        let out = enforce_monotone(&[curve(&[1.2, 1.1, 1.3])], Functional::Mean).unwrap();
        assert_eq!(out.values, vec![1.1, 1.2, 1.3]);
        let crafted = [curve(&[1.0, 1.9]), curve(&[1.8, 1.1])];
        let mean_then_sort = enforce_monotone(&crafted, Functional::Mean).unwrap();
        assert!((mean_then_sort.values[0] - 1.4).abs() < 1e-15);
        assert!((mean_then_sort.values[1] - 1.5).abs() < 1e-15);
        let sorted: Vec<ThetaCurve> = crafted
            .iter()
            .map(|c| enforce_monotone(std::slice::from_ref(c), Functional::Mean).unwrap())
            .collect();
        let sort_then_mean = enforce_monotone(&sorted, Functional::Mean).unwrap();
        assert!((sort_then_mean.values[0] - 1.05).abs() < 1e-15);
        assert!((sort_then_mean.values[1] - 1.85).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn monotone_is_idempotent_permutation(rows in proptest::collection::vec(proptest::collection::vec(1.0f64..2.0, 6), 1..5), q in 0.0f64..1.0) {
            let curves: Vec<ThetaCurve> = rows.iter().map(|r| curve(r)).collect();
            for f in [Functional::Mean, Functional::Quantile(q)] {
                let once = enforce_monotone(&curves, f).unwrap();
                prop_assert!(once.is_nondecreasing());
                let twice = enforce_monotone(std::slice::from_ref(&once), f).unwrap();
                prop_assert_eq!(&twice, &once);
            }
        }
    }

    fn model(head: HeadKind) -> TrainedModel {
        let spec = NetworkSpec {
            nx: 8,
            ny: 8,
            channels: vec![4],
            dense: 8,
            head,
            theta_grid: HGrid::new(0.5, 10).unwrap(),
            noise: true,
        };
        TrainedModel {
            network: Network::new(spec, 4).unwrap(),
            config: TrainConfig { m_predict: 40, ..TrainConfig::default() },
            family: ModelFamily::BrownResnick,
            manifest_hash: None,
            log: vec![],
            initial_val_es: f64::NAN,
            state: None,
        }
    }

    #[test]
    fn predictions_are_ordered_and_monotone() {
        let field = simulate(&ParameterVector::brown_resnick(2.0, 1.0).unwrap(), &GridSpec::square(8), 1).unwrap();
        for head in [HeadKind::Param, HeadKind::Theta] {
            let m = model(head);
            let pred = predict(&m, &field, 9).unwrap();
            assert_eq!(pred.posterior.len(), 40);
            assert_eq!(pred, predict(&m, &field, 9).unwrap());
            for (l, u) in pred.interval.lower.iter().zip(&pred.interval.upper) {
                assert!(l <= u);
            }
            for c in [&pred.theta_mean, &pred.theta_lower, &pred.theta_upper] {
                assert!(c.is_nondecreasing());
            }
            for i in 0..10 {
                assert!(pred.theta_lower.values[i] <= pred.theta_upper.values[i]);
            }
        }
        let wrong = simulate(&ParameterVector::brown_resnick(2.0, 1.0).unwrap(), &GridSpec::square(6), 1).unwrap();
        assert!(forward(&model(HeadKind::Param), &wrong, 5, 0).is_err());
    }
}
