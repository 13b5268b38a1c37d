//! Reference estimators: pairwise composite likelihood, ABC on tripletwise
//! extremal coefficients, and a point CNN trained with squared error.

pub mod abc;
pub mod pl;

pub use abc::{abc, downsample, triplet_summary, AbcConfig, Downsampler, ReferenceTable};
pub use pl::{fit_pl, pairwise_loglik, PairLik, PlConfig, PlFit, StartResult};

use crate::error::{Error, Result};
use crate::nn::{self, NetworkSpec, TrainConfig, TrainedModel};
use crate::simulate::{FieldSample, TrainingSet};
use crate::spatial::{ModelFamily, ParameterVector, ThetaCurve};

/// Trains the generative architecture with the latent noise layer removed,
/// giving one deterministic output per field and a squared-error loss.
pub fn fit_point_cnn(dataset: &TrainingSet, config: &TrainConfig, spec: NetworkSpec) -> Result<TrainedModel> {
    nn::train(dataset, config, NetworkSpec { noise: false, ..spec })
}

/// Point estimate of a noise-free network on the natural scale.
pub fn point_output(model: &TrainedModel, field: &FieldSample) -> Result<Vec<f64>> {
    if model.network.spec.noise {
        return Err(Error::domain("model has a latent noise layer; use the posterior sampler"));
    }
    let spec = &model.network.spec;
    if field.grid.nx != spec.nx || field.grid.ny != spec.ny {
        return Err(Error::GridMismatch(format!(
            "field grid {}×{} vs network input {}×{}",
            field.grid.nx, field.grid.ny, spec.nx, spec.ny
        )));
    }
    Ok(model.network.sample(&[&field.values], 1, 0, field.index)?.remove(0).remove(0))
}

/// Point estimate of `(λ, ν)` from a parameter-head point CNN.
pub fn point_params(model: &TrainedModel, field: &FieldSample) -> Result<ParameterVector> {
    let out = point_output(model, field)?;
    match model.family {
        ModelFamily::Smith => ParameterVector::smith(out[0]),
        f => ParameterVector::new(f, out[0], out[1]),
    }
}

/// Point estimate of the θ curve from a θ-head point CNN.
pub fn point_theta(model: &TrainedModel, field: &FieldSample) -> Result<ThetaCurve> {
    ThetaCurve::new(model.network.spec.theta_grid, point_output(model, field)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::HeadKind;
    use crate::simulate::{generate_training_set, GridSpec, PriorBox};
    use crate::spatial::HGrid;

    #[test]
    fn point_cnn_is_deterministic_single_output() {
        let set = generate_training_set(&PriorBox::default(), 12, ModelFamily::BrownResnick, &GridSpec::square(8), 3)
            .unwrap();
        let spec = NetworkSpec {
            nx: 8,
            ny: 8,
            channels: vec![4],
            dense: 8,
            head: HeadKind::Param,
            theta_grid: HGrid::new(0.5, 4).unwrap(),
            noise: true,
        };
        let cfg = TrainConfig { max_epochs: 2, batch_size: 4, ..TrainConfig::default() };
        let a = fit_point_cnn(&set, &cfg, spec.clone()).unwrap();
        let b = fit_point_cnn(&set, &cfg, spec).unwrap();
        assert!(!a.network.spec.noise);
        assert_eq!(a.network.params, b.network.params);
        let field = &set.pairs[0].1;
        let p = point_params(&a, field).unwrap();
        assert!(p.validate().is_ok());
        assert_eq!(point_output(&a, field).unwrap().len(), 2);
        assert_eq!(p, point_params(&b, field).unwrap());
    }
}
