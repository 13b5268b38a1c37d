use serde::{Deserialize, Serialize};

use super::network::{preprocess, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::scoring::energy_score_grad;
use crate::simulate::{AugmentMask, FieldSample, TrainingSet};
use crate::spatial::{ModelFamily, ParameterVector};
use crate::stats::pairwise_sum;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Posterior samples per example when computing the training loss.
    pub m_train: usize,
    /// Posterior samples drawn at prediction time.
    pub m_predict: usize,
    pub max_epochs: usize,
    /// Learning-rate multiplier applied after `lr_patience` epochs without
    /// validation improvement.
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    /// Relative decrease of the validation loss that counts as improvement.
    pub min_rel_improvement: f64,
    pub augment: bool,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 7e-4,
            batch_size: 100,
            m_train: 50,
            m_predict: 500,
            max_epochs: 200,
            lr_factor: 0.5,
            lr_patience: 5,
            early_stop_patience: 10,
            min_rel_improvement: 1e-4,
            augment: true,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_train < 2 || self.m_predict < 2 {
            return Err(Error::TooFewSamples { required: 2, found: self.m_train.min(self.m_predict) });
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::domain(format!("invalid training configuration {self:?}")));
        }
        if !(self.rms_decay >= 0.0 && self.rms_decay < 1.0) || !(self.rms_eps > 0.0) {
            return Err(Error::domain("RMSProp decay must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_es: f64,
    pub val_es: f64,
    pub lr: f64,
}

/// Loss over a batch and its gradient with respect to the raw outputs.
///
/// With latent noise the loss is the mean energy score of each example's
/// `m` samples; without it, the mean squared error. Both live on the scale
/// given by [`Network::loss_scale`].
pub fn output_loss(net: &Network, raw: &[f64], targets: &[&[f64]], m: usize) -> Result<(f64, Vec<f64>)> {
    let dim = net.spec.output_dim();
    let (y, dy) = net.loss_scale(raw);
    let batch = targets.len();
    let per = if net.spec.noise { m } else { 1 };
    let mut d_raw = vec![0.0; raw.len()];
    let mut losses = Vec::with_capacity(batch);
    for (b, t) in targets.iter().enumerate() {
        let rows = b * per * dim..(b + 1) * per * dim;
        if net.spec.noise {
            let (es, g) = energy_score_grad(&y[rows.clone()], t)?;
            losses.push(es);
            for ((d, g), s) in d_raw[rows.clone()].iter_mut().zip(g).zip(&dy[rows]) {
                *d = g * s / batch as f64;
            }
        } else {
            let r = &y[rows.clone()];
            let sq: Vec<f64> = r.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).collect();
            losses.push(pairwise_sum(&sq) / dim as f64);
            for (i, j) in rows.enumerate() {
                d_raw[j] = 2.0 * (r[i] - t[i]) / (dim * batch) as f64 * dy[j];
            }
        }
    }
    Ok((pairwise_sum(&losses) / batch as f64, d_raw))
}

/// Loss and parameter gradients for one batch with given latent draws.
pub fn loss_and_grad(
    net: &Network,
    inputs: &[f64],
    targets: &[&[f64]],
    m: usize,
    latent: Option<Vec<f64>>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (raw, cache) = net.forward(inputs, targets.len(), m, latent)?;
    let (loss, d_raw) = output_loss(net, &raw, targets, m)?;
    Ok((loss, net.backward(&cache, &d_raw)))
}

/// Mutable optimization state; everything needed to resume training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: Network,
    pub best: Network,
    pub rms: Vec<Vec<f64>>,
    pub lr: f64,
    /// Epochs completed so far.
    pub epoch: usize,
    pub best_val: f64,
    pub since_best: usize,
    pub since_lr_change: usize,
    pub initial_val: f64,
    pub log: Vec<EpochLog>,
    pub stopped: bool,
}

/// A fitted estimator with its provenance.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub network: Network,
    pub config: TrainConfig,
    /// Family of the training data; parameter samples are tagged with it.
    pub family: ModelFamily,
    pub manifest_hash: Option<String>,
    pub log: Vec<EpochLog>,
    pub initial_val_es: f64,
    /// Optimizer state for resuming; absent for inference-only models.
    pub state: Option<TrainState>,
}

impl TrainedModel {
    pub fn spec(&self) -> &NetworkSpec {
        &self.network.spec
    }
}

struct Example {
    input: Vec<f64>,
    target: Vec<f64>,
}

/// Mini-batch RMSProp over a training set.
pub struct Trainer {
    config: TrainConfig,
    train: Vec<Example>,
    val: Vec<Example>,
    n: usize,
    family: ModelFamily,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(dataset: &TrainingSet, config: &TrainConfig, spec: NetworkSpec) -> Result<Self> {
        let net = Network::new(spec, config.seed)?;
        let state = TrainState {
            best: net.clone(),
            rms: net.zeros_like(),
            net,
            lr: config.learning_rate,
            epoch: 0,
            best_val: f64::INFINITY,
            since_best: 0,
            since_lr_change: 0,
            initial_val: f64::NAN,
            log: Vec::new(),
            stopped: false,
        };
        let mut trainer = Self::with_state(dataset, config, state)?;
        trainer.state.initial_val = trainer.validation_loss(&trainer.state.net)?;
        Ok(trainer)
    }

    /// Continues from a saved state; the configuration must match the one
    /// the state was produced with for results to be reproducible.
    pub fn with_state(dataset: &TrainingSet, config: &TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::TooFewSamples { required: 1, found: 0 });
        }
        let spec = &state.net.spec;
        if dataset.grid.nx != spec.nx || dataset.grid.ny != spec.ny {
            return Err(Error::GridMismatch(format!(
                "dataset grid {}×{} vs network input {}×{}",
                dataset.grid.nx, dataset.grid.ny, spec.nx, spec.ny
            )));
        }
        if config.augment && !dataset.grid.is_square() {
            return Err(Error::domain("augmentation requires a square grid"));
        }
        let prepare = |pairs: &[(ParameterVector, FieldSample)]| {
            pairs
                .iter()
                .map(|(p, f)| Ok(Example { input: preprocess(&f.values), target: state.net.target(p)? }))
                .collect::<Result<Vec<_>>>()
        };
        let train = prepare(dataset.train_pairs())?;
        // Tiny sets fall back to validating on the training data.
        let val = if dataset.validation_pairs().is_empty() { prepare(dataset.train_pairs())? } else { prepare(dataset.validation_pairs())? };
        Ok(Trainer { config: config.clone(), n: spec.nx, family: dataset.family, train, val, state })
    }

    fn epoch_seed(&self, epoch: usize) -> u64 {
        rng::derive_seed(self.config.seed, 0x1_0000 + epoch as u64)
    }

    /// Mean validation loss with latent draws fixed across epochs.
    pub fn validation_loss(&self, net: &Network) -> Result<f64> {
        let m = self.config.m_train;
        let mut losses = Vec::new();
        for (c, chunk) in self.val.chunks(self.config.batch_size).enumerate() {
            let inputs: Vec<f64> = chunk.iter().flat_map(|e| e.input.iter().copied()).collect();
            let targets: Vec<&[f64]> = chunk.iter().map(|e| e.target.as_slice()).collect();
            let latent = net.spec.noise.then(|| {
                let mut rng = rng::substream(self.config.seed, domain::VALIDATION, c as u64);
                net.draw_latent(chunk.len() * m, &mut rng)
            });
            let (raw, _) = net.forward(&inputs, chunk.len(), m, latent)?;
            let (loss, _) = output_loss(net, &raw, &targets, m)?;
            losses.push(loss * chunk.len() as f64);
        }
        Ok(pairwise_sum(&losses) / self.val.len() as f64)
    }

    /// Runs one epoch and updates the scheduler. Returns `None` once
    /// training has stopped.
    pub fn step_epoch(&mut self) -> Result<Option<EpochLog>> {
        if self.state.stopped || self.state.epoch >= self.config.max_epochs {
            self.state.stopped = true;
            return Ok(None);
        }
        let epoch = self.state.epoch + 1;
        let eseed = self.epoch_seed(epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng::substream(eseed, domain::SHUFFLE, 0));
        }
        let m = self.config.m_train;
        let mut batch_losses = Vec::new();
        for (bi, idx) in order.chunks(self.config.batch_size).enumerate() {
            let mut inputs = Vec::with_capacity(idx.len() * self.n * self.n);
            for &i in idx {
                let x = &self.train[i].input;
                if self.config.augment {
                    inputs.extend(AugmentMask::for_index(eseed, i as u64).apply(self.n, x));
                } else {
                    inputs.extend_from_slice(x);
                }
            }
            let targets: Vec<&[f64]> = idx.iter().map(|&i| self.train[i].target.as_slice()).collect();
            let net = &self.state.net;
            let latent = net
                .spec
                .noise
                .then(|| net.draw_latent(idx.len() * m, &mut rng::substream(eseed, domain::LATENT, bi as u64)));
            let (loss, grads) = loss_and_grad(net, &inputs, &targets, m, latent)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, batch: bi, seed: self.config.seed });
            }
            self.rmsprop(&grads);
            batch_losses.push(loss * idx.len() as f64);
        }
        let train_es = pairwise_sum(&batch_losses) / self.train.len() as f64;
        let val_es = self.validation_loss(&self.state.net)?;
        if !val_es.is_finite() {
            return Err(Error::Divergence { epoch, batch: usize::MAX, seed: self.config.seed });
        }
        let entry = EpochLog { epoch, train_es, val_es, lr: self.state.lr };
        self.state.log.push(entry);
        self.state.epoch = epoch;
        self.schedule(val_es);
        Ok(Some(entry))
    }

    fn rmsprop(&mut self, grads: &[Vec<f64>]) {
        let (rho, eps, lr) = (self.config.rms_decay, self.config.rms_eps, self.state.lr);
        for ((t, v), g) in self.state.net.params.iter_mut().zip(&mut self.state.rms).zip(grads) {
            for ((w, v), g) in t.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = rho * *v + (1.0 - rho) * g * g;
                *w -= lr * g / (v.sqrt() + eps);
            }
        }
    }

    fn schedule(&mut self, val: f64) {
        let s = &mut self.state;
        let threshold = if s.best_val.is_finite() {
            s.best_val - self.config.min_rel_improvement * s.best_val.abs()
        } else {
            f64::INFINITY
        };
        if val < threshold {
            s.best_val = val;
            s.best = s.net.clone();
            s.since_best = 0;
            s.since_lr_change = 0;
        } else {
            s.since_best += 1;
            s.since_lr_change += 1;
            if s.since_lr_change >= self.config.lr_patience {
                s.lr *= self.config.lr_factor;
                s.since_lr_change = 0;
            }
        }
        if s.since_best >= self.config.early_stop_patience || s.epoch >= self.config.max_epochs {
            s.stopped = true;
        }
    }

    pub fn run(mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainedModel> {
        while let Some(entry) = self.step_epoch()? {
            on_epoch(&entry);
        }
        Ok(self.into_model())
    }

    pub fn into_model(self) -> TrainedModel {
        TrainedModel {
            network: self.state.best.clone(),
            config: self.config,
            family: self.family,
            manifest_hash: None,
            log: self.state.log.clone(),
            initial_val_es: self.state.initial_val,
            state: Some(self.state),
        }
    }
}

/// Trains a network with the given architecture and returns the weights
/// with the best validation loss.
pub fn train(dataset: &TrainingSet, config: &TrainConfig, spec: NetworkSpec) -> Result<TrainedModel> {
    Trainer::new(dataset, config, spec)?.run(|_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::HeadKind;
    use crate::rng::std_normal;
    use crate::simulate::{generate_training_set, GridSpec, PriorBox};
    use crate::spatial::HGrid;
    use rand::Rng as _;

    fn reduced(head: HeadKind, channels: Vec<usize>, noise: bool) -> NetworkSpec {
        NetworkSpec { nx: 8, ny: 8, channels, dense: 16, head, theta_grid: HGrid::new(0.5, 6).unwrap(), noise }
    }

    fn grad_check(spec: NetworkSpec, m: usize, coords: usize) {
        let net = Network::new(spec, 7).unwrap();
        let mut rng = rng::substream(99, 0, 0);
        let batch = 2;
        let inputs: Vec<f64> = (0..batch * 64).map(|_| std_normal(&mut rng)).collect();
        let p = |l, n| ParameterVector::brown_resnick(l, n).unwrap();
        let targets: Vec<Vec<f64>> = [p(1.3, 0.7), p(3.0, 1.4)].iter().map(|q| net.target(q).unwrap()).collect();
        let targets: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
        let latent = net.spec.noise.then(|| net.draw_latent(batch * m, &mut rng));
        let (_, grads) = loss_and_grad(&net, &inputs, &targets, m, latent.clone()).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..coords {
            let t = rng.random_range(0..net.params.len());
            let i = rng.random_range(0..net.params[t].data.len());
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut n2 = net.clone();
                n2.params[t].data[i] += delta;
                loss_and_grad(&n2, &inputs, &targets, m, latent.clone()).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[t][i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{}[{i}]: analytic {an} vs fd {fd}", net.params[t].name);
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn gradients_match_finite_differences_single_block() {
        grad_check(reduced(HeadKind::Param, vec![8], true), 3, 100);
    }

    #[test]
    fn gradients_match_finite_differences_residual_blocks() {
        grad_check(reduced(HeadKind::Param, vec![3, 4], true), 3, 60);
        grad_check(reduced(HeadKind::Theta, vec![3, 4], true), 3, 60);
        grad_check(reduced(HeadKind::Param, vec![3, 4], false), 1, 60);
    }

    fn tiny_set() -> TrainingSet {
        generate_training_set(&PriorBox::default(), 10, ModelFamily::BrownResnick, &GridSpec::square(8), 5).unwrap()
    }

    #[test]
    fn smoke_training_logs_finite_losses() {
        let cfg = TrainConfig { max_epochs: 1, batch_size: 4, m_train: 4, ..TrainConfig::default() };
        let model = train(&tiny_set(), &cfg, reduced(HeadKind::Param, vec![4], true)).unwrap();
        assert_eq!(model.log.len(), 1);
        assert!(model.log[0].train_es.is_finite() && model.log[0].val_es.is_finite());
    }

    #[test]
    fn resumed_training_reproduces_next_epoch() {
        let set = tiny_set();
        let cfg = TrainConfig { max_epochs: 3, batch_size: 4, m_train: 4, ..TrainConfig::default() };
        let spec = reduced(HeadKind::Param, vec![4], true);
        let mut full = Trainer::new(&set, &cfg, spec.clone()).unwrap();
        full.step_epoch().unwrap();
        let saved = full.state.clone();
        let second = full.step_epoch().unwrap().unwrap();
        let mut resumed = Trainer::with_state(&set, &cfg, saved).unwrap();
        assert_eq!(resumed.step_epoch().unwrap().unwrap(), second);
    }

    #[test]
    fn early_stopping_and_plateau_schedule() {
        let set = tiny_set();
        let cfg = TrainConfig {
            max_epochs: 50,
            batch_size: 4,
            m_train: 3,
            learning_rate: 1e-12,
            lr_patience: 2,
            early_stop_patience: 4,
            ..TrainConfig::default()
        };
        let model = train(&set, &cfg, reduced(HeadKind::Param, vec![2], true)).unwrap();
        assert!(model.log.len() < 50);
        let lrs: Vec<f64> = model.log.iter().map(|e| e.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.last().unwrap() < &1e-12);
    }
}
