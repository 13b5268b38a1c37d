//! Proper scoring rules and error metrics for posterior samples.
//!
//! All reductions go through [`pairwise_sum`] so scores are reproducible
//! bit-for-bit regardless of thread count.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::simulate::{distance, FieldSample};
use crate::spatial::{theta_values, HGrid, PairModel, ParameterVector, ThetaCurve};
use crate::stats::{pairwise_sum, quantile_sorted};

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_m(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::TooFewSamples { required: 2, found: m });
    }
    Ok(())
}

/// Energy score (β = 1) of `m` samples stored row-major in `samples`
/// (`m × d`) against `truth` (length `d`).
///
/// The double sum runs over ordered pairs `j ≠ k` with coefficient
/// `1 / (2m(m − 1))`.
pub fn energy_score_flat(samples: &[f64], truth: &[f64]) -> Result<f64> {
    let d = truth.len();
    if d == 0 || samples.len() % d != 0 {
        return Err(Error::DimensionMismatch { expected: d, found: samples.len() });
    }
    let m = samples.len() / d;
    check_m(m)?;
    let rows: Vec<&[f64]> = samples.chunks_exact(d).collect();
    let to_truth: Vec<f64> = rows.iter().map(|x| euclid(x, truth)).collect();
    let mut between = Vec::with_capacity(m * (m - 1) / 2);
    for j in 0..m {
        for k in j + 1..m {
            between.push(euclid(rows[j], rows[k]));
        }
    }
    let mf = m as f64;
    let first = pairwise_sum(&to_truth) / mf;
    // Each unordered pair appears twice in the ordered sum.
    let second = 2.0 * pairwise_sum(&between) / (2.0 * mf * (mf - 1.0));
    Ok(first - second)
}

pub fn energy_score<S: AsRef<[f64]>>(samples: &[S], truth: &[f64]) -> Result<f64> {
    let mut flat = Vec::with_capacity(samples.len() * truth.len());
    for s in samples {
        let s = s.as_ref();
        if s.len() != truth.len() {
            return Err(Error::DimensionMismatch { expected: truth.len(), found: s.len() });
        }
        flat.extend_from_slice(s);
    }
    energy_score_flat(&flat, truth)
}

/// Energy score together with its gradient with respect to every sample
/// coordinate (same `m × d` layout). Coincident points contribute a zero
/// subgradient.
pub fn energy_score_grad(samples: &[f64], truth: &[f64]) -> Result<(f64, Vec<f64>)> {
    let score = energy_score_flat(samples, truth)?;
    let d = truth.len();
    let m = samples.len() / d;
    let mf = m as f64;
    let mut grad = vec![0.0; samples.len()];
    let unit_add = |g: &mut [f64], a: &[f64], b: &[f64], scale: f64| {
        let n = euclid(a, b);
        if n > 0.0 {
            for ((gi, ai), bi) in g.iter_mut().zip(a).zip(b) {
                *gi += scale * (ai - bi) / n;
            }
        }
    };
    let c_between = 1.0 / (mf * (mf - 1.0));
    for j in 0..m {
        let xj = &samples[j * d..(j + 1) * d];
        let g = &mut grad[j * d..(j + 1) * d];
        unit_add(g, xj, truth, 1.0 / mf);
        for k in 0..m {
            if k != j {
                unit_add(g, xj, &samples[k * d..(k + 1) * d], -c_between);
            }
        }
    }
    Ok((score, grad))
}

fn check_grid(a: &HGrid, b: &HGrid) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Energy score of curve samples, using raw Euclidean norms of the value
/// vectors (no `dh` weighting).
pub fn functional_energy_score(curves: &[ThetaCurve], truth: &ThetaCurve) -> Result<f64> {
    for c in curves {
        check_grid(&c.grid, &truth.grid)?;
    }
    let values: Vec<&[f64]> = curves.iter().map(|c| c.values.as_slice()).collect();
    energy_score(&values, &truth.values)
}

pub fn interval_score(lower: f64, upper: f64, alpha: f64, x: f64) -> Result<f64> {
    if !(lower <= upper) {
        return Err(Error::domain(format!("interval lower {lower} exceeds upper {upper}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut s = upper - lower;
    if x < lower {
        s += 2.0 / alpha * (lower - x);
    }
    if x > upper {
        s += 2.0 / alpha * (x - upper);
    }
    Ok(s)
}

/// Riemann sum of pointwise interval scores with weight `dh`.
pub fn integrated_interval_score(
    lower: &ThetaCurve,
    upper: &ThetaCurve,
    alpha: f64,
    truth: &ThetaCurve,
) -> Result<f64> {
    check_grid(&lower.grid, &truth.grid)?;
    check_grid(&upper.grid, &truth.grid)?;
    let terms = (0..truth.values.len())
        .map(|i| interval_score(lower.values[i], upper.values[i], alpha, truth.values[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&terms) * truth.grid.dh)
}

/// `Σ (a_i − b_i)² · dh` over a common grid.
pub fn curve_sq_distance(a: &ThetaCurve, b: &ThetaCurve) -> Result<f64> {
    check_grid(&a.grid, &b.grid)?;
    let sq: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).collect();
    Ok(pairwise_sum(&sq) * a.grid.dh)
}

/// Integrated squared error of an estimated θ curve against the curve of
/// the true parameters.
pub fn mse_theta(estimate: &ThetaCurve, truth: &ParameterVector) -> Result<f64> {
    let truth = ThetaCurve::from_params(truth, estimate.grid)?;
    curve_sq_distance(estimate, &truth)
}

/// [`mse_theta`] for a parameter estimate, mapped through θ first.
pub fn mse_theta_params(estimate: &ParameterVector, truth: &ParameterVector, grid: HGrid) -> Result<f64> {
    mse_theta(&ThetaCurve::from_params(estimate, grid)?, truth)
}

/// Site-pair selection for [`log_score`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogScoreConfig {
    /// Pairs farther apart than this are ignored.
    pub cutoff: f64,
    /// Upper bound on the number of pairs, reached by seeded subsampling.
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for LogScoreConfig {
    fn default() -> Self {
        LogScoreConfig { cutoff: 5.0, max_pairs: 10_000, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogScore {
    /// Mean negative log density; `+∞` if any term underflowed.
    pub value: f64,
    pub n_terms: usize,
    /// Terms whose density underflowed to zero.
    pub underflow: usize,
}

/// Site pairs `(i, j, h)` with `0 < h ≤ cutoff`, subsampled to at most
/// `max_pairs` without replacement.
pub fn site_pairs(coords: &[[f64; 2]], cfg: &LogScoreConfig) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            let h = distance(coords[i], coords[j]);
            if h <= cfg.cutoff {
                pairs.push((i, j, h));
            }
        }
    }
    if pairs.len() > cfg.max_pairs {
        let mut rng = rng::substream(cfg.seed, domain::SUBSAMPLE, 0);
        let mut keep = sample_indices(&mut rng, pairs.len(), cfg.max_pairs).into_vec();
        keep.sort_unstable();
        pairs = keep.into_iter().map(|k| pairs[k]).collect();
    }
    pairs
}

/// Negative mean pairwise log density of observed fields under `p`,
/// averaged over all fields and the selected site pairs.
pub fn log_score(p: &ParameterVector, fields: &[FieldSample], cfg: &LogScoreConfig) -> Result<LogScore> {
    p.validate()?;
    let Some(first) = fields.first() else {
        return Err(Error::TooFewSamples { required: 1, found: 0 });
    };
    if let Some(f) = fields.iter().find(|f| f.grid != first.grid) {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", f.grid, first.grid)));
    }
    let pairs = site_pairs(&first.grid.coords(), cfg);
    let models = pairs
        .iter()
        .map(|&(_, _, h)| PairModel::new(h, p))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::with_capacity(pairs.len() * fields.len());
    let mut underflow = 0;
    for field in fields {
        for (&(i, j, _), model) in pairs.iter().zip(&models) {
            let ld = model.log_density(field.values[i], field.values[j]);
            if ld == f64::NEG_INFINITY {
                underflow += 1;
            }
            terms.push(-ld);
        }
    }
    if terms.is_empty() {
        return Err(Error::Evaluation("no site pairs within the cutoff".into()));
    }
    let value = if underflow > 0 { f64::INFINITY } else { pairwise_sum(&terms) / terms.len() as f64 };
    Ok(LogScore { value, n_terms: terms.len(), underflow })
}

/// Samples from an approximate posterior: parameter vectors or θ curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "samples", rename_all = "snake_case")]
pub enum PosteriorSample {
    Params(Vec<ParameterVector>),
    Theta(Vec<ThetaCurve>),
}

impl PosteriorSample {
    pub fn params(samples: Vec<ParameterVector>) -> Result<Self> {
        check_m(samples.len())?;
        for p in &samples {
            p.validate()?;
        }
        Ok(PosteriorSample::Params(samples))
    }

    pub fn theta(curves: Vec<ThetaCurve>) -> Result<Self> {
        check_m(curves.len())?;
        let grid = curves[0].grid;
        for c in &curves {
            check_grid(&c.grid, &grid)?;
            if let Some(v) = c.values.iter().find(|v| !(1.0..=2.0).contains(*v)) {
                return Err(Error::domain(format!("θ value {v} outside [1, 2]")));
            }
        }
        Ok(PosteriorSample::Theta(curves))
    }

    pub fn len(&self) -> usize {
        match self {
            PosteriorSample::Params(s) => s.len(),
            PosteriorSample::Theta(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of the sample as plain vectors: `(λ, ν)` or curve values.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        match self {
            PosteriorSample::Params(s) => s.iter().map(|p| vec![p.lambda, p.nu]).collect(),
            PosteriorSample::Theta(c) => c.iter().map(|c| c.values.clone()).collect(),
        }
    }

    /// Componentwise sample mean.
    pub fn mean(&self) -> Vec<f64> {
        columns(&self.rows()).iter().map(|c| pairwise_sum(c) / c.len() as f64).collect()
    }

    /// Componentwise empirical `α/2` and `1 − α/2` quantiles.
    pub fn interval(&self, alpha: f64) -> Result<IntervalEstimate> {
        IntervalEstimate::from_rows(&self.rows(), alpha)
    }
}

fn columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    (0..d).map(|c| rows.iter().map(|r| r[c]).collect()).collect()
}

/// Pointwise equal-tailed interval from empirical quantiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub alpha: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl IntervalEstimate {
    pub fn from_rows(rows: &[Vec<f64>], alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::domain(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if rows.is_empty() {
            return Err(Error::TooFewSamples { required: 1, found: 0 });
        }
        let (mut lower, mut upper) = (Vec::new(), Vec::new());
        for mut col in columns(rows) {
            col.sort_by(f64::total_cmp);
            lower.push(quantile_sorted(&col, alpha / 2.0));
            upper.push(quantile_sorted(&col, 1.0 - alpha / 2.0));
        }
        Ok(IntervalEstimate { alpha, lower, upper })
    }
}

/// One aggregated metric, serialized as a flat JSON record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub std: f64,
    pub scenario: String,
    pub method: String,
    pub seed: u64,
}

/// Exact expected energy score `E_{Y∼P} ES(Q, Y)` for discrete `Q` and `P`,
/// using the population form `E‖X − y‖ − ½E‖X − X'‖`.
pub fn expected_energy_score(
    forecast: &[(Vec<f64>, f64)],
    truth: &[(Vec<f64>, f64)],
) -> f64 {
    let mut spread = 0.0;
    for (x, wx) in forecast {
        for (x2, wx2) in forecast {
            spread += wx * wx2 * euclid(x, x2);
        }
    }
    let mut fit = 0.0;
    for (y, wy) in truth {
        for (x, wx) in forecast {
            fit += wy * wx * euclid(x, y);
        }
    }
    fit - 0.5 * spread
}

/// θ curve of a parameter vector on the default grid, as a convenience for
/// turning parameter posteriors into curve posteriors.
pub fn theta_curve(p: &ParameterVector, grid: HGrid) -> Result<ThetaCurve> {
    Ok(ThetaCurve { grid, values: theta_values(p, &grid)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{std_normal, substream};
    use crate::simulate::{simulate, GridSpec};
    use crate::spatial::ModelFamily;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn constant(v: f64, grid: HGrid) -> ThetaCurve {
        ThetaCurve::new(grid, vec![v; grid.k]).unwrap()
    }

    #[test]
    fn energy_score_hand_values() {
        assert_eq!(energy_score(&[[0.0], [2.0]], &[1.0]).unwrap(), 0.0);
        assert_eq!(energy_score(&[[1.0], [1.0]], &[0.0]).unwrap(), 1.0);
        assert_eq!(energy_score(&[[3.0, 4.0], [3.0, 4.0]], &[3.0, 4.0]).unwrap(), 0.0);
        // Three 1-D points {0, 1, 3} at 0: (0 + 1 + 3)/3 − 2(1 + 3 + 2)/12.
        let v = energy_score(&[[0.0], [1.0], [3.0]], &[0.0]).unwrap();
        assert!((v - (4.0 / 3.0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn energy_score_rejects_bad_input() {
        assert!(matches!(energy_score(&[[0.0]], &[0.0]), Err(Error::TooFewSamples { .. })));
        assert!(matches!(
            energy_score(&[vec![0.0], vec![1.0, 2.0]], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn functional_energy_score_hand_value() {
        let grid = HGrid::new(0.1, 4).unwrap();
        let curves = [constant(1.0, grid), constant(1.2, grid)];
        let v = functional_energy_score(&curves, &constant(1.1, grid)).unwrap();
        assert!(v.abs() < 1e-15);
        let other = HGrid::new(0.2, 4).unwrap();
        assert!(functional_energy_score(&curves, &constant(1.1, other)).is_err());
    }

    #[test]
    fn interval_score_hand_values() {
        assert_eq!(interval_score(0.0, 1.0, 0.05, 0.5).unwrap(), 1.0);
        assert!((interval_score(0.0, 1.0, 0.05, 1.2).unwrap() - 9.0).abs() < 1e-12);
        assert_eq!(interval_score(0.0, 1.0, 0.05, 1.0).unwrap(), 1.0);
        assert!(interval_score(1.0, 0.0, 0.05, 0.5).is_err());
    }

    #[test]
    fn integrated_interval_score_hand_values() {
        let grid = HGrid::default();
        let v = integrated_interval_score(&constant(1.4, grid), &constant(1.6, grid), 0.05, &constant(1.5, grid))
            .unwrap();
        assert!((v - 8.5).abs() < 1e-12, "{v}");
        let t = constant(1.3, grid);
        assert_eq!(integrated_interval_score(&t, &t, 0.05, &t).unwrap(), 0.0);
        let fine = HGrid::new(0.05, 850).unwrap();
        let w = integrated_interval_score(&constant(1.4, fine), &constant(1.6, fine), 0.05, &constant(1.5, fine))
            .unwrap();
        assert!((w - v).abs() < 1e-12);
    }

    #[test]
    fn mse_theta_hand_values() {
        let grid = HGrid::default();
        let p = ParameterVector::brown_resnick(2.0, 1.0).unwrap();
        assert_eq!(mse_theta_params(&p, &p, grid).unwrap(), 0.0);
        let base = constant(1.5, grid);
        let shifted = constant(1.6, grid);
        assert!((curve_sq_distance(&base, &shifted).unwrap() - 0.425).abs() < 1e-12);
    }

    #[test]
    fn log_score_independence_factorizes() {
        let grid = GridSpec::square(4);
        let p = ParameterVector::brown_resnick(1e-9, 2.0).unwrap();
        let field = simulate(&ParameterVector::brown_resnick(1.0, 1.0).unwrap(), &grid, 4).unwrap();
        let cfg = LogScoreConfig::default();
        let score = log_score(&p, std::slice::from_ref(&field), &cfg).unwrap();
        let pairs = site_pairs(&grid.coords(), &cfg);
        let frechet = |z: f64| -2.0 * z.ln() - 1.0 / z;
        let expected: f64 = pairs
            .iter()
            .map(|&(i, j, _)| -(frechet(field.values[i]) + frechet(field.values[j])))
            .sum::<f64>()
            / pairs.len() as f64;
        assert!((score.value - expected).abs() < 1e-10 * expected.abs());
        assert_eq!(score.underflow, 0);
    }

    #[test]
    fn log_score_matches_finite_difference_density() {
        let grid = GridSpec::square(5);
        let p = ParameterVector::new(ModelFamily::SchlatherPowExp, 2.0, 1.2).unwrap();
        let field = simulate(&p, &grid, 8).unwrap();
        let cfg = LogScoreConfig { cutoff: 2.0, max_pairs: 30, seed: 1 };
        let score = log_score(&p, std::slice::from_ref(&field), &cfg).unwrap();
        let pairs = site_pairs(&grid.coords(), &cfg);
        assert_eq!(pairs.len(), 30);
        let fd: f64 = pairs
            .iter()
            .map(|&(i, j, h)| -PairModel::new(h, &p).unwrap().density_fd(field.values[i], field.values[j]).ln())
            .sum::<f64>()
            / 30.0;
        assert!((score.value - fd).abs() < 1e-3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = substream(5, 0, 0);
        let (m, d) = (5, 3);
        let x: Vec<f64> = (0..m * d).map(|_| std_normal(&mut rng)).collect();
        let y: Vec<f64> = (0..d).map(|_| std_normal(&mut rng)).collect();
        let (_, g) = energy_score_grad(&x, &y).unwrap();
        for i in 0..x.len() {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (energy_score_flat(&xp, &y).unwrap() - energy_score_flat(&xm, &y).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn interval_score_prefers_true_quantiles() {
        let mut rng = substream(11, 0, 0);
        let draws: Vec<f64> = (0..10_000).map(|_| std_normal(&mut rng)).collect();
        let q = 1.959_963_984_540_054;
        let mean_is = |l: f64, u: f64| draws.iter().map(|&x| interval_score(l, u, 0.05, x).unwrap()).sum::<f64>();
        let best = mean_is(-q, q);
        for _ in 0..20 {
            let dl = rng.random_range(0.2..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let du = rng.random_range(0.2..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            assert!(best <= mean_is(-q + dl, q + du));
        }
    }

    #[test]
    fn posterior_summaries() {
        let s = PosteriorSample::params(vec![
            ParameterVector::brown_resnick(1.0, 0.5).unwrap(),
            ParameterVector::brown_resnick(3.0, 1.5).unwrap(),
        ])
        .unwrap();
        assert_eq!(s.mean(), vec![2.0, 1.0]);
        let iv = s.interval(0.5).unwrap();
        assert_eq!(iv.lower, vec![1.5, 0.75]);
        assert_eq!(iv.upper, vec![2.5, 1.25]);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<PosteriorSample>(&json).unwrap(), s);
        assert!(PosteriorSample::params(vec![ParameterVector::brown_resnick(1.0, 0.5).unwrap()]).is_err());
    }

    proptest! {
        #[test]
        fn energy_score_is_permutation_and_rotation_invariant(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..8),
            y in (-5.0f64..5.0, -5.0f64..5.0),
            angle in 0.0f64..std::f64::consts::TAU,
            shift in 0usize..8,
        ) {
            let flat = |v: &[(f64, f64)]| v.iter().flat_map(|&(a, b)| [a, b]).collect::<Vec<_>>();
            let base = energy_score_flat(&flat(&pts), &[y.0, y.1]).unwrap();
            prop_assert!(base >= -1e-12);
            let mut rotated_pts = pts.clone();
            rotated_pts.rotate_left(shift % pts.len());
            let permuted = energy_score_flat(&flat(&rotated_pts), &[y.0, y.1]).unwrap();
            prop_assert!((base - permuted).abs() < 1e-12 * (1.0 + base));
            let (s, c) = angle.sin_cos();
            let rot = |(a, b): (f64, f64)| (c * a - s * b, s * a + c * b);
            let r: Vec<_> = pts.iter().map(|&p| rot(p)).collect();
            let ry = rot(y);
            let turned = energy_score_flat(&flat(&r), &[ry.0, ry.1]).unwrap();
            prop_assert!((base - turned).abs() < 1e-9 * (1.0 + base));
        }

        #[test]
        fn interval_score_is_at_least_width(l in -3.0f64..3.0, w in 0.0f64..3.0, x in -6.0f64..6.0, a in 0.01f64..0.99) {
            let s = interval_score(l, l + w, a, x).unwrap();
            prop_assert!(s >= w - 1e-12);
            prop_assert!(s.is_finite());
        }

        #[test]
        fn curve_distance_is_zero_only_for_equal_curves(vals in proptest::collection::vec(1.0f64..2.0, 5), i in 0usize..5, eps in 1e-6f64..0.5) {
            let grid = HGrid::new(0.1, 5).unwrap();
            let a = ThetaCurve::new(grid, vals.clone()).unwrap();
            prop_assert_eq!(curve_sq_distance(&a, &a).unwrap(), 0.0);
            let mut b = vals;
            b[i] += eps;
            prop_assert!(curve_sq_distance(&a, &ThetaCurve::new(grid, b).unwrap()).unwrap() > 0.0);
        }
    }
}
