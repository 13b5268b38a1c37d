//! Closed-form dependence structure of the supported max-stable families:
//! variograms, correlation kernels, the pairwise extremal coefficient and the
//! bivariate distribution function and density.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::special::{bessel_k, gamma, norm_cdf, norm_pdf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    /// Brown–Resnick with powered-exponential variogram `(h/λ)^ν`.
    BrownResnick,
    /// Schlather with powered-exponential correlation.
    SchlatherPowExp,
    /// Schlather with Whittle–Matérn correlation.
    SchlatherWhittleMatern,
    /// Smith (Gaussian storm) model with isotropic covariance `σ I`.
    Smith,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 4] = [
        ModelFamily::BrownResnick,
        ModelFamily::SchlatherPowExp,
        ModelFamily::SchlatherWhittleMatern,
        ModelFamily::Smith,
    ];

    pub fn is_schlather(self) -> bool {
        matches!(self, ModelFamily::SchlatherPowExp | ModelFamily::SchlatherWhittleMatern)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::BrownResnick => "brown-resnick",
            ModelFamily::SchlatherPowExp => "schlather-powexp",
            ModelFamily::SchlatherWhittleMatern => "schlather-whittle-matern",
            ModelFamily::Smith => "smith",
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "brown-resnick" | "brownresnick" | "br" => Ok(ModelFamily::BrownResnick),
            "schlather-powexp" | "powexp" => Ok(ModelFamily::SchlatherPowExp),
            "schlather-whittle-matern" | "whittle-matern" | "matern" => {
                Ok(ModelFamily::SchlatherWhittleMatern)
            }
            "smith" => Ok(ModelFamily::Smith),
            other => Err(Error::domain(format!("unknown model family '{other}'"))),
        }
    }
}

/// Parameters of a max-stable model.
///
/// For [`ModelFamily::Smith`] the `lambda` slot holds the Smith scale σ and
/// `nu` is fixed at 2; use [`ParameterVector::smith`] to build one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub lambda: f64,
    pub nu: f64,
    pub family: ModelFamily,
}

impl ParameterVector {
    pub fn new(family: ModelFamily, lambda: f64, nu: f64) -> Result<Self> {
        let p = ParameterVector { lambda, nu, family };
        p.validate()?;
        Ok(p)
    }

    pub fn brown_resnick(lambda: f64, nu: f64) -> Result<Self> {
        Self::new(ModelFamily::BrownResnick, lambda, nu)
    }

    pub fn smith(sigma: f64) -> Result<Self> {
        Self::new(ModelFamily::Smith, sigma, 2.0)
    }

    pub fn sigma(&self) -> Option<f64> {
        (self.family == ModelFamily::Smith).then_some(self.lambda)
    }

    pub fn validate(&self) -> Result<()> {
        let ParameterVector { lambda, nu, family } = *self;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::domain(format!("{family}: scale must be positive and finite, got {lambda}")));
        }
        let ok = match family {
            ModelFamily::BrownResnick | ModelFamily::SchlatherPowExp => nu > 0.0 && nu <= 2.0,
            ModelFamily::SchlatherWhittleMatern => nu > 0.0 && nu.is_finite(),
            ModelFamily::Smith => nu == 2.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("{family}: inadmissible smoothness nu = {nu}")))
        }
    }

    /// Brown–Resnick parameters with the same law (identity for Brown–Resnick,
    /// the `λ = √(2σ)`, `ν = 2` map for Smith).
    pub fn as_brown_resnick(&self) -> Option<ParameterVector> {
        match self.family {
            ModelFamily::BrownResnick => Some(*self),
            ModelFamily::Smith => smith_to_brown_resnick(self.lambda).ok(),
            _ => None,
        }
    }
}

fn expect_family(p: &ParameterVector, allowed: &[ModelFamily], op: &str) -> Result<()> {
    p.validate()?;
    if allowed.contains(&p.family) {
        Ok(())
    } else {
        Err(Error::domain(format!("{op} is not defined for {}", p.family)))
    }
}

fn check_lag(h: f64) -> Result<()> {
    if h >= 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("lag must be finite and nonnegative, got {h}")))
    }
}

/// Semivariogram `(h/λ)^ν` of the Brown–Resnick model.
pub fn variogram_powered(h: f64, p: &ParameterVector) -> Result<f64> {
    expect_family(p, &[ModelFamily::BrownResnick], "variogram_powered")?;
    check_lag(h)?;
    Ok(powered(h, p.lambda, p.nu))
}

fn powered(h: f64, lambda: f64, nu: f64) -> f64 {
    if h == 0.0 {
        0.0
    } else {
        (h / lambda).powf(nu)
    }
}

pub fn corr_powexp(h: f64, p: &ParameterVector) -> Result<f64> {
    expect_family(p, &[ModelFamily::SchlatherPowExp], "corr_powexp")?;
    check_lag(h)?;
    Ok((-powered(h, p.lambda, p.nu)).exp())
}

pub fn corr_whittle_matern(h: f64, p: &ParameterVector) -> Result<f64> {
    expect_family(p, &[ModelFamily::SchlatherWhittleMatern], "corr_whittle_matern")?;
    check_lag(h)?;
    Ok(whittle_matern(h, p.lambda, p.nu))
}

fn whittle_matern(h: f64, lambda: f64, nu: f64) -> f64 {
    let x = h / lambda;
    if x == 0.0 {
        return 1.0;
    }
    if x > 700.0 {
        return 0.0;
    }
    let log_val = (1.0 - nu) * std::f64::consts::LN_2 - gamma(nu).ln() + nu * x.ln();
    (log_val.exp() * bessel_k(nu, x)).min(1.0)
}

/// Semivariogram used by the Gaussian part of a Brown–Resnick-type model,
/// including the Smith model, where `γ(h) = h²/(2σ)`.
pub(crate) fn br_semivariogram(h: f64, p: &ParameterVector) -> f64 {
    match p.family {
        ModelFamily::BrownResnick => powered(h, p.lambda, p.nu),
        ModelFamily::Smith => h * h / (2.0 * p.lambda),
        _ => unreachable!("not a Brown-Resnick-type family"),
    }
}

/// Correlation function of a Schlather-family model.
pub(crate) fn schlather_corr(h: f64, p: &ParameterVector) -> f64 {
    match p.family {
        ModelFamily::SchlatherPowExp => (-powered(h, p.lambda, p.nu)).exp(),
        ModelFamily::SchlatherWhittleMatern => whittle_matern(h, p.lambda, p.nu),
        _ => unreachable!("not a Schlather family"),
    }
}

/// Bivariate dependence of a site pair at fixed lag, with the per-lag
/// constants precomputed so repeated evaluation (pairwise likelihood) is cheap.
#[derive(Clone, Copy, Debug)]
pub enum PairModel {
    /// Hüsler–Reiss form with `a² = 2γ(h)`.
    HuslerReiss { a: f64 },
    /// Schlather form with correlation `ρ(h)`.
    Schlather { rho: f64 },
}

const A_SMALL: f64 = 1e-8;
const A_LARGE: f64 = 1e8;

impl PairModel {
    pub fn new(h: f64, p: &ParameterVector) -> Result<Self> {
        p.validate()?;
        check_lag(h)?;
        Ok(if p.family.is_schlather() {
            PairModel::Schlather { rho: schlather_corr(h, p) }
        } else {
            PairModel::HuslerReiss { a: (2.0 * br_semivariogram(h, p)).sqrt() }
        })
    }

    /// Pairwise extremal coefficient `V(1, 1)`.
    pub fn theta(&self) -> f64 {
        match *self {
            PairModel::HuslerReiss { a } => 2.0 * norm_cdf(a / 2.0),
            PairModel::Schlather { rho } => 1.0 + (0.5 * (1.0 - rho)).max(0.0).sqrt(),
        }
    }

    /// Exponent measure `V(z1, z2)`.
    pub fn exponent(&self, z1: f64, z2: f64) -> f64 {
        match *self {
            PairModel::HuslerReiss { a } => {
                if a < A_SMALL {
                    1.0 / z1.min(z2)
                } else if a > A_LARGE {
                    1.0 / z1 + 1.0 / z2
                } else {
                    let r = (z2 / z1).ln() / a;
                    norm_cdf(0.5 * a + r) / z1 + norm_cdf(0.5 * a - r) / z2
                }
            }
            PairModel::Schlather { rho } => {
                let s = schlather_s(z1, z2, rho);
                0.5 * (1.0 / z1 + 1.0 / z2 + s / (z1 * z2))
            }
        }
    }

    pub fn cdf(&self, z1: f64, z2: f64) -> f64 {
        (-self.exponent(z1, z2)).exp()
    }

    /// `log f(z1, z2)` with `f = exp(−V)(V₁V₂ − V₁₂)`.
    pub fn log_density(&self, z1: f64, z2: f64) -> f64 {
        let v = self.exponent(z1, z2);
        let (v1v2, v12) = match *self {
            PairModel::HuslerReiss { a } => {
                if a < A_SMALL {
                    // Mass sits on the diagonal; no density off it.
                    return f64::NEG_INFINITY;
                }
                if a > A_LARGE {
                    let prod = 1.0 / (z1 * z1 * z2 * z2);
                    return -v + prod.ln();
                }
                let r = (z2 / z1).ln() / a;
                let w = 0.5 * a + r;
                let u = 0.5 * a - r;
                // With φ(w)/z1 = φ(u)/z2 the first partials reduce to
                // V₁ = −Φ(w)/z1², V₂ = −Φ(u)/z2².
                let v1 = norm_cdf(w) / (z1 * z1);
                let v2 = norm_cdf(u) / (z2 * z2);
                let v12 = -norm_pdf(w) / (a * z1 * z1 * z2);
                (v1 * v2, v12)
            }
            PairModel::Schlather { rho } => {
                let s = schlather_s(z1, z2, rho);
                if s == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let v1 = -(1.0 + (z2 - rho * z1) / s) / (2.0 * z1 * z1);
                let v2 = -(1.0 + (z1 - rho * z2) / s) / (2.0 * z2 * z2);
                let v12 = -(1.0 - rho * rho) / (2.0 * s * s * s);
                (v1 * v2, v12)
            }
        };
        -v + (v1v2 - v12).ln()
    }

    pub fn density(&self, z1: f64, z2: f64) -> f64 {
        self.log_density(z1, z2).exp()
    }

    /// Mixed central finite difference of the CDF at relative steps 4e-3,
    /// 2e-3 and 1e-3, combined by two Richardson steps. Round-off limits the
    /// absolute accuracy to about 1e-10.
    pub fn density_fd(&self, z1: f64, z2: f64) -> f64 {
        let mixed = |rel: f64| {
            let (h1, h2) = (rel * z1, rel * z2);
            (self.cdf(z1 + h1, z2 + h2) - self.cdf(z1 + h1, z2 - h2) - self.cdf(z1 - h1, z2 + h2)
                + self.cdf(z1 - h1, z2 - h2))
                / (4.0 * h1 * h2)
        };
        let (d4, d2, d1) = (mixed(4e-3), mixed(2e-3), mixed(1e-3));
        let r1 = (4.0 * d2 - d4) / 3.0;
        let r2 = (4.0 * d1 - d2) / 3.0;
        (16.0 * r2 - r1) / 15.0
    }
}

fn schlather_s(z1: f64, z2: f64, rho: f64) -> f64 {
    (z1 * z1 - 2.0 * rho * z1 * z2 + z2 * z2).max(0.0).sqrt()
}

/// Pairwise extremal coefficient θ(h) ∈ [1, 2].
pub fn theta(h: f64, p: &ParameterVector) -> Result<f64> {
    Ok(PairModel::new(h, p)?.theta())
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

/// Monte Carlo estimate of `E[max{Y(x₁), Y(x₂)}]` from the spectral process
/// of the family, sampled at two sites `h` apart.
pub fn theta_mc(h: f64, p: &ParameterVector, n_draws: usize, seed: u64) -> Result<McEstimate> {
    p.validate()?;
    check_lag(h)?;
    if n_draws < 10_000 {
        return Err(Error::domain(format!("theta_mc needs at least 10^4 draws, got {n_draws}")));
    }
    let mut rng = rng::substream(seed, domain::MONTE_CARLO, 0);
    let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
    let draw: Box<dyn FnMut(&mut rng::Rng) -> f64> = if p.family.is_schlather() {
        let rho = schlather_corr(h, p);
        let tail = (1.0 - rho * rho).max(0.0).sqrt();
        Box::new(move |r| {
            let e1 = rng::std_normal(r);
            let e2: f64 = rho * e1 + tail * rng::std_normal(r);
            sqrt_2pi * e1.max(e2).max(0.0)
        })
    } else {
        // With the process anchored at x₁, θ = E[max(1, e^X)], X ~ N(−γ, 2γ),
        // whose lognormal tail makes the plain average useless for large γ.
        // Anchoring at x₂ instead (the size-biased measure) gives
        // θ = 1 + E[max(0, 1 − e^{−X})] with X ~ N(γ, 2γ), a bounded summand.
        let g = br_semivariogram(h, p);
        let sd = (2.0 * g).sqrt();
        Box::new(move |r| {
            let x = g + sd * rng::std_normal(r);
            1.0 + (1.0 - (-x).exp()).max(0.0)
        })
    };
    let mut draw = draw;
    let values: Vec<f64> = (0..n_draws).map(|_| draw(&mut rng)).collect();
    let mean = crate::stats::mean(&values);
    let se = crate::stats::std_dev(&values) / (n_draws as f64).sqrt();
    Ok(McEstimate { mean, se })
}

fn check_levels(z1: f64, z2: f64) -> Result<()> {
    if z1 > 0.0 && z2 > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("bivariate levels must be positive, got ({z1}, {z2})")))
    }
}

/// `P(Z(x₁) ≤ z1, Z(x₂) ≤ z2)` for sites at distance `h`.
pub fn bivariate_cdf(z1: f64, z2: f64, h: f64, p: &ParameterVector) -> Result<f64> {
    check_levels(z1, z2)?;
    Ok(PairModel::new(h, p)?.cdf(z1, z2))
}

/// Bivariate density from the analytic partial derivatives of `V`.
pub fn bivariate_density(z1: f64, z2: f64, h: f64, p: &ParameterVector) -> Result<f64> {
    check_levels(z1, z2)?;
    Ok(PairModel::new(h, p)?.density(z1, z2))
}

/// Finite-difference density of [`bivariate_cdf`]; an independent oracle.
pub fn bivariate_density_fd(z1: f64, z2: f64, h: f64, p: &ParameterVector) -> Result<f64> {
    check_levels(z1, z2)?;
    Ok(PairModel::new(h, p)?.density_fd(z1, z2))
}

/// Analytic density, cross-checked against the finite-difference oracle.
/// Densities below this are compared in absolute terms: the finite
/// difference of the CDF cannot resolve them to 1e-4 relative accuracy.
pub const FD_DENSITY_FLOOR: f64 = 1e-6;

pub fn bivariate_density_checked(z1: f64, z2: f64, h: f64, p: &ParameterVector) -> Result<f64> {
    check_levels(z1, z2)?;
    let model = PairModel::new(h, p)?;
    let analytic = model.density(z1, z2);
    let numeric = model.density_fd(z1, z2);
    let scale = analytic.abs().max(numeric.abs()).max(FD_DENSITY_FLOOR);
    if (analytic - numeric).abs() > 1e-4 * scale {
        return Err(Error::Evaluation(format!(
            "density mismatch at (z1={z1}, z2={z2}, h={h}): analytic {analytic:e}, numeric {numeric:e}"
        )));
    }
    Ok(analytic)
}

/// The Smith model with covariance `σ I` as a Brown–Resnick model.
pub fn smith_to_brown_resnick(sigma: f64) -> Result<ParameterVector> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("Smith scale must be positive, got {sigma}")));
    }
    ParameterVector::brown_resnick((2.0 * sigma).sqrt(), 2.0)
}

/// Equispaced lags `h_i = i·dh`, i = 1..=k.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HGrid {
    pub dh: f64,
    pub k: usize,
}

impl Default for HGrid {
    fn default() -> Self {
        HGrid { dh: 0.1, k: 425 }
    }
}

impl HGrid {
    pub fn new(dh: f64, k: usize) -> Result<Self> {
        if !(dh > 0.0) || k == 0 {
            return Err(Error::domain(format!("invalid h-grid (dh={dh}, k={k})")));
        }
        Ok(HGrid { dh, k })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn point(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.dh
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.k).map(|i| self.point(i)).collect()
    }

    pub fn max_lag(&self) -> f64 {
        self.point(self.k - 1)
    }
}

/// θ(h) sampled on an [`HGrid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaCurve {
    pub grid: HGrid,
    pub values: Vec<f64>,
}

impl ThetaCurve {
    pub fn new(grid: HGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), found: values.len() });
        }
        Ok(ThetaCurve { grid, values })
    }

    pub fn from_params(p: &ParameterVector, grid: HGrid) -> Result<Self> {
        let values = theta_values(p, &grid)?;
        Ok(ThetaCurve { grid, values })
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }
}

/// θ evaluated at every point of the grid.
pub fn theta_values(p: &ParameterVector, grid: &HGrid) -> Result<Vec<f64>> {
    p.validate()?;
    (0..grid.len()).map(|i| theta(grid.point(i), p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(f: ModelFamily, l: f64, n: f64) -> ParameterVector {
        ParameterVector::new(f, l, n).unwrap()
    }

    #[test]
    fn variogram_hand_values() {
        let p = pv(ModelFamily::BrownResnick, 1.5, 1.0);
        assert_eq!(variogram_powered(0.0, &p).unwrap(), 0.0);
        for nu in [0.3, 1.0, 1.9] {
            let p = pv(ModelFamily::BrownResnick, 2.7, nu);
            assert!((variogram_powered(2.7, &p).unwrap() - 1.0).abs() < 1e-15);
        }
        let p = pv(ModelFamily::BrownResnick, 1.0, 2.0);
        assert_eq!(variogram_powered(2.0, &p).unwrap(), 4.0);
        assert!(ParameterVector::brown_resnick(0.0, 1.0).is_err());
        assert!(ParameterVector::brown_resnick(1.0, 2.1).is_err());
        assert!(variogram_powered(1.0, &pv(ModelFamily::SchlatherPowExp, 1.0, 1.0)).is_err());
    }

    #[test]
    fn powexp_hand_values() {
        let p = pv(ModelFamily::SchlatherPowExp, 2.0, 0.7);
        assert_eq!(corr_powexp(0.0, &p).unwrap(), 1.0);
        assert!((corr_powexp(2.0, &p).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert!(corr_powexp(1e4, &p).unwrap() < 1e-100);
    }

    #[test]
    fn whittle_matern_half_is_exponential() {
        for &lambda in &[0.5, 1.0, 3.3] {
            let p = pv(ModelFamily::SchlatherWhittleMatern, lambda, 0.5);
            let q = pv(ModelFamily::SchlatherPowExp, lambda, 1.0);
            for i in 1..=425 {
                let h = i as f64 * 0.1;
                let a = corr_whittle_matern(h, &p).unwrap();
                assert!((a - (-h / lambda).exp()).abs() < 1e-10);
                assert!((a - corr_powexp(h, &q).unwrap()).abs() < 1e-10);
            }
            assert_eq!(corr_whittle_matern(0.0, &p).unwrap(), 1.0);
        }
        let p = pv(ModelFamily::SchlatherWhittleMatern, 1.0, 1.0);
        let expected = 1.0 * 0.601_907_230_197_234_6; // (h/λ) K_1(h/λ) at h = λ = 1
        assert!((corr_whittle_matern(1.0, &p).unwrap() - expected).abs() < 1e-13);
        assert!(ParameterVector::new(ModelFamily::SchlatherWhittleMatern, 1.0, 0.0).is_err());
    }

    #[test]
    fn theta_limits() {
        for f in ModelFamily::ALL {
            let p = if f == ModelFamily::Smith { ParameterVector::smith(1.3).unwrap() } else { pv(f, 1.3, 1.1) };
            assert!((theta(0.0, &p).unwrap() - 1.0).abs() < 1e-15);
        }
        let p = pv(ModelFamily::BrownResnick, 0.5, 2.0);
        assert!((theta(1e3, &p).unwrap() - 2.0).abs() < 1e-12);
        // Schlather never reaches independence.
        let p = pv(ModelFamily::SchlatherPowExp, 0.5, 2.0);
        assert!((theta(1e3, &p).unwrap() - (1.0 + 0.5f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn theta_in_range_and_monotone() {
        let grid = HGrid::default();
        for f in ModelFamily::ALL {
            for &(l, n) in &[(0.5, 0.3), (2.25, 0.69), (5.0, 1.8), (0.1, 2.0), (40.0, 0.05)] {
                let p = match f {
                    ModelFamily::Smith => ParameterVector::smith(l).unwrap(),
                    _ => pv(f, l, n),
                };
                let c = ThetaCurve::from_params(&p, grid).unwrap();
                assert!(c.values.iter().all(|&t| (1.0..=2.0).contains(&t)));
                assert!(c.is_nondecreasing(), "{p:?}");
            }
        }
    }

    #[test]
    fn theta_mc_oracles() {
        let p = pv(ModelFamily::BrownResnick, 1.5, 1.0);
        let mc = theta_mc(0.0, &p, 10_000, 1).unwrap();
        assert!((mc.mean - 1.0).abs() < 1e-12);
        let mc = theta_mc(3.0, &p, 100_000, 2).unwrap();
        let closed = 2.0 * norm_cdf((2.0 * 2.0f64).sqrt() / 2.0);
        assert!((mc.mean - closed).abs() < 3.0 * mc.se, "{mc:?} vs {closed}");
        // ρ ≈ 0: θ = 1 + √(1/2)
        let p = pv(ModelFamily::SchlatherPowExp, 0.1, 1.0);
        let mc = theta_mc(20.0, &p, 100_000, 3).unwrap();
        assert!((mc.mean - 1.707_106_781).abs() < 3.0 * mc.se, "{mc:?}");
        let p = pv(ModelFamily::SchlatherPowExp, 2.25, 0.69);
        let mc = theta_mc(3.0, &p, 100_000, 4).unwrap();
        assert!((mc.mean - theta(3.0, &p).unwrap()).abs() < 3.0 * mc.se);
        assert!(theta_mc(1.0, &p, 10, 4).is_err());
    }

    #[test]
    fn cdf_limits() {
        let p = pv(ModelFamily::BrownResnick, 1.5, 1.0);
        for &(z1, z2, h) in &[(0.7, 0.7, 1.0), (2.0, 2.0, 3.0), (1.0, 1.0, 0.2)] {
            let f = bivariate_cdf(z1, z2, h, &p).unwrap();
            assert!((f - (-theta(h, &p).unwrap() / z1).exp()).abs() < 1e-14);
        }
        let f = bivariate_cdf(0.5, 2.0, 0.0, &p).unwrap();
        assert!((f - (-1.0f64 / 0.5).exp()).abs() < 1e-15);
        let f = bivariate_cdf(0.5, 2.0, 1e12, &p).unwrap();
        assert!((f - (-1.0 / 0.5 - 1.0 / 2.0f64).exp()).abs() < 1e-15);
        let s = pv(ModelFamily::SchlatherPowExp, 1.0, 1.0);
        let f = bivariate_cdf(1.3, 1.3, 2.0, &s).unwrap();
        assert!((f - (-theta(2.0, &s).unwrap() / 1.3).exp()).abs() < 1e-14);
        assert!(bivariate_cdf(0.0, 1.0, 1.0, &p).is_err());
    }

    #[test]
    fn density_independence_limit_factorizes() {
        let p = pv(ModelFamily::BrownResnick, 0.1, 2.0);
        for &(z1, z2) in &[(0.5, 1.0), (2.0, 3.0)] {
            let f = bivariate_density(z1, z2, 1e6, &p).unwrap();
            let frechet = |z: f64| (-1.0 / z).exp() / (z * z);
            assert!((f - frechet(z1) * frechet(z2)).abs() < 1e-14);
        }
    }

    #[test]
    fn density_matches_fd_spot_checks() {
        let cases = [
            pv(ModelFamily::BrownResnick, 1.5, 1.0),
            pv(ModelFamily::SchlatherPowExp, 2.0, 0.8),
            pv(ModelFamily::SchlatherWhittleMatern, 1.2, 1.5),
            ParameterVector::smith(1.7).unwrap(),
        ];
        for p in cases {
            for &(z1, z2, h) in &[(0.8, 1.9, 1.0), (3.0, 0.4, 2.5), (1.1, 1.2, 0.3)] {
                bivariate_density_checked(z1, z2, h, &p).unwrap();
            }
        }
    }

    #[test]
    fn density_integrates_to_one() {
        // Substituting z = 1/u² ... use t = exp(-1/z) ∈ (0,1): dz = z² dt / t.
        for p in [pv(ModelFamily::BrownResnick, 1.5, 1.0), pv(ModelFamily::SchlatherPowExp, 2.0, 0.8)] {
            let model = PairModel::new(1.5, &p).unwrap();
            let n = 800;
            let mut total = 0.0;
            for i in 0..n {
                let t1 = (i as f64 + 0.5) / n as f64;
                let z1 = -1.0 / t1.ln();
                for j in 0..n {
                    let t2 = (j as f64 + 0.5) / n as f64;
                    let z2 = -1.0 / t2.ln();
                    total += model.density(z1, z2) * z1 * z1 / t1 * z2 * z2 / t2;
                }
            }
            total /= (n * n) as f64;
            assert!((total - 1.0).abs() < 1e-3, "{p:?}: {total}");
        }
    }

    #[test]
    fn smith_mapping() {
        for (sigma, lambda) in [(0.5, 1.0), (2.0, 2.0), (4.5, 3.0)] {
            let p = smith_to_brown_resnick(sigma).unwrap();
            assert_eq!(p.family, ModelFamily::BrownResnick);
            assert!((p.lambda - lambda).abs() < 1e-15);
            assert_eq!(p.nu, 2.0);
            let s = ParameterVector::smith(sigma).unwrap();
            for h in [0.3, 1.0, 4.0] {
                assert!((theta(h, &s).unwrap() - theta(h, &p).unwrap()).abs() < 1e-14);
            }
        }
        assert!(smith_to_brown_resnick(0.0).is_err());
    }
}
