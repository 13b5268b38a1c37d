//! GEV response surfaces over gridded block maxima and the transforms to
//! and from unit Fréchet margins.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, read_f64s, write_f64s, Manifest, COORDS_FILE, FIELDS_FILE, MANIFEST_FILE, PARAMS_FILE};
use crate::error::{Error, Result};
use crate::optim::Bfgs;
use crate::simulate::{FieldSample, GridSpec, PriorBox, SimulationMethod};
use crate::spatial::{ModelFamily, ParameterVector};

/// Physical length of one simulation grid unit.
pub const DEFAULT_KM_PER_UNIT: f64 = 3.4;
/// Shape parameters closer to zero than this use the Gumbel limit.
pub const GUMBEL_EPS: f64 = 1e-8;
/// Optional per-year labels stored next to a dataset directory's fields.
pub const YEARS_FILE: &str = "years.bin";

/// Block maxima on a regular grid, one field per year.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GriddedSeries {
    /// Grid in simulation units, one unit per cell.
    pub grid: GridSpec,
    /// Geographic latitude and longitude of every site, in site order.
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
    pub years: Vec<f64>,
    /// Year-major: `values[t * n_sites + site]`.
    pub values: Vec<f64>,
    pub km_per_unit: f64,
}

impl GriddedSeries {
    pub fn n_sites(&self) -> usize {
        self.grid.n_sites()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let k = self.n_sites();
        if self.lat.len() != k || self.lon.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: self.lat.len().min(self.lon.len()) });
        }
        if self.values.len() != k * self.years.len() {
            return Err(Error::DimensionMismatch { expected: k * self.years.len(), found: self.values.len() });
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite value in year {} at site {}",
                self.years[i / k],
                i % k
            )));
        }
        Ok(())
    }

    pub fn year(&self, t: usize) -> &[f64] {
        let k = self.n_sites();
        &self.values[t * k..(t + 1) * k]
    }

    /// Yearly fields as samples, for dependence estimators.
    pub fn fields(&self) -> Vec<FieldSample> {
        let placeholder = ParameterVector::brown_resnick(1.0, 1.0).expect("admissible");
        (0..self.years.len())
            .map(|t| FieldSample {
                grid: self.grid,
                values: self.year(t).to_vec(),
                params: placeholder,
                seed: 0,
                index: t as u64,
            })
            .collect()
    }

    /// Keeps the years in `[first, last]`.
    pub fn select_years(&self, first: f64, last: f64) -> Result<GriddedSeries> {
        let keep: Vec<usize> = (0..self.years.len()).filter(|&t| self.years[t] >= first && self.years[t] <= last).collect();
        if keep.is_empty() {
            return Err(Error::domain(format!("no years in [{first}, {last}]")));
        }
        Ok(GriddedSeries {
            years: keep.iter().map(|&t| self.years[t]).collect(),
            values: keep.iter().flat_map(|&t| self.year(t).to_vec()).collect(),
            ..self.clone()
        })
    }
}

/// Fitted surface `μ = β₀ + β₁·lat + β₂·lon + β₃·year`, constant σ and γ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GevSurface {
    pub beta_mu: [f64; 4],
    pub beta_sigma: f64,
    pub beta_gamma: f64,
    /// Standard errors from the observed information, absent when the
    /// Hessian is not positive definite.
    pub se_mu: [Option<f64>; 4],
    pub se_sigma: Option<f64>,
    pub se_gamma: Option<f64>,
    pub loglik: f64,
    pub start_loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Gradient norm of the mean log-likelihood on the standardized scale.
    pub grad_norm: f64,
    /// Shape outside `(−0.5, 0.5)`.
    pub shape_flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
}

impl GevSurface {
    /// Location at site coordinates and year.
    pub fn mu(&self, lat: f64, lon: f64, year: f64) -> f64 {
        let b = self.beta_mu;
        b[0] + b[1] * lat + b[2] * lon + b[3] * year
    }

    /// Coefficients in the order `β0_mu, β1_mu, β2_mu, β3_mu, β0_sigma, β0_gamma`.
    pub fn coefficients(&self) -> Vec<Coefficient> {
        let names = ["beta0_mu", "beta1_mu", "beta2_mu", "beta3_mu", "beta0_sigma", "beta0_gamma"];
        let est = [self.beta_mu[0], self.beta_mu[1], self.beta_mu[2], self.beta_mu[3], self.beta_sigma, self.beta_gamma];
        let se = [self.se_mu[0], self.se_mu[1], self.se_mu[2], self.se_mu[3], self.se_sigma, self.se_gamma];
        names
            .iter()
            .zip(est)
            .zip(se)
            .map(|((n, estimate), se)| Coefficient { name: n.to_string(), estimate, se })
            .collect()
    }
}

/// GEV log density of `z` with location `mu`, scale `sigma` and shape `gamma`.
pub fn gev_log_density(z: f64, mu: f64, sigma: f64, gamma: f64) -> f64 {
    if !(sigma > 0.0) {
        return f64::NEG_INFINITY;
    }
    let y = (z - mu) / sigma;
    if gamma.abs() < GUMBEL_EPS {
        return -sigma.ln() - y - (-y).exp();
    }
    let t = 1.0 + gamma * y;
    if !(t > 0.0) {
        return f64::NEG_INFINITY;
    }
    let l = t.ln();
    -sigma.ln() - (1.0 + 1.0 / gamma) * l - (-l / gamma).exp()
}

/// Covariate columns centred and scaled to unit standard deviation.
#[derive(Clone, Debug)]
struct Design {
    /// Standardized `(lat, lon, year)` per observation, year-major.
    x: Vec<[f64; 3]>,
    mean: [f64; 3],
    scale: [f64; 3],
}

impl Design {
    fn new(data: &GriddedSeries) -> Result<Self> {
        let k = data.n_sites();
        let raw: Vec<[f64; 3]> =
            (0..data.years.len()).flat_map(|t| (0..k).map(move |s| [data.lat[s], data.lon[s], data.years[t]])).collect();
        let n = raw.len() as f64;
        let mut mean = [0.0; 3];
        let mut scale = [0.0; 3];
        for c in 0..3 {
            mean[c] = raw.iter().map(|r| r[c]).sum::<f64>() / n;
            scale[c] = (raw.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt();
            if !(scale[c] > 1e-12 * mean[c].abs().max(1.0)) {
                let name = ["latitude", "longitude", "year"][c];
                return Err(Error::domain(format!("{name} is constant; its slope is not identifiable")));
            }
        }
        let x = raw.iter().map(|r| std::array::from_fn(|c| (r[c] - mean[c]) / scale[c])).collect();
        Ok(Design { x, mean, scale })
    }
}

/// Negative mean log-likelihood and gradient in `(a0, a1, a2, a3, log σ, γ)`
/// on the standardized covariates.
fn neg_loglik(theta: &[f64], z: &[f64], design: &Design) -> (f64, Vec<f64>) {
    let sigma = theta[4].exp();
    let gamma = theta[5];
    let n = z.len() as f64;
    let per: Vec<(f64, [f64; 6])> = z
        .par_iter()
        .zip(design.x.par_iter())
        .map(|(&zi, x)| {
            let mu = theta[0] + theta[1] * x[0] + theta[2] * x[1] + theta[3] * x[2];
            let y = (zi - mu) / sigma;
            let (l, dl_dy, dl_dg) = if gamma.abs() < GUMBEL_EPS {
                let e = (-y).exp();
                (-y - e, -1.0 + e, -(y - 0.5 * y * y) - 0.5 * e * y * y)
            } else {
                let t = 1.0 + gamma * y;
                if !(t > 0.0) {
                    return (f64::NEG_INFINITY, [0.0; 6]);
                }
                let lt = t.ln();
                let p = (-lt / gamma).exp();
                let l = -(1.0 + 1.0 / gamma) * lt - p;
                let dl_dy = -(1.0 + gamma) / t + p / t;
                let dl_dg = lt / (gamma * gamma) - (1.0 + 1.0 / gamma) * y / t - p * (lt / (gamma * gamma) - y / (gamma * t));
                (l, dl_dy, dl_dg)
            };
            let dmu = -dl_dy / sigma;
            (
                l - theta[4],
                [dmu, dmu * x[0], dmu * x[1], dmu * x[2], -1.0 - y * dl_dy, dl_dg],
            )
        })
        .collect();
    let ll: Vec<f64> = per.iter().map(|p| p.0).collect();
    let total = crate::stats::pairwise_sum(&ll);
    if !total.is_finite() {
        return (f64::INFINITY, vec![0.0; 6]);
    }
    let grad = (0..6)
        .map(|j| {
            let col: Vec<f64> = per.iter().map(|p| p.1[j]).collect();
            -crate::stats::pairwise_sum(&col) / n
        })
        .collect();
    (-total / n, grad)
}

/// Ordinary least squares for the location, with Gumbel moment matching
/// for the scale and a zero shape.
fn moment_start(z: &[f64], design: &Design) -> Vec<f64> {
    let n = z.len();
    let x = DMatrix::from_fn(n, 4, |i, j| if j == 0 { 1.0 } else { design.x[i][j - 1] });
    let y = DVector::from_column_slice(z);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let a = xtx.cholesky().map(|c| c.solve(&xty)).unwrap_or_else(|| DVector::from_element(4, 0.0));
    let resid = &y - &x * &a;
    let sd = (resid.norm_squared() / n as f64).sqrt().max(1e-6);
    let sigma = sd * 6f64.sqrt() / std::f64::consts::PI;
    vec![a[0] - 0.5772156649015329 * sigma, a[1], a[2], a[3], sigma.ln(), 0.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GevConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub min_years: usize,
}

impl Default for GevConfig {
    fn default() -> Self {
        GevConfig { max_iter: 1000, grad_tol: 1e-10, min_years: 20 }
    }
}

/// Maximizes the independence log-likelihood of the surface by BFGS from
/// moment-based starts.
pub fn fit_gev_surface(data: &GriddedSeries, cfg: &GevConfig) -> Result<GevSurface> {
    data.validate()?;
    if data.years.len() < cfg.min_years {
        return Err(Error::TooFewSamples { required: cfg.min_years, found: data.years.len() });
    }
    let design = Design::new(data)?;
    let z = &data.values;
    let n = z.len() as f64;
    let start = moment_start(z, &design);
    let start_loglik = -neg_loglik(&start, z, &design).0 * n;
    if !start_loglik.is_finite() {
        return Err(Error::Optimizer("moment-based start has zero likelihood".into()));
    }
    let bfgs = Bfgs { max_iter: cfg.max_iter, grad_tol: cfg.grad_tol };
    let min = bfgs.minimize(|t| neg_loglik(t, z, &design), &start);
    let a = &min.x;

    // Observed information by central differences of the analytic gradient.
    let mut hess = DMatrix::zeros(6, 6);
    for j in 0..6 {
        let h = 1e-5 * a[j].abs().max(1.0);
        let mut up = a.clone();
        let mut dn = a.clone();
        up[j] += h;
        dn[j] -= h;
        let (gu, gd) = (neg_loglik(&up, z, &design).1, neg_loglik(&dn, z, &design).1);
        for i in 0..6 {
            hess[(i, j)] = (gu[i] - gd[i]) / (2.0 * h) * n;
        }
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    let sigma = a[4].exp();
    // Jacobian of the natural coefficients with respect to the optimizer's.
    let mut jac = DMatrix::zeros(6, 6);
    jac[(0, 0)] = 1.0;
    for c in 0..3 {
        jac[(0, c + 1)] = -design.mean[c] / design.scale[c];
        jac[(c + 1, c + 1)] = 1.0 / design.scale[c];
    }
    jac[(4, 4)] = sigma;
    jac[(5, 5)] = 1.0;
    let se: Vec<Option<f64>> = match hess.cholesky() {
        Some(ch) => {
            let cov = &jac * ch.inverse() * jac.transpose();
            (0..6).map(|i| Some(cov[(i, i)].max(0.0).sqrt())).collect()
        }
        None => vec![None; 6],
    };
    let mut beta_mu = [a[0], 0.0, 0.0, 0.0];
    for c in 0..3 {
        beta_mu[c + 1] = a[c + 1] / design.scale[c];
        beta_mu[0] -= a[c + 1] * design.mean[c] / design.scale[c];
    }
    Ok(GevSurface {
        beta_mu,
        beta_sigma: sigma,
        beta_gamma: a[5],
        se_mu: [se[0], se[1], se[2], se[3]],
        se_sigma: se[4],
        se_gamma: se[5],
        loglik: -min.value * n,
        start_loglik,
        iterations: min.iterations,
        converged: min.converged,
        grad_norm: min.grad_norm.unwrap_or(f64::NAN),
        shape_flag: !(a[5] > -0.5 && a[5] < 0.5),
    })
}

/// Maps GEV data to unit Fréchet margins under the fitted surface.
pub fn to_unit_frechet(data: &GriddedSeries, surface: &GevSurface) -> Result<GriddedSeries> {
    data.validate()?;
    let (sigma, gamma) = (surface.beta_sigma, surface.beta_gamma);
    if !(sigma > 0.0) {
        return Err(Error::domain(format!("GEV scale must be positive, got {sigma}")));
    }
    let k = data.n_sites();
    let mut values = Vec::with_capacity(data.values.len());
    let mut bad = Vec::new();
    for (i, &z) in data.values.iter().enumerate() {
        let (t, s) = (i / k, i % k);
        let y = (z - surface.mu(data.lat[s], data.lon[s], data.years[t])) / sigma;
        let u = if gamma.abs() < GUMBEL_EPS {
            y.exp()
        } else {
            let base = 1.0 + gamma * y;
            if !(base > 0.0) {
                bad.push((t, s / data.grid.ny, s % data.grid.ny));
                f64::NAN
            } else {
                base.powf(1.0 / gamma)
            }
        };
        values.push(u);
    }
    if !bad.is_empty() {
        return Err(Error::Support { cells: bad });
    }
    Ok(GriddedSeries { values, ..data.clone() })
}

/// Inverse of [`to_unit_frechet`].
pub fn from_unit_frechet(data: &GriddedSeries, surface: &GevSurface) -> Result<GriddedSeries> {
    data.validate()?;
    let (sigma, gamma) = (surface.beta_sigma, surface.beta_gamma);
    if !(sigma > 0.0) {
        return Err(Error::domain(format!("GEV scale must be positive, got {sigma}")));
    }
    let k = data.n_sites();
    let values = data
        .values
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            if !(u > 0.0) {
                return Err(Error::domain(format!("Fréchet value {u} at position {i} is not positive")));
            }
            let (t, s) = (i / k, i % k);
            let y = if gamma.abs() < GUMBEL_EPS { u.ln() } else { (u.powf(gamma) - 1.0) / gamma };
            Ok(surface.mu(data.lat[s], data.lon[s], data.years[t]) + sigma * y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GriddedSeries { values, ..data.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridFormat {
    Csv,
    DatasetDir,
}

impl std::str::FromStr for GridFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(GridFormat::Csv),
            "dataset-dir" | "dir" => Ok(GridFormat::DatasetDir),
            other => Err(Error::domain(format!("unknown grid format '{other}'"))),
        }
    }
}

/// Reads gridded block maxima from a `year,lat,lon,value` CSV or a dataset
/// directory, whose optional `coords.bin` defaults to cell centres. Sites become a unit-spaced grid with
/// longitude along x and latitude along y.
pub fn ingest_grid(path: &Path, format: GridFormat, km_per_unit: f64) -> Result<GriddedSeries> {
    let series = match format {
        GridFormat::Csv => ingest_csv(path, km_per_unit)?,
        GridFormat::DatasetDir => ingest_dir(path, km_per_unit)?,
    };
    series.validate()?;
    Ok(series)
}

fn sorted_unique(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn ingest_csv(path: &Path, km_per_unit: f64) -> Result<GriddedSeries> {
    #[derive(Deserialize)]
    struct Row {
        year: f64,
        lat: f64,
        lon: f64,
        value: f64,
    }
    let mut rows = Vec::new();
    for (line, row) in csv::Reader::from_path(path)?.deserialize::<Row>().enumerate() {
        // Header is line 1.
        let row = row.map_err(|e| Error::format(path, format!("line {}: {e}", line + 2)))?;
        if ![row.year, row.lat, row.lon, row.value].iter().all(|v| v.is_finite()) {
            return Err(Error::format(path, format!("line {}: non-finite field", line + 2)));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format(path, "no data rows"));
    }
    let years = sorted_unique(rows.iter().map(|r| r.year));
    let lats = sorted_unique(rows.iter().map(|r| r.lat));
    let lons = sorted_unique(rows.iter().map(|r| r.lon));
    let (nx, ny) = (lons.len(), lats.len());
    let grid = GridSpec { nx, ny, extent: [0.0, nx as f64, 0.0, ny as f64] };
    let k = nx * ny;
    let pos = |v: &[f64], x: f64| v.binary_search_by(|p| p.total_cmp(&x)).expect("collected value");
    let mut values = vec![f64::NAN; years.len() * k];
    for (line, r) in rows.iter().enumerate() {
        let (t, ix, iy) = (pos(&years, r.year), pos(&lons, r.lon), pos(&lats, r.lat));
        let slot = &mut values[t * k + grid.index(ix, iy)];
        if !slot.is_nan() {
            return Err(Error::format(
                path,
                format!("line {}: duplicate cell year {} lat {} lon {}", line + 2, r.year, r.lat, r.lon),
            ));
        }
        *slot = r.value;
    }
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        let (t, s) = (i / k, i % k);
        let missing = values.iter().filter(|v| v.is_nan()).count();
        return Err(Error::format(
            path,
            format!(
                "{missing} missing cell(s), first at year {} lat {} lon {}",
                years[t],
                lats[s % ny],
                lons[s / ny]
            ),
        ));
    }
    let lat = (0..k).map(|s| lats[s % ny]).collect();
    let lon = (0..k).map(|s| lons[s / ny]).collect();
    Ok(GriddedSeries { grid, lat, lon, years, values, km_per_unit })
}

fn ingest_dir(dir: &Path, km_per_unit: f64) -> Result<GriddedSeries> {
    let manifest = dataset::read_manifest(dir)?;
    let k = manifest.grid.n_sites();
    let n = manifest.count;
    let values = read_f64s(&dir.join(FIELDS_FILE), n * k)?;
    let coords_path = dir.join(COORDS_FILE);
    let coords = if coords_path.exists() {
        read_f64s(&coords_path, 2 * k)?
    } else {
        // Simulated datasets carry no geography; use cell centres.
        manifest.grid.coords().iter().flat_map(|[x, y]| [*y, *x]).collect()
    };
    let years_path = dir.join(YEARS_FILE);
    let years = if years_path.exists() { read_f64s(&years_path, n)? } else { (0..n).map(|t| t as f64).collect() };
    Ok(GriddedSeries {
        grid: manifest.grid,
        lat: coords.iter().step_by(2).copied().collect(),
        lon: coords.iter().skip(1).step_by(2).copied().collect(),
        years,
        values,
        km_per_unit,
    })
}

/// Writes a series in the dataset-directory layout: manifest, placeholder
/// parameter rows, fields, `coords.bin` as `(lat, lon)` pairs and `years.bin`.
pub fn write_series_dir(dir: &Path, series: &GriddedSeries) -> Result<()> {
    series.validate()?;
    fs::create_dir_all(dir)?;
    let n = series.years.len();
    let manifest = Manifest::new(
        series.grid,
        ModelFamily::BrownResnick,
        PriorBox::default(),
        0,
        n,
        SimulationMethod::Exact,
    );
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    let write = |name: &str, values: &[f64]| -> Result<()> {
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        write_f64s(&mut w, values)?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    };
    write(PARAMS_FILE, &vec![1.0; 2 * n])?;
    write(FIELDS_FILE, &series.values)?;
    let coords: Vec<f64> = series.lat.iter().zip(&series.lon).flat_map(|(a, b)| [*a, *b]).collect();
    write(COORDS_FILE, &coords)?;
    write(YEARS_FILE, &series.years)?;
    Ok(())
}

/// Per-coefficient summary of repeated fits, keyed by coefficient name.
pub fn coverage_within(fits: &[(GevSurface, [f64; 6])], n_se: f64) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (j, name) in ["beta0_mu", "beta1_mu", "beta2_mu", "beta3_mu", "beta0_sigma", "beta0_gamma"].iter().enumerate() {
        let hits = fits
            .iter()
            .filter(|(s, truth)| {
                let c = &s.coefficients()[j];
                c.se.is_some_and(|se| (c.estimate - truth[j]).abs() <= n_se * se)
            })
            .count();
        out.insert(name.to_string(), hits as f64 / fits.len().max(1) as f64);
    }
    out
}
