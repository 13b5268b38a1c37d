//! Simulation of max-stable fields with unit Fréchet margins.
//!
//! Schlather fields are simulated exactly with the bounded-spectral stopping
//! rule (`Y ≤ √(2π)`). Brown–Resnick and Smith fields are simulated exactly
//! with extremal functions (one Gaussian draw per extremal function, `k`
//! draws in expectation); a finite-maximum approximation over a fixed number
//! of spectral replicates is available as a fallback.

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain, Rng};
use crate::spatial::{br_semivariogram, schlather_corr, ModelFamily, ParameterVector};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Largest number of sites for which dense Cholesky is attempted.
pub const MAX_SITES: usize = 4096;

/// Relative diagonal jitter levels tried in order when factorizing.
const JITTER_LEVELS: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Regular lattice of `nx × ny` cell centres covering `extent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// `[x_min, x_max, y_min, y_max]`
    pub extent: [f64; 4],
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::square(30)
    }
}

impl GridSpec {
    /// `n × n` grid with unit spacing on `[0, n]²`.
    pub fn square(n: usize) -> Self {
        GridSpec { nx: n, ny: n, extent: [0.0, n as f64, 0.0, n as f64] }
    }

    pub fn validate(&self) -> Result<()> {
        let [x0, x1, y0, y1] = self.extent;
        if self.nx == 0 || self.ny == 0 || !(x1 > x0) || !(y1 > y0) {
            return Err(Error::domain(format!("invalid grid {self:?}")));
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_square(&self) -> bool {
        self.nx == self.ny
    }

    pub fn spacing(&self) -> (f64, f64) {
        let [x0, x1, y0, y1] = self.extent;
        ((x1 - x0) / self.nx as f64, (y1 - y0) / self.ny as f64)
    }

    /// Site index of cell `(ix, iy)`; `iy` varies fastest.
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny + iy
    }

    pub fn coord(&self, ix: usize, iy: usize) -> [f64; 2] {
        let (dx, dy) = self.spacing();
        [self.extent[0] + (ix as f64 + 0.5) * dx, self.extent[2] + (iy as f64 + 0.5) * dy]
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        (0..self.nx).flat_map(|ix| (0..self.ny).map(move |iy| (ix, iy))).map(|(ix, iy)| self.coord(ix, iy)).collect()
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Algorithm used for Brown–Resnick-type fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SimulationMethod {
    #[default]
    Exact,
    /// Pointwise maximum over a fixed number of spectral replicates.
    Approximate { replicates: usize },
}

/// One realization on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub params: ParameterVector,
    /// Master seed and replicate index the field was drawn with.
    pub seed: u64,
    pub index: u64,
}

impl FieldSample {
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.grid.index(ix, iy)]
    }
}

/// Centered Gaussian vectors with a fixed covariance, drawn in batches.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    factor: DMatrix<f64>,
    /// Relative jitter that made the factorization succeed.
    pub jitter: f64,
}

impl GaussianSampler {
    /// Factorizes `cov` with escalating diagonal jitter.
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        let mean_diag = (0..n).map(|i| cov[(i, i)]).sum::<f64>() / n.max(1) as f64;
        let mut last = 0.0;
        for &jitter in &JITTER_LEVELS {
            let mut m = cov.clone();
            for i in 0..n {
                m[(i, i)] += jitter * mean_diag;
            }
            if let Some(ch) = m.cholesky() {
                return Ok(GaussianSampler { factor: ch.unpack(), jitter });
            }
            last = jitter;
        }
        Err(Error::NotPositiveDefinite { jitter: last })
    }

    /// Stationary covariance `kernel(‖x_i − x_j‖)` on the given sites.
    pub fn from_kernel(sites: &[[f64; 2]], kernel: impl Fn(f64) -> f64) -> Result<Self> {
        let n = sites.len();
        if n > MAX_SITES {
            return Err(Error::domain(format!("{n} sites exceed the dense-Cholesky bound {MAX_SITES}")));
        }
        let cov = DMatrix::from_fn(n, n, |i, j| kernel(distance(sites[i], sites[j])));
        Self::new(cov)
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// `count` independent draws as the columns of a `dim × count` matrix.
    pub fn sample_batch(&self, rng: &mut Rng, count: usize) -> DMatrix<f64> {
        let n = self.dim();
        let normals = DMatrix::from_fn(n, count, |_, _| rng::std_normal(rng));
        &self.factor * normals
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.sample_batch(rng, 1).column(0).iter().copied().collect()
    }
}

/// Buffered stream of Gaussian draws; consumed one vector at a time.
struct GaussianStream<'a> {
    sampler: &'a GaussianSampler,
    buffer: DMatrix<f64>,
    next: usize,
}

const BATCH: usize = 16;

impl<'a> GaussianStream<'a> {
    fn new(sampler: &'a GaussianSampler) -> Self {
        GaussianStream { sampler, buffer: DMatrix::zeros(sampler.dim(), 0), next: 0 }
    }

    fn next(&mut self, rng: &mut Rng) -> &[f64] {
        if self.next >= self.buffer.ncols() {
            self.buffer = self.sampler.sample_batch(rng, BATCH);
            self.next = 0;
        }
        let col = self.next;
        self.next += 1;
        let n = self.buffer.nrows();
        &self.buffer.as_slice()[col * n..(col + 1) * n]
    }
}

/// One centered Gaussian field on `grid` with stationary covariance `kernel`.
pub fn gaussian_field(grid: &GridSpec, kernel: impl Fn(f64) -> f64, seed: u64) -> Result<Vec<f64>> {
    grid.validate()?;
    let sampler = GaussianSampler::from_kernel(&grid.coords(), kernel)?;
    Ok(sampler.sample(&mut rng::substream(seed, domain::FIELD, 0)))
}

enum Spectral {
    /// Gaussian correlation for `Y = √(2π) max(0, ε)`; `corr` is the
    /// row-major site correlation matrix.
    Schlather { sampler: GaussianSampler, corr: Vec<f64> },
    /// Intrinsic Gaussian `W` anchored at site 0 (`W(x₀) = 0`), sampled on
    /// sites `1..k`, with the semivariogram matrix `γ(x_i − x_j)`.
    BrownResnick { sampler: GaussianSampler, gamma: Vec<f64> },
    /// ν = 2: `W(x) = √2/λ ⟨x − x₀, N⟩`, exact and rank two.
    Linear { scale: f64, gamma: Vec<f64> },
}

/// Statistics of a single simulation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimulationStats {
    /// Number of spectral functions drawn.
    pub spectral_draws: usize,
}

/// A model prepared for repeated simulation on fixed sites.
pub struct Simulator {
    sites: Vec<[f64; 2]>,
    spectral: Spectral,
    method: SimulationMethod,
}

impl Simulator {
    pub fn new(p: &ParameterVector, sites: &[[f64; 2]], method: SimulationMethod) -> Result<Self> {
        p.validate()?;
        let k = sites.len();
        if k == 0 {
            return Err(Error::domain("no sites to simulate"));
        }
        if k > MAX_SITES {
            return Err(Error::domain(format!("{k} sites exceed the dense-Cholesky bound {MAX_SITES}")));
        }
        if let SimulationMethod::Approximate { replicates } = method {
            if replicates == 0 {
                return Err(Error::domain("approximate simulation needs at least one replicate"));
            }
        }
        let spectral = if p.family.is_schlather() {
            let corr: Vec<f64> = (0..k)
                .flat_map(|i| (0..k).map(move |j| (i, j)))
                .map(|(i, j)| schlather_corr(distance(sites[i], sites[j]), p))
                .collect();
            let sampler = GaussianSampler::new(DMatrix::from_row_slice(k, k, &corr))?;
            Spectral::Schlather { sampler, corr }
        } else {
            let br = p.as_brown_resnick().expect("Brown-Resnick-type family");
            let gamma: Vec<f64> = (0..k)
                .flat_map(|i| (0..k).map(move |j| (i, j)))
                .map(|(i, j)| br_semivariogram(distance(sites[i], sites[j]), p))
                .collect();
            if br.nu == 2.0 {
                Spectral::Linear { scale: std::f64::consts::SQRT_2 / br.lambda, gamma }
            } else {
                let m = k - 1;
                let cov = DMatrix::from_fn(m, m, |i, j| {
                    let (a, b) = (i + 1, j + 1);
                    gamma[a * k] + gamma[b * k] - gamma[a * k + b]
                });
                let sampler = if m == 0 {
                    GaussianSampler { factor: DMatrix::zeros(0, 0), jitter: 0.0 }
                } else {
                    GaussianSampler::new(cov)?
                };
                Spectral::BrownResnick { sampler, gamma }
            }
        };
        Ok(Simulator { sites: sites.to_vec(), spectral, method })
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.sample_with_stats(rng).0
    }

    pub fn sample_with_stats(&self, rng: &mut Rng) -> (Vec<f64>, SimulationStats) {
        match self.method {
            SimulationMethod::Exact => self.extremal_functions(rng),
            SimulationMethod::Approximate { replicates } => self.finite_maximum(replicates, rng),
        }
    }

    /// Log of the extremal function at site `anchor`, written into `out`.
    /// Brown–Resnick: `W(x) − W(x_anchor) − γ(x − x_anchor)`. Schlather:
    /// `ln max(0, T)` with `T = ρ + (ε − ρ ε_anchor) / √(2E)`, a Student
    /// process with two degrees of freedom; `mix` is the draw `E ~ Exp(1)`.
    fn log_extremal_function(&self, anchor: usize, draw: &[f64], mix: f64, out: &mut [f64]) {
        let k = self.n_sites();
        match &self.spectral {
            Spectral::Schlather { corr, .. } => {
                let scale = 1.0 / (2.0 * mix).sqrt();
                let ea = draw[anchor];
                for (i, o) in out.iter_mut().enumerate() {
                    let rho = corr[anchor * k + i];
                    let t = if i == anchor { 1.0 } else { rho + (draw[i] - rho * ea) * scale };
                    *o = if t > 0.0 { t.ln() } else { f64::NEG_INFINITY };
                }
            }
            Spectral::BrownResnick { gamma, .. } => {
                // draw holds W at sites 1..k; W(site 0) = 0.
                let w = |i: usize| if i == 0 { 0.0 } else { draw[i - 1] };
                let wa = w(anchor);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = w(i) - wa - gamma[anchor * k + i];
                }
            }
            Spectral::Linear { scale, gamma } => {
                let (n0, n1) = (draw[0], draw[1]);
                let x0 = self.sites[0];
                let w = |i: usize| scale * ((self.sites[i][0] - x0[0]) * n0 + (self.sites[i][1] - x0[1]) * n1);
                let wa = w(anchor);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = w(i) - wa - gamma[anchor * k + i];
                }
            }
        }
    }

    fn next_draw<'s>(stream: &'s mut Option<GaussianStream<'_>>, linear: &'s mut [f64; 2], rng: &mut Rng) -> &'s [f64] {
        match stream {
            Some(s) => s.next(rng),
            None => {
                linear[0] = rng::std_normal(rng);
                linear[1] = rng::std_normal(rng);
                &linear[..]
            }
        }
    }

    fn extremal_functions(&self, rng: &mut Rng) -> (Vec<f64>, SimulationStats) {
        let k = self.n_sites();
        let mut z = vec![0.0f64; k];
        let mut stream = match &self.spectral {
            Spectral::BrownResnick { sampler, .. } | Spectral::Schlather { sampler, .. } => {
                Some(GaussianStream::new(sampler))
            }
            Spectral::Linear { .. } => None,
        };
        let schlather = matches!(self.spectral, Spectral::Schlather { .. });
        let mut linear = [0.0; 2];
        let mut log_y = vec![0.0; k];
        let mut draws = 0;
        for j in 0..k {
            let mut gamma_sum: f64 = rng::std_exp(rng);
            let mut zeta = 1.0 / gamma_sum;
            while zeta > z[j] {
                let draw = Self::next_draw(&mut stream, &mut linear, rng);
                let mix = if schlather { rng::std_exp(rng) } else { 0.0 };
                self.log_extremal_function(j, draw, mix, &mut log_y);
                draws += 1;
                let log_zeta = zeta.ln();
                let valid = (0..j).all(|i| log_zeta + log_y[i] < z[i].ln());
                if valid {
                    for (zi, &ly) in z.iter_mut().zip(&log_y) {
                        let v = (log_zeta + ly).exp();
                        if v > *zi {
                            *zi = v;
                        }
                    }
                }
                gamma_sum += rng::std_exp(rng);
                zeta = 1.0 / gamma_sum;
            }
        }
        (z, SimulationStats { spectral_draws: draws })
    }

    fn finite_maximum(&self, replicates: usize, rng: &mut Rng) -> (Vec<f64>, SimulationStats) {
        let k = self.n_sites();
        let mut z = vec![0.0f64; k];
        let mut gamma_sum = 0.0;
        let mut log_y = vec![0.0; k];
        match &self.spectral {
            Spectral::Schlather { sampler, .. } => {
                let mut stream = GaussianStream::new(sampler);
                for _ in 0..replicates {
                    gamma_sum += rng::std_exp(rng);
                    let zeta = 1.0 / gamma_sum;
                    let eps = stream.next(rng);
                    for (zi, &e) in z.iter_mut().zip(eps) {
                        *zi = zi.max(zeta * SQRT_2PI * e.max(0.0));
                    }
                }
            }
            _ => {
                let mut stream = match &self.spectral {
                    Spectral::BrownResnick { sampler, .. } => Some(GaussianStream::new(sampler)),
                    _ => None,
                };
                let mut linear = [0.0; 2];
                for _ in 0..replicates {
                    gamma_sum += rng::std_exp(rng);
                    let log_zeta = -gamma_sum.ln();
                    let draw = Self::next_draw(&mut stream, &mut linear, rng);
                    self.log_extremal_function(0, draw, 0.0, &mut log_y);
                    for (zi, &ly) in z.iter_mut().zip(&log_y) {
                        *zi = zi.max((log_zeta + ly).exp());
                    }
                }
            }
        }
        // Sites never touched by a positive spectral value keep an explicit floor.
        for zi in z.iter_mut() {
            if *zi <= 0.0 {
                *zi = f64::MIN_POSITIVE;
            }
        }
        (z, SimulationStats { spectral_draws: replicates })
    }
}

/// One realization of the model on `grid`.
pub fn simulate(p: &ParameterVector, grid: &GridSpec, seed: u64) -> Result<FieldSample> {
    simulate_indexed(p, grid, SimulationMethod::Exact, seed, 0)
}

/// Realization `index` of the stream addressed by `seed`.
pub fn simulate_indexed(
    p: &ParameterVector,
    grid: &GridSpec,
    method: SimulationMethod,
    seed: u64,
    index: u64,
) -> Result<FieldSample> {
    grid.validate()?;
    let sim = Simulator::new(p, &grid.coords(), method)?;
    let values = sim.sample(&mut rng::substream(seed, domain::FIELD, index));
    Ok(FieldSample { grid: *grid, values, params: *p, seed, index })
}

/// Independent uniform prior on `(λ, ν)`; for the Smith family the λ range
/// is the range of σ and ν is fixed at 2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub lambda: (f64, f64),
    pub nu: (f64, f64),
}

impl Default for PriorBox {
    fn default() -> Self {
        PriorBox { lambda: (0.5, 5.0), nu: (0.3, 1.8) }
    }
}

impl PriorBox {
    pub fn validate(&self, family: ModelFamily) -> Result<()> {
        let (la, lb) = self.lambda;
        let (na, nb) = self.nu;
        if !(la < lb) || la < 0.0 || !lb.is_finite() {
            return Err(Error::domain(format!("invalid lambda prior range ({la}, {lb})")));
        }
        if family == ModelFamily::Smith {
            return Ok(());
        }
        if !(na < nb) || na < 0.0 {
            return Err(Error::domain(format!("invalid nu prior range ({na}, {nb})")));
        }
        if matches!(family, ModelFamily::BrownResnick | ModelFamily::SchlatherPowExp) && nb > 2.0 {
            return Err(Error::domain(format!("nu prior ({na}, {nb}) exceeds 2 for {family}")));
        }
        Ok(())
    }

    pub fn contains(&self, p: &ParameterVector) -> bool {
        let inside = |v: f64, (a, b): (f64, f64)| v >= a && v <= b;
        inside(p.lambda, self.lambda) && (p.family == ModelFamily::Smith || inside(p.nu, self.nu))
    }

    pub fn sample(&self, family: ModelFamily, rng: &mut Rng) -> ParameterVector {
        loop {
            let lambda = rng.random_range(self.lambda.0..self.lambda.1);
            let nu = if family == ModelFamily::Smith { 2.0 } else { rng.random_range(self.nu.0..self.nu.1) };
            if let Ok(p) = ParameterVector::new(family, lambda, nu) {
                return p;
            }
        }
    }
}

/// Parameter/simulation pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub pairs: Vec<(ParameterVector, FieldSample)>,
    pub prior: PriorBox,
    pub family: ModelFamily,
    pub grid: GridSpec,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of leading pairs used for training; the rest is validation.
    pub fn n_train(&self) -> usize {
        let n = self.pairs.len();
        if n < 2 {
            return n;
        }
        let n_val = ((n as f64) * self.validation_fraction).round() as usize;
        n - n_val.clamp(1, n - 1)
    }

    pub fn train_pairs(&self) -> &[(ParameterVector, FieldSample)] {
        &self.pairs[..self.n_train()]
    }

    pub fn validation_pairs(&self) -> &[(ParameterVector, FieldSample)] {
        &self.pairs[self.n_train()..]
    }
}

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;

/// Draws prior parameter `index` and simulates its field.
pub fn generate_pair(
    prior: &PriorBox,
    family: ModelFamily,
    grid: &GridSpec,
    method: SimulationMethod,
    seed: u64,
    index: u64,
) -> Result<(ParameterVector, FieldSample)> {
    let p = prior.sample(family, &mut rng::substream(seed, domain::PRIOR, index));
    let field = simulate_indexed(&p, grid, method, seed, index)
        .map_err(|e| Error::Simulation { index: index as usize, source: Box::new(e) })?;
    Ok((p, field))
}

pub fn generate_training_set(
    prior: &PriorBox,
    n: usize,
    family: ModelFamily,
    grid: &GridSpec,
    seed: u64,
) -> Result<TrainingSet> {
    generate_training_set_with(prior, n, family, grid, SimulationMethod::Exact, seed)
}

pub fn generate_training_set_with(
    prior: &PriorBox,
    n: usize,
    family: ModelFamily,
    grid: &GridSpec,
    method: SimulationMethod,
    seed: u64,
) -> Result<TrainingSet> {
    if n == 0 {
        return Err(Error::domain("training set size must be at least 1"));
    }
    prior.validate(family)?;
    grid.validate()?;
    let pairs = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_pair(prior, family, grid, method, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet {
        pairs,
        prior: *prior,
        family,
        grid: *grid,
        seed,
        validation_fraction: DEFAULT_VALIDATION_FRACTION,
    })
}

/// Which distance-preserving transforms an augmentation applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentMask {
    pub rotate180: bool,
    pub flip_vertical: bool,
    pub flip_horizontal: bool,
}

pub const ROTATE_PROBABILITY: f64 = 0.5;
pub const FLIP_VERTICAL_PROBABILITY: f64 = 0.3;
pub const FLIP_HORIZONTAL_PROBABILITY: f64 = 0.2;

impl AugmentMask {
    pub fn draw(rng: &mut Rng) -> Self {
        AugmentMask {
            rotate180: rng.random_bool(ROTATE_PROBABILITY),
            flip_vertical: rng.random_bool(FLIP_VERTICAL_PROBABILITY),
            flip_horizontal: rng.random_bool(FLIP_HORIZONTAL_PROBABILITY),
        }
    }

    /// Mask for item `index` of the augmentation stream `seed`.
    pub fn for_index(seed: u64, index: u64) -> Self {
        Self::draw(&mut rng::substream(seed, domain::AUGMENT, index))
    }

    /// Applies the mask to an `n × n` row-major image.
    pub fn apply(&self, n: usize, values: &[f64]) -> Vec<f64> {
        // Rotation by 180° is both flips; compose into one reflection per axis.
        let flip_x = self.rotate180 ^ self.flip_vertical;
        let flip_y = self.rotate180 ^ self.flip_horizontal;
        let mut out = vec![0.0; n * n];
        for ix in 0..n {
            let sx = if flip_x { n - 1 - ix } else { ix };
            for iy in 0..n {
                let sy = if flip_y { n - 1 - iy } else { iy };
                out[ix * n + iy] = values[sx * n + sy];
            }
        }
        out
    }
}

/// Randomly rotated/flipped copy of a square field; its parameters are unchanged.
pub fn augment(field: &FieldSample, seed: u64) -> Result<FieldSample> {
    augment_with_mask(field, AugmentMask::for_index(seed, field.index))
}

pub fn augment_with_mask(field: &FieldSample, mask: AugmentMask) -> Result<FieldSample> {
    if !field.grid.is_square() {
        return Err(Error::domain(format!(
            "augmentation requires a square grid, got {}x{}",
            field.grid.nx, field.grid.ny
        )));
    }
    Ok(FieldSample { values: mask.apply(field.grid.nx, &field.values), ..field.clone() })
}
