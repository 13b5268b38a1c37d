//! Rejection ABC with tripletwise extremal-coefficient summaries of a
//! bilinearly downsampled field.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::scoring::PosteriorSample;
use crate::simulate::{FieldSample, GridSpec, PriorBox, SimulationMethod, Simulator};
use crate::spatial::{ModelFamily, ParameterVector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbcConfig {
    pub n_sims: usize,
    pub processes_per_sim: usize,
    /// Side length of the downsampled grid.
    pub downsample: usize,
    /// Number of accepted draws; the threshold is the distance of the
    /// `accept_count`-th closest simulation.
    pub accept_count: usize,
    pub method: SimulationMethod,
}

impl Default for AbcConfig {
    fn default() -> Self {
        AbcConfig {
            n_sims: 50_000,
            processes_per_sim: 25,
            downsample: 5,
            accept_count: 500,
            method: SimulationMethod::Exact,
        }
    }
}

impl AbcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample < 3 {
            return Err(Error::domain("downsampled grid needs at least 3 sites per side"));
        }
        if self.processes_per_sim == 0 || self.accept_count == 0 {
            return Err(Error::domain("processes_per_sim and accept_count must be positive"));
        }
        if self.n_sims < self.accept_count {
            return Err(Error::TooFewSamples { required: self.accept_count, found: self.n_sims });
        }
        Ok(())
    }
}

/// One output site as a weighted combination of source sites.
type Stencil = [(usize, f64); 4];

/// Bilinear resampling between two grids with half-pixel aligned centres,
/// clamping at the borders.
#[derive(Clone, Debug)]
pub struct Downsampler {
    pub source: GridSpec,
    pub target: GridSpec,
    stencils: Vec<Stencil>,
}

fn axis_weights(n_src: usize, n_dst: usize, i: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_src - 1);
    (i0, i1, s - i0 as f64)
}

impl Downsampler {
    pub fn new(source: GridSpec, nx: usize, ny: usize) -> Result<Self> {
        source.validate()?;
        let target = GridSpec { nx, ny, extent: source.extent };
        target.validate()?;
        let mut stencils = Vec::with_capacity(nx * ny);
        for ix in 0..nx {
            let (x0, x1, wx) = axis_weights(source.nx, nx, ix);
            for iy in 0..ny {
                let (y0, y1, wy) = axis_weights(source.ny, ny, iy);
                stencils.push([
                    (source.index(x0, y0), (1.0 - wx) * (1.0 - wy)),
                    (source.index(x0, y1), (1.0 - wx) * wy),
                    (source.index(x1, y0), wx * (1.0 - wy)),
                    (source.index(x1, y1), wx * wy),
                ]);
            }
        }
        Ok(Downsampler { source, target, stencils })
    }

    /// Source site indices that carry nonzero weight, ascending.
    pub fn support(&self) -> Vec<usize> {
        let mut s: Vec<usize> =
            self.stencils.iter().flat_map(|st| st.iter().filter(|(_, w)| *w > 0.0).map(|(i, _)| *i)).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Resamples a full source field.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.stencils.iter().map(|st| st.iter().map(|&(i, w)| w * values[i]).sum()).collect()
    }

    /// Resamples from values given only on `support()`, in that order.
    fn apply_support(&self, support: &[usize], values: &[f64]) -> Vec<f64> {
        self.stencils
            .iter()
            .map(|st| {
                st.iter()
                    .map(|&(i, w)| if w > 0.0 { w * values[support.binary_search(&i).expect("support site")] } else { 0.0 })
                    .sum()
            })
            .collect()
    }
}

/// Bilinear downsampling of a field to `n × n`.
pub fn downsample(field: &FieldSample, n: usize) -> Result<FieldSample> {
    let d = Downsampler::new(field.grid, n, n)?;
    if field.values.len() != field.grid.n_sites() {
        return Err(Error::DimensionMismatch { expected: field.grid.n_sites(), found: field.values.len() });
    }
    Ok(FieldSample { grid: d.target, values: d.apply(&field.values), ..field.clone() })
}

fn n_triples(n: usize) -> usize {
    if n < 3 {
        0
    } else {
        n * (n - 1) * (n - 2) / 6
    }
}

/// Empirical extremal coefficient of every site triple `i < j < k`, in
/// lexicographic order, from replicates on unit Fréchet margins.
///
/// With `Y = 1/Z` standard exponential, `min(Y_i, Y_j, Y_k)` is exponential
/// with rate θ, so θ is estimated by `Σ_r (Y_ir + Y_jr + Y_kr) / (3 Σ_r min_r)`,
/// clamped to `[1, 3]`. Triples whose minimum sum is zero or non-finite get 1.
pub fn triplet_summary(replicates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = replicates.first().ok_or(Error::TooFewSamples { required: 1, found: 0 })?;
    let n = first.len();
    if let Some(r) = replicates.iter().find(|r| r.len() != n) {
        return Err(Error::DimensionMismatch { expected: n, found: r.len() });
    }
    if replicates.iter().flatten().any(|&z| !(z > 0.0)) {
        return Err(Error::domain("triplet summary needs positive Fréchet values"));
    }
    let inv: Vec<Vec<f64>> = replicates.iter().map(|r| r.iter().map(|z| 1.0 / z).collect()).collect();
    let site_sum: Vec<f64> = (0..n).map(|i| inv.iter().map(|r| r[i]).sum()).collect();
    let mut out = Vec::with_capacity(n_triples(n));
    for i in 0..n {
        for j in i + 1..n {
            let pair_min: Vec<f64> = inv.iter().map(|r| r[i].min(r[j])).collect();
            for k in j + 1..n {
                let min_sum: f64 = inv.iter().zip(&pair_min).map(|(r, &m)| m.min(r[k])).sum();
                let total = site_sum[i] + site_sum[j] + site_sum[k];
                let theta = total / (3.0 * min_sum);
                out.push(if theta.is_finite() { theta.clamp(1.0, 3.0) } else { 1.0 });
            }
        }
    }
    Ok(out)
}

/// Prior draws with the triplet summaries of their simulated replicates,
/// reusable across observations on the same grid.
#[derive(Clone, Debug)]
pub struct ReferenceTable {
    pub config: AbcConfig,
    pub family: ModelFamily,
    pub prior: PriorBox,
    pub seed: u64,
    pub downsampler: Downsampler,
    /// Simulation index and parameters of every successful draw.
    pub draws: Vec<(usize, ParameterVector)>,
    /// Summaries stored in single precision, one row per draw.
    summaries: Vec<f32>,
    pub summary_len: usize,
    /// Draws skipped because simulation failed.
    pub failures: usize,
}

impl ReferenceTable {
    /// Simulates `n_sims` prior draws on `grid`. Draw `i` uses its own
    /// substream, so the table does not depend on thread scheduling.
    pub fn build(prior: &PriorBox, family: ModelFamily, grid: &GridSpec, cfg: &AbcConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        prior.validate(family)?;
        let downsampler = Downsampler::new(*grid, cfg.downsample, cfg.downsample)?;
        let support = downsampler.support();
        let all_coords = grid.coords();
        let sites: Vec<[f64; 2]> = support.iter().map(|&i| all_coords[i]).collect();
        let summary_len = n_triples(cfg.downsample * cfg.downsample);
        let rows: Vec<Option<(ParameterVector, Vec<f64>)>> = (0..cfg.n_sims)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng::substream(seed, domain::ABC, i as u64);
                let p = prior.sample(family, &mut rng);
                let sim = Simulator::new(&p, &sites, cfg.method).ok()?;
                let reps: Vec<Vec<f64>> = (0..cfg.processes_per_sim)
                    .map(|_| downsampler.apply_support(&support, &sim.sample(&mut rng)))
                    .collect();
                triplet_summary(&reps).ok().map(|s| (p, s))
            })
            .collect();
        let mut draws = Vec::new();
        let mut summaries = Vec::with_capacity(cfg.n_sims * summary_len);
        let mut failures = 0;
        for (i, row) in rows.into_iter().enumerate() {
            match row {
                Some((p, s)) => {
                    draws.push((i, p));
                    summaries.extend(s.iter().map(|&v| v as f32));
                }
                None => failures += 1,
            }
        }
        if draws.len() < cfg.accept_count {
            return Err(Error::TooFewSamples { required: cfg.accept_count, found: draws.len() });
        }
        Ok(ReferenceTable {
            config: *cfg,
            family,
            prior: *prior,
            seed,
            downsampler,
            draws,
            summaries,
            summary_len,
            failures,
        })
    }

    pub fn summary(&self, row: usize) -> &[f32] {
        &self.summaries[row * self.summary_len..(row + 1) * self.summary_len]
    }

    /// Summary of a single observed field after downsampling.
    pub fn observed_summary(&self, observed: &FieldSample) -> Result<Vec<f64>> {
        if observed.grid != self.downsampler.source {
            return Err(Error::GridMismatch(format!(
                "observation grid {:?} vs reference grid {:?}",
                observed.grid, self.downsampler.source
            )));
        }
        triplet_summary(&[self.downsampler.apply(&observed.values)])
    }

    /// Euclidean distance of every draw to the observation, with its
    /// simulation index.
    pub fn distances(&self, observed: &FieldSample) -> Result<Vec<(f64, usize)>> {
        let obs = self.observed_summary(observed)?;
        Ok(self
            .draws
            .par_iter()
            .enumerate()
            .map(|(row, &(sim, _))| {
                let d2: f64 = self.summary(row).iter().zip(&obs).map(|(&s, &o)| (s as f64 - o).powi(2)).sum();
                (d2.sqrt(), sim)
            })
            .collect())
    }

    /// Parameters of the `accept_count` closest draws, ties broken by the
    /// lower simulation index.
    pub fn accept(&self, observed: &FieldSample) -> Result<PosteriorSample> {
        let mut d: Vec<((f64, usize), ParameterVector)> =
            self.distances(observed)?.into_iter().zip(self.draws.iter().map(|&(_, p)| p)).collect();
        let by_key = |a: &((f64, usize), ParameterVector), b: &((f64, usize), ParameterVector)| {
            a.0 .0.total_cmp(&b.0 .0).then(a.0 .1.cmp(&b.0 .1))
        };
        let m = self.config.accept_count;
        if d.len() > m {
            d.select_nth_unstable_by(m - 1, by_key);
            d.truncate(m);
        }
        d.sort_by(by_key);
        PosteriorSample::params(d.into_iter().map(|(_, p)| p).collect())
    }
}

/// Builds a reference table for `observed`'s grid and accepts from it.
pub fn abc(
    observed: &FieldSample,
    prior: &PriorBox,
    family: ModelFamily,
    cfg: &AbcConfig,
    seed: u64,
) -> Result<PosteriorSample> {
    ReferenceTable::build(prior, family, &observed.grid, cfg, seed)?.accept(observed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::std_exp;
    use crate::simulate::simulate_indexed;
    use proptest::prelude::*;

    #[test]
    fn bilinear_weights_hand_values() {
        // 16 → 5: source positions 1.1, 4.3, 7.5, 10.7, 13.9.
        assert_eq!(axis_weights(16, 5, 0).0, 1);
        assert!((axis_weights(16, 5, 0).2 - 0.1).abs() < 1e-12);
        let (i0, i1, w) = axis_weights(16, 5, 2);
        assert_eq!((i0, i1), (7, 8));
        assert!((w - 0.5).abs() < 1e-12);
        // Upsampling clamps at the border.
        assert_eq!(axis_weights(2, 4, 0), (0, 1, 0.0));
        assert_eq!(axis_weights(2, 4, 3), (1, 1, 0.0));
    }

    #[test]
    fn downsample_reproduces_affine_fields() {
        let grid = GridSpec::square(16);
        let values: Vec<f64> = grid.coords().iter().map(|c| 2.0 + 0.5 * c[0] - 0.25 * c[1]).collect();
        let field = FieldSample {
            grid,
            values,
            params: ParameterVector::brown_resnick(1.0, 1.0).unwrap(),
            seed: 0,
            index: 0,
        };
        let small = downsample(&field, 5).unwrap();
        for (c, v) in small.grid.coords().iter().zip(&small.values) {
            assert!((v - (2.0 + 0.5 * c[0] - 0.25 * c[1])).abs() < 1e-12);
        }
        let d = Downsampler::new(grid, 5, 5).unwrap();
        assert!(d.support().len() <= 100);
        let support = d.support();
        let sub: Vec<f64> = support.iter().map(|&i| field.values[i]).collect();
        assert_eq!(d.apply_support(&support, &sub), d.apply(&field.values));
    }

    #[test]
    fn triplet_limits() {
        let constant = vec![vec![1.7; 25]; 3];
        let s = triplet_summary(&constant).unwrap();
        assert_eq!(s.len(), 2300);
        assert!(s.iter().all(|&v| v == 1.0));

        let mut rng = rng::substream(1, domain::MONTE_CARLO, 0);
        let indep: Vec<Vec<f64>> = (0..20_000).map(|_| (0..5).map(|_| 1.0 / std_exp(&mut rng)).collect()).collect();
        let s = triplet_summary(&indep).unwrap();
        assert_eq!(s.len(), 10);
        for v in s {
            assert!((v - 3.0).abs() < 0.05, "{v}");
        }
    }

    proptest! {
        #[test]
        fn triplet_summary_ignores_replicate_order(
            reps in proptest::collection::vec(proptest::collection::vec(0.05f64..50.0, 6), 2..6),
            rot in 0usize..6,
        ) {
            let mut permuted = reps.clone();
            permuted.rotate_left(rot % reps.len());
            let a = triplet_summary(&reps).unwrap();
            let b = triplet_summary(&permuted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((1.0..=3.0).contains(x));
            }
        }
    }

    fn small_cfg() -> AbcConfig {
        AbcConfig { n_sims: 400, processes_per_sim: 5, accept_count: 40, ..AbcConfig::default() }
    }

    #[test]
    fn accepts_exactly_m_inside_prior() {
        let grid = GridSpec::square(8);
        let prior = PriorBox::default();
        let obs = simulate_indexed(&ParameterVector::brown_resnick(2.0, 1.0).unwrap(), &grid, SimulationMethod::Exact, 9, 0)
            .unwrap();
        let table = ReferenceTable::build(&prior, ModelFamily::BrownResnick, &grid, &small_cfg(), 4).unwrap();
        let post = table.accept(&obs).unwrap();
        let PosteriorSample::Params(ps) = &post else { panic!("parameter posterior expected") };
        assert_eq!(ps.len(), 40);
        assert!(ps.iter().all(|p| prior.contains(p)));
        assert_eq!(post, abc(&obs, &prior, ModelFamily::BrownResnick, &small_cfg(), 4).unwrap());
        assert_eq!(table.failures + table.draws.len(), 400);
    }

    #[test]
    fn acceptance_ignores_table_order() {
        let grid = GridSpec::square(8);
        let obs = simulate_indexed(&ParameterVector::brown_resnick(1.0, 1.5).unwrap(), &grid, SimulationMethod::Exact, 2, 0)
            .unwrap();
        let table = ReferenceTable::build(&PriorBox::default(), ModelFamily::BrownResnick, &grid, &small_cfg(), 6).unwrap();
        let forward = table.accept(&obs).unwrap();

        let mut shuffled = table.clone();
        let n = shuffled.draws.len();
        let order: Vec<usize> = (0..n).rev().collect();
        shuffled.draws = order.iter().map(|&i| table.draws[i]).collect();
        shuffled.summaries = order.iter().flat_map(|&i| table.summary(i).to_vec()).collect();
        assert_eq!(shuffled.accept(&obs).unwrap(), forward);
    }

    #[test]
    fn posterior_mean_tracks_truth() {
        let grid = GridSpec::square(8);
        let prior = PriorBox::default();
        let truth = ParameterVector::brown_resnick(3.0, 1.2).unwrap();
        // A 25-replicate observation summary matches the table's construction.
        let cfg = AbcConfig { n_sims: 1500, processes_per_sim: 25, accept_count: 50, ..AbcConfig::default() };
        let table = ReferenceTable::build(&prior, ModelFamily::BrownResnick, &grid, &cfg, 8).unwrap();
        let support = table.downsampler.support();
        let sites: Vec<[f64; 2]> = support.iter().map(|&i| grid.coords()[i]).collect();
        let sim = Simulator::new(&truth, &sites, SimulationMethod::Exact).unwrap();
        let mut rng = rng::substream(99, domain::FIELD, 0);
        let reps: Vec<Vec<f64>> =
            (0..25).map(|_| table.downsampler.apply_support(&support, &sim.sample(&mut rng))).collect();
        let obs = triplet_summary(&reps).unwrap();
        let mut d: Vec<(f64, usize)> = (0..table.draws.len())
            .map(|r| {
                let d2: f64 = table.summary(r).iter().zip(&obs).map(|(&s, &o)| (s as f64 - o).powi(2)).sum();
                (d2, r)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let accepted: Vec<ParameterVector> = d[..50].iter().map(|&(_, r)| table.draws[r].1).collect();
        let mean_nu = accepted.iter().map(|p| p.nu).sum::<f64>() / 50.0;
        let mean_l = accepted.iter().map(|p| p.lambda).sum::<f64>() / 50.0;
        assert!((mean_nu - truth.nu).abs() < (prior.nu.1 - prior.nu.0) / 4.0, "{mean_nu}");
        assert!((mean_l - truth.lambda).abs() < (prior.lambda.1 - prior.lambda.0) / 4.0, "{mean_l}");
    }
}
