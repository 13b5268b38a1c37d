use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::layers::{
    add_bias, channel_sums, col2im3, flatten, gemm, im2col3, maxpool2, maxpool2_backward, relu_backward,
    relu_inplace, unflatten, Shape,
};
use crate::error::{Error, Result};
use crate::rng::{self, domain, std_normal, Rng};
use crate::spatial::{HGrid, ParameterVector};

/// Mean and standard deviation of `log Z` for unit Fréchet `Z` (a standard
/// Gumbel variable), used to standardize network inputs.
const LOG_FRECHET_MEAN: f64 = 0.577_215_664_901_532_9;
const LOG_FRECHET_SD: f64 = 1.282_549_830_161_864;

/// Smallest ν the parameter head can emit.
const MIN_NU: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// `(λ, ν)` with `λ = exp(o₁)` and `ν = 2·sigmoid(o₂)`.
    Param,
    /// θ on an [`HGrid`], each value `1 + sigmoid(oᵢ)`.
    Theta,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "param" | "params" | "lambda-nu" => Ok(HeadKind::Param),
            "theta" => Ok(HeadKind::Theta),
            other => Err(Error::domain(format!("unknown head '{other}'"))),
        }
    }
}

/// Architecture of the estimator network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub nx: usize,
    pub ny: usize,
    /// Channels of each convolution block; blocks after the first carry a
    /// 1×1-projected residual skip.
    pub channels: Vec<usize>,
    pub dense: usize,
    pub head: HeadKind,
    pub theta_grid: HGrid,
    /// Multiplicative latent noise after the dense layer. Without it the
    /// network is a deterministic point estimator.
    pub noise: bool,
}

impl NetworkSpec {
    pub fn new(nx: usize, ny: usize, head: HeadKind) -> Self {
        NetworkSpec {
            nx,
            ny,
            channels: vec![32, 64, 128],
            dense: 256,
            head,
            theta_grid: HGrid::default(),
            noise: true,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadKind::Param => 2,
            HeadKind::Theta => self.theta_grid.len(),
        }
    }

    /// `(channels, height, width)` after the last pooling step.
    pub fn trunk_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.nx, self.ny);
        for _ in &self.channels {
            h /= 2;
            w /= 2;
        }
        (*self.channels.last().unwrap_or(&1), h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.dense == 0 {
            return Err(Error::domain(format!("invalid network layout {self:?}")));
        }
        let (_, h, w) = self.trunk_shape();
        if h == 0 || w == 0 {
            return Err(Error::domain(format!(
                "{}×{} input is too small for {} pooling blocks",
                self.nx,
                self.ny,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    wa: usize,
    ba: usize,
    wb: usize,
    bb: usize,
    proj: Option<(usize, usize)>,
    cin: usize,
    cout: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    blocks: Vec<BlockIdx>,
    dense_w: usize,
    dense_b: usize,
    out_w: usize,
    out_b: usize,
    features: usize,
}

fn layout(spec: &NetworkSpec) -> (Layout, Vec<Tensor>) {
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| {
        let len = shape.iter().product();
        tensors.push(Tensor { name, shape, data: vec![0.0; len] });
        tensors.len() - 1
    };
    let mut blocks = Vec::new();
    let mut cin = 1;
    for (i, &cout) in spec.channels.iter().enumerate() {
        let wa = push(format!("block{i}.conv_a.weight"), vec![cout, cin, 3, 3]);
        let ba = push(format!("block{i}.conv_a.bias"), vec![cout]);
        let wb = push(format!("block{i}.conv_b.weight"), vec![cout, cout, 3, 3]);
        let bb = push(format!("block{i}.conv_b.bias"), vec![cout]);
        let proj = (i > 0).then(|| {
            (push(format!("block{i}.proj.weight"), vec![cout, cin]), push(format!("block{i}.proj.bias"), vec![cout]))
        });
        blocks.push(BlockIdx { wa, ba, wb, bb, proj, cin, cout });
        cin = cout;
    }
    let (c, h, w) = spec.trunk_shape();
    let features = c * h * w;
    let dense_w = push("dense.weight".into(), vec![spec.dense, features]);
    let dense_b = push("dense.bias".into(), vec![spec.dense]);
    let out_w = push("out.weight".into(), vec![spec.output_dim(), spec.dense]);
    let out_b = push("out.bias".into(), vec![spec.output_dim()]);
    (Layout { blocks, dense_w, dense_b, out_w, out_b, features }, tensors)
}

/// Network weights plus the architecture they belong to.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<Tensor>,
    layout: Layout,
}

struct BlockCache {
    input: Vec<f64>,
    in_shape: Shape,
    col_a: Vec<f64>,
    a1: Vec<f64>,
    col_b: Vec<f64>,
    act: Vec<f64>,
    pool_arg: Vec<usize>,
    out_shape: Shape,
}

/// Intermediate values kept for the backward pass.
pub struct Cache {
    blocks: Vec<BlockCache>,
    flat: Vec<f64>,
    hidden: Vec<f64>,
    /// Rows fed to the output layer (`hidden ⊙ latent` with noise).
    head_in: Vec<f64>,
    latent: Option<Vec<f64>>,
    pub batch: usize,
    pub m: usize,
}

/// Standardized log transform applied to unit Fréchet inputs.
pub fn preprocess(values: &[f64]) -> Vec<f64> {
    values.iter().map(|z| (z.ln() - LOG_FRECHET_MEAN) / LOG_FRECHET_SD).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Network {
    /// Fan-in scaled uniform initialization (He for ReLU layers), zero biases.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (layout, mut params) = layout(&spec);
        let mut rng = rng::substream(seed, domain::INIT, 0);
        for t in params.iter_mut().filter(|t| t.shape.len() > 1) {
            let fan_in: usize = t.shape[1..].iter().product();
            let gain = if t.name.starts_with("out.") { 3.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        }
        Ok(Network { spec, params, layout })
    }

    /// Rebuilds a network from stored tensors, checking names and shapes.
    pub fn from_tensors(spec: NetworkSpec, tensors: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let (layout, expected) = layout(&spec);
        if expected.len() != tensors.len() {
            return Err(Error::DimensionMismatch { expected: expected.len(), found: tensors.len() });
        }
        for (e, t) in expected.iter().zip(&tensors) {
            if e.name != t.name || e.shape != t.shape || e.data.len() != t.data.len() {
                return Err(Error::domain(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, e.name, e.shape
                )));
            }
        }
        Ok(Network { spec, params: tensors, layout })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    fn p(&self, i: usize) -> &[f64] {
        &self.params[i].data
    }

    /// Forward pass. `inputs` holds `batch` preprocessed fields back to back;
    /// `latent` holds `batch·m` rows of width `dense` when the network has
    /// noise. Returns raw outputs, one row per (field, sample).
    pub fn forward(&self, inputs: &[f64], batch: usize, m: usize, latent: Option<Vec<f64>>) -> Result<(Vec<f64>, Cache)> {
        let spec = &self.spec;
        let k = spec.nx * spec.ny;
        if inputs.len() != batch * k {
            return Err(Error::DimensionMismatch { expected: batch * k, found: inputs.len() });
        }
        let d = spec.dense;
        let rows = if spec.noise { batch * m } else { batch };
        match (&latent, spec.noise) {
            (Some(l), true) if l.len() == rows * d => {}
            (None, false) => {}
            _ => return Err(Error::domain("latent draws do not match the network's noise layer")),
        }

        let mut x = inputs.to_vec();
        let mut shape = Shape { c: 1, b: batch, h: spec.nx, w: spec.ny };
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for bi in &self.layout.blocks {
            let plane = shape.plane();
            let col_a = im2col3(&x, shape);
            let mut a1 = vec![0.0; bi.cout * plane];
            gemm(bi.cout, 9 * bi.cin, plane, self.p(bi.wa), false, &col_a, false, 0.0, &mut a1);
            add_bias(&mut a1, self.p(bi.ba));
            relu_inplace(&mut a1);
            let mid = Shape { c: bi.cout, ..shape };
            let col_b = im2col3(&a1, mid);
            let mut act = vec![0.0; bi.cout * plane];
            gemm(bi.cout, 9 * bi.cout, plane, self.p(bi.wb), false, &col_b, false, 0.0, &mut act);
            add_bias(&mut act, self.p(bi.bb));
            if let Some((pw, pb)) = bi.proj {
                gemm(bi.cout, bi.cin, plane, self.p(pw), false, &x, false, 1.0, &mut act);
                add_bias(&mut act, self.p(pb));
            }
            relu_inplace(&mut act);
            let (pooled, pool_arg, out_shape) = maxpool2(&act, mid);
            blocks.push(BlockCache { input: x, in_shape: shape, col_a, a1, col_b, act, pool_arg, out_shape });
            x = pooled;
            shape = out_shape;
        }

        let f = self.layout.features;
        let flat = flatten(&x, shape);
        let mut hidden = vec![0.0; batch * d];
        gemm(batch, f, d, &flat, false, self.p(self.layout.dense_w), true, 0.0, &mut hidden);
        for row in hidden.chunks_exact_mut(d) {
            for (h, b) in row.iter_mut().zip(self.p(self.layout.dense_b)) {
                *h = (*h + b).max(0.0);
            }
        }

        let head_in = match &latent {
            Some(l) => {
                let mut u = l.clone();
                for (r, row) in u.chunks_exact_mut(d).enumerate() {
                    let h = &hidden[(r / m) * d..(r / m + 1) * d];
                    row.iter_mut().zip(h).for_each(|(v, h)| *v *= h);
                }
                u
            }
            None => hidden.clone(),
        };
        let out_dim = spec.output_dim();
        let mut out = vec![0.0; rows * out_dim];
        gemm(rows, d, out_dim, &head_in, false, self.p(self.layout.out_w), true, 0.0, &mut out);
        for row in out.chunks_exact_mut(out_dim) {
            row.iter_mut().zip(self.p(self.layout.out_b)).for_each(|(o, b)| *o += b);
        }
        Ok((out, Cache { blocks, flat, hidden, head_in, latent, batch, m }))
    }

    /// Backward pass from the gradient of the loss with respect to the raw
    /// outputs. Returns one gradient buffer per parameter tensor.
    pub fn backward(&self, cache: &Cache, d_out: &[f64]) -> Vec<Vec<f64>> {
        let spec = &self.spec;
        let l = &self.layout;
        let d = spec.dense;
        let out_dim = spec.output_dim();
        let rows = d_out.len() / out_dim;
        let batch = cache.batch;
        let mut grads = self.zeros_like();

        gemm(out_dim, rows, d, d_out, true, &cache.head_in, false, 0.0, &mut grads[l.out_w]);
        grads[l.out_b] = (0..out_dim).map(|j| d_out.iter().skip(j).step_by(out_dim).sum()).collect();
        let mut d_head = vec![0.0; rows * d];
        gemm(rows, out_dim, d, d_out, false, self.p(l.out_w), false, 0.0, &mut d_head);

        let mut d_hidden = match &cache.latent {
            Some(latent) => {
                let mut dh = vec![0.0; batch * d];
                for (r, (g, e)) in d_head.chunks_exact(d).zip(latent.chunks_exact(d)).enumerate() {
                    let acc = &mut dh[(r / cache.m) * d..(r / cache.m + 1) * d];
                    for ((a, g), e) in acc.iter_mut().zip(g).zip(e) {
                        *a += g * e;
                    }
                }
                dh
            }
            None => d_head,
        };
        relu_backward(&mut d_hidden, &cache.hidden);

        let f = l.features;
        gemm(d, batch, f, &d_hidden, true, &cache.flat, false, 0.0, &mut grads[l.dense_w]);
        grads[l.dense_b] = (0..d).map(|j| d_hidden.iter().skip(j).step_by(d).sum()).collect();
        let mut d_flat = vec![0.0; batch * f];
        gemm(batch, d, f, &d_hidden, false, self.p(l.dense_w), false, 0.0, &mut d_flat);

        let last = cache.blocks.last().expect("at least one block");
        let mut dx = unflatten(&d_flat, last.out_shape);
        for (i, (bi, bc)) in l.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let plane = bc.in_shape.plane();
            let mut ds = maxpool2_backward(&dx, &bc.pool_arg, bc.act.len());
            relu_backward(&mut ds, &bc.act);

            let mut dx_in = vec![0.0; bi.cin * plane];
            if let Some((pw, pb)) = bi.proj {
                gemm(bi.cout, plane, bi.cin, &ds, false, &bc.input, true, 0.0, &mut grads[pw]);
                grads[pb] = channel_sums(&ds, bi.cout);
                gemm(bi.cin, bi.cout, plane, self.p(pw), true, &ds, false, 0.0, &mut dx_in);
            }

            gemm(bi.cout, plane, 9 * bi.cout, &ds, false, &bc.col_b, true, 0.0, &mut grads[bi.wb]);
            grads[bi.bb] = channel_sums(&ds, bi.cout);
            let mut dcol = vec![0.0; 9 * bi.cout * plane];
            gemm(9 * bi.cout, bi.cout, plane, self.p(bi.wb), true, &ds, false, 0.0, &mut dcol);
            let mut da = col2im3(&dcol, Shape { c: bi.cout, ..bc.in_shape });
            relu_backward(&mut da, &bc.a1);

            gemm(bi.cout, plane, 9 * bi.cin, &da, false, &bc.col_a, true, 0.0, &mut grads[bi.wa]);
            grads[bi.ba] = channel_sums(&da, bi.cout);
            if i > 0 {
                let mut dcol = vec![0.0; 9 * bi.cin * plane];
                gemm(9 * bi.cin, bi.cout, plane, self.p(bi.wa), true, &da, false, 0.0, &mut dcol);
                let dconv = col2im3(&dcol, bc.in_shape);
                dx_in.iter_mut().zip(&dconv).for_each(|(a, b)| *a += b);
                dx = dx_in;
            }
        }
        grads
    }

    /// Draws `rows` latent vectors from `N(1, I)`.
    pub fn draw_latent(&self, rows: usize, rng: &mut Rng) -> Vec<f64> {
        (0..rows * self.spec.dense).map(|_| 1.0 + std_normal(rng)).collect()
    }

    /// Maps raw outputs to the scale the loss is computed on: `(log λ, ν/2)`
    /// for the parameter head and θ values for the θ head. Also returns the
    /// elementwise derivative of that map.
    pub fn loss_scale(&self, raw: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut y = Vec::with_capacity(raw.len());
        let mut dy = Vec::with_capacity(raw.len());
        match self.spec.head {
            HeadKind::Param => {
                for pair in raw.chunks_exact(2) {
                    let s = sigmoid(pair[1]);
                    y.extend([pair[0], s]);
                    dy.extend([1.0, s * (1.0 - s)]);
                }
            }
            HeadKind::Theta => {
                for &o in raw {
                    let s = sigmoid(o);
                    y.push(1.0 + s);
                    dy.push(s * (1.0 - s));
                }
            }
        }
        (y, dy)
    }

    /// Training target on the loss scale.
    pub fn target(&self, p: &ParameterVector) -> Result<Vec<f64>> {
        match self.spec.head {
            HeadKind::Param => Ok(vec![p.lambda.ln(), p.nu / 2.0]),
            HeadKind::Theta => crate::spatial::theta_values(p, &self.spec.theta_grid),
        }
    }

    /// Natural-scale outputs: `(λ, ν)` or θ values clamped into `(1, 2)`.
    pub fn natural(&self, raw: &[f64]) -> Vec<f64> {
        match self.spec.head {
            HeadKind::Param => raw
                .chunks_exact(2)
                .flat_map(|p| [p[0].exp(), (2.0 * sigmoid(p[1])).clamp(MIN_NU, 2.0)])
                .collect(),
            HeadKind::Theta => raw
                .iter()
                .map(|&o| (1.0 + sigmoid(o)).clamp(1.0 + f64::EPSILON, 2.0 - f64::EPSILON))
                .collect(),
        }
    }

    /// `m` natural-scale samples per field. Latent draws for field `i` come
    /// from its own substream `(seed, index_offset + i)`, so results do not
    /// depend on how fields are batched.
    pub fn sample(&self, fields: &[&[f64]], m: usize, seed: u64, index_offset: u64) -> Result<Vec<Vec<Vec<f64>>>> {
        let k = self.spec.nx * self.spec.ny;
        let mut inputs = Vec::with_capacity(fields.len() * k);
        for f in fields {
            if f.len() != k {
                return Err(Error::GridMismatch(format!(
                    "field has {} sites, network expects {}×{}",
                    f.len(),
                    self.spec.nx,
                    self.spec.ny
                )));
            }
            inputs.extend(preprocess(f));
        }
        let per = if self.spec.noise { m } else { 1 };
        let latent = self.spec.noise.then(|| {
            let mut l = Vec::with_capacity(fields.len() * m * self.spec.dense);
            for i in 0..fields.len() as u64 {
                let mut rng = rng::substream(seed, domain::LATENT, index_offset + i);
                l.extend(self.draw_latent(m, &mut rng));
            }
            l
        });
        let (raw, _) = self.forward(&inputs, fields.len(), per, latent)?;
        let out_dim = self.spec.output_dim();
        let natural = self.natural(&raw);
        Ok(natural
            .chunks_exact(per * out_dim)
            .map(|field| field.chunks_exact(out_dim).map(<[f64]>::to_vec).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reduced(head: HeadKind, channels: Vec<usize>) -> NetworkSpec {
        NetworkSpec {
            nx: 8,
            ny: 8,
            channels,
            dense: 16,
            head,
            theta_grid: HGrid::new(0.5, 6).unwrap(),
            noise: true,
        }
    }

    #[test]
    fn default_trunk_shapes() {
        assert_eq!(NetworkSpec::new(30, 30, HeadKind::Param).trunk_shape(), (128, 3, 3));
        assert_eq!(NetworkSpec::new(16, 16, HeadKind::Param).trunk_shape(), (128, 2, 2));
        assert!(NetworkSpec::new(4, 4, HeadKind::Param).validate().is_err());
        assert_eq!(NetworkSpec::new(30, 30, HeadKind::Theta).output_dim(), 425);
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let net = Network::new(reduced(HeadKind::Param, vec![4, 6]), 1).unwrap();
        let field: Vec<f64> = (0..64).map(|i| 0.5 + (i as f64 * 0.37).sin().abs() * 3.0).collect();
        let a = net.sample(&[&field], 7, 3, 0).unwrap();
        let b = net.sample(&[&field, &field], 7, 3, 0).unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(b[0], b[1]);
        for s in &a[0] {
            assert!(s[0] > 0.0 && s[1] > 0.0 && s[1] <= 2.0);
        }
        let theta = Network::new(reduced(HeadKind::Theta, vec![4]), 1).unwrap();
        for s in &theta.sample(&[&field], 5, 3, 0).unwrap()[0] {
            assert!(s.iter().all(|&v| v > 1.0 && v < 2.0));
        }
    }

    #[test]
    fn unit_latent_collapses_samples() {
        let net = Network::new(reduced(HeadKind::Param, vec![4]), 2).unwrap();
        let field: Vec<f64> = (0..64).map(|i| 1.0 + (i % 7) as f64).collect();
        let (raw, _) = net.forward(&preprocess(&field), 1, 4, Some(vec![1.0; 4 * 16])).unwrap();
        for row in raw.chunks_exact(2) {
            assert_eq!(row, &raw[..2]);
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let net = Network::new(reduced(HeadKind::Param, vec![4]), 2).unwrap();
        assert!(net.sample(&[&[1.0; 10]], 3, 0, 0).is_err());
        assert!(net.forward(&vec![0.0; 64], 1, 3, None).is_err());
    }
}
