//! Layer kernels for batched images.
//!
//! Activations use a channel-major layout `[C][B][H][W]`, so a 3×3
//! convolution of a whole batch is one matrix product between the
//! `Cout × 9Cin` weight matrix and the `9Cin × BHW` im2col matrix.

/// Row-major matrix product `C = op(A)·op(B) + beta·C` with `op(A)` of
/// shape `m × k` and `op(B)` of shape `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: A has wrong size");
    assert_eq!(b.len(), k * n, "gemm: B has wrong size");
    assert_eq!(c.len(), m * n, "gemm: C has wrong size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the sizes implied by the shapes and
    // strides above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial shape of one activation map batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn plane(&self) -> usize {
        self.b * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.c * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// im2col for a 3×3 kernel with zero "same" padding.
pub fn im2col3(x: &[f64], s: Shape) -> Vec<f64> {
    let Shape { c, b, h, w } = s;
    let plane = s.plane();
    let mut col = vec![0.0; 9 * c * plane];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * plane;
                for bi in 0..b {
                    let src = ci * plane + bi * h * w;
                    let dst = row + bi * h * w;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let (x0, x1) = match kx {
                            0 => (1, w),
                            1 => (0, w),
                            _ => (0, w.saturating_sub(1)),
                        };
                        let srow = src + sy as usize * w;
                        let drow = dst + y * w;
                        for xx in x0..x1 {
                            col[drow + xx] = x[srow + xx + kx - 1];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col3`]: accumulates column gradients back onto the input.
pub fn col2im3(col: &[f64], s: Shape) -> Vec<f64> {
    let Shape { c, b, h, w } = s;
    let plane = s.plane();
    let mut dx = vec![0.0; c * plane];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * plane;
                for bi in 0..b {
                    let dst = ci * plane + bi * h * w;
                    let src = row + bi * h * w;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let (x0, x1) = match kx {
                            0 => (1, w),
                            1 => (0, w),
                            _ => (0, w.saturating_sub(1)),
                        };
                        let drow = dst + sy as usize * w;
                        let srow = src + y * w;
                        for xx in x0..x1 {
                            dx[drow + xx + kx - 1] += col[srow + xx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adds a per-channel bias to a `[C][plane]` buffer.
pub fn add_bias(y: &mut [f64], bias: &[f64]) {
    let plane = y.len() / bias.len();
    for (chunk, b) in y.chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Per-channel sums of a `[C][plane]` gradient, i.e. the bias gradient.
pub fn channel_sums(dy: &[f64], channels: usize) -> Vec<f64> {
    let plane = dy.len() / channels;
    dy.chunks_exact(plane).map(|c| c.iter().sum()).collect()
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward(dy: &mut [f64], y: &[f64]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// 2×2 max-pool with stride 2 and floor semantics. Returns the pooled map
/// and the flat input index of every selected maximum.
pub fn maxpool2(x: &[f64], s: Shape) -> (Vec<f64>, Vec<usize>, Shape) {
    let out = Shape { c: s.c, b: s.b, h: s.h / 2, w: s.w / 2 };
    let mut y = Vec::with_capacity(out.len());
    let mut arg = Vec::with_capacity(out.len());
    for ci in 0..s.c {
        for bi in 0..s.b {
            let base = ci * s.plane() + bi * s.h * s.w;
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let mut best = base + 2 * oy * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    y.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (y, arg, out)
}

pub fn maxpool2_backward(dy: &[f64], arg: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

/// Reorders `[C][B][S]` into per-sample feature rows `[B][C·S]`.
pub fn flatten(x: &[f64], s: Shape) -> Vec<f64> {
    let area = s.h * s.w;
    let mut out = vec![0.0; x.len()];
    for ci in 0..s.c {
        for bi in 0..s.b {
            let src = ci * s.plane() + bi * area;
            let dst = bi * s.c * area + ci * area;
            out[dst..dst + area].copy_from_slice(&x[src..src + area]);
        }
    }
    out
}

pub fn unflatten(x: &[f64], s: Shape) -> Vec<f64> {
    let area = s.h * s.w;
    let mut out = vec![0.0; x.len()];
    for ci in 0..s.c {
        for bi in 0..s.b {
            let dst = ci * s.plane() + bi * area;
            let src = bi * s.c * area + ci * area;
            out[dst..dst + area].copy_from_slice(&x[src..src + area]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], s: Shape, w: &[f64], cout: usize) -> Vec<f64> {
        let mut y = vec![0.0; cout * s.plane()];
        for co in 0..cout {
            for bi in 0..s.b {
                for yy in 0..s.h {
                    for xx in 0..s.w {
                        let mut acc = 0.0;
                        for ci in 0..s.c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = yy as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= s.h as isize || sx >= s.w as isize {
                                        continue;
                                    }
                                    let xi = ci * s.plane() + bi * s.h * s.w + sy as usize * s.w + sx as usize;
                                    acc += w[co * 9 * s.c + ci * 9 + ky * 3 + kx] * x[xi];
                                }
                            }
                        }
                        y[co * s.plane() + bi * s.h * s.w + yy * s.w + xx] = acc;
                    }
                }
            }
        }
        y
    }

    fn seq(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * a).sin() * 1.7).round() / 2.0 + 0.1 * i as f64 % 1.3).collect()
    }

    #[test]
    fn im2col_conv_matches_direct_convolution() {
        let s = Shape { c: 2, b: 3, h: 5, w: 4 };
        let x = seq(s.len(), 0.37);
        let cout = 3;
        let w = seq(cout * 9 * s.c, 0.91);
        let col = im2col3(&x, s);
        let mut y = vec![0.0; cout * s.plane()];
        gemm(cout, 9 * s.c, s.plane(), &w, false, &col, false, 0.0, &mut y);
        let direct = naive_conv(&x, s, &w, cout);
        for (a, b) in y.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let s = Shape { c: 2, b: 2, h: 3, w: 5 };
        let x = seq(s.len(), 0.21);
        let g = seq(9 * s.len(), 0.53);
        let lhs: f64 = im2col3(&x, s).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im3(&g, s)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1, 2], [3, 4]], B = [[5, 6], [7, 8]].
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn maxpool_floor_and_routing() {
        let s = Shape { c: 1, b: 1, h: 3, w: 3 };
        let x = [1.0, 5.0, 0.0, 2.0, 3.0, 9.0, 7.0, 8.0, 6.0];
        let (y, arg, out) = maxpool2(&x, s);
        assert_eq!((out.h, out.w), (1, 1));
        assert_eq!(y, vec![5.0]);
        assert_eq!(maxpool2_backward(&[2.0], &arg, 9), vec![0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn flatten_round_trip() {
        let s = Shape { c: 3, b: 2, h: 2, w: 2 };
        let x = seq(s.len(), 0.7);
        assert_eq!(unflatten(&flatten(&x, s), s), x);
    }
}
