//! Derivative-free simplex search and BFGS for the small problems in this
//! crate (pairwise-likelihood and GEV fits, at most a handful of dimensions).

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Gradient norm at `x` (BFGS only).
    pub grad_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct NelderMead {
    pub initial_step: f64,
    pub max_iter: usize,
    pub f_tol: f64,
    pub x_tol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead { initial_step: 0.5, max_iter: 500, f_tol: 1e-10, x_tol: 1e-6 }
    }
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

impl NelderMead {
    pub fn minimize(&self, f: impl Fn(&[f64]) -> f64, x0: &[f64]) -> Minimum {
        let n = x0.len();
        let eval = |x: &[f64]| finite_or_inf(f(x));
        let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
        for i in 0..n {
            let mut x = x0.to_vec();
            x[i] += self.initial_step;
            simplex.push(x);
        }
        let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();
        let mut iterations = 0;
        let mut converged = false;
        while iterations < self.max_iter {
            iterations += 1;
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let spread = (values[n] - values[0]).abs();
            let size = simplex[1..]
                .iter()
                .flat_map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if values[0].is_finite() && spread <= self.f_tol * (1.0 + values[0].abs()) && size <= self.x_tol {
                converged = true;
                break;
            }

            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|x| x[j]).sum::<f64>() / n as f64)
                .collect();
            let along = |t: f64| -> Vec<f64> {
                centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (w - c)).collect()
            };
            let xr = along(-1.0);
            let fr = eval(&xr);
            if fr < values[0] {
                let xe = along(-2.0);
                let fe = eval(&xe);
                if fe < fr {
                    simplex[n] = xe;
                    values[n] = fe;
                } else {
                    simplex[n] = xr;
                    values[n] = fr;
                }
            } else if fr < values[n - 1] {
                simplex[n] = xr;
                values[n] = fr;
            } else {
                let (xc, fc) = if fr < values[n] {
                    let xc = along(-0.5);
                    let fc = eval(&xc);
                    (xc, fc)
                } else {
                    let xc = along(0.5);
                    let fc = eval(&xc);
                    (xc, fc)
                };
                if fc < values[n].min(fr) {
                    simplex[n] = xc;
                    values[n] = fc;
                } else {
                    let best = simplex[0].clone();
                    for i in 1..=n {
                        simplex[i] = simplex[i].iter().zip(&best).map(|(x, b)| b + 0.5 * (x - b)).collect();
                        values[i] = eval(&simplex[i]);
                    }
                }
            }
        }
        let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
        Minimum {
            x: simplex[best].clone(),
            value: values[best],
            iterations,
            converged,
            grad_norm: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Bfgs {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for Bfgs {
    fn default() -> Self {
        Bfgs { max_iter: 500, grad_tol: 1e-8 }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl Bfgs {
    /// Minimizes `fg`, which returns the value and gradient at a point.
    pub fn minimize(&self, fg: impl Fn(&[f64]) -> (f64, Vec<f64>), x0: &[f64]) -> Minimum {
        let n = x0.len();
        let mut x = x0.to_vec();
        let (mut fx, mut g) = fg(&x);
        // Inverse Hessian approximation, row-major.
        let mut hinv = vec![0.0; n * n];
        for i in 0..n {
            hinv[i * n + i] = 1.0;
        }
        let mut iterations = 0;
        let mut converged = norm(&g) <= self.grad_tol;
        let mut scaled_first = false;
        while !converged && iterations < self.max_iter {
            iterations += 1;
            let mut dir: Vec<f64> = (0..n).map(|i| -dot(&hinv[i * n..(i + 1) * n], &g)).collect();
            let mut slope = dot(&dir, &g);
            if !(slope < 0.0) {
                // Not a descent direction: restart from steepest descent.
                for i in 0..n {
                    for j in 0..n {
                        hinv[i * n + j] = if i == j { 1.0 } else { 0.0 };
                    }
                }
                dir = g.iter().map(|v| -v).collect();
                slope = dot(&dir, &g);
            }
            // Backtracking line search with Armijo condition.
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
                let (fnew, gnew) = fg(&xn);
                if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
                step *= 0.5;
            }
            let Some((xn, fnew, gnew)) = accepted else {
                break;
            };
            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * norm(&s) * norm(&y) {
                if !scaled_first {
                    let scale = sy / dot(&y, &y);
                    for v in hinv.iter_mut() {
                        *v *= scale;
                    }
                    scaled_first = true;
                }
                let rho = 1.0 / sy;
                let hy: Vec<f64> = (0..n).map(|i| dot(&hinv[i * n..(i + 1) * n], &y)).collect();
                let yhy = dot(&y, &hy);
                for i in 0..n {
                    for j in 0..n {
                        hinv[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                    }
                }
            }
            let f_change = (fx - fnew).abs();
            x = xn;
            fx = fnew;
            g = gnew;
            if norm(&g) <= self.grad_tol || f_change <= 1e-15 * (1.0 + fx.abs()) && norm(&g) <= self.grad_tol.sqrt() {
                converged = true;
            }
        }
        let grad_norm = norm(&g);
        Minimum { x, value: fx, iterations, converged, grad_norm: Some(grad_norm) }
    }
}
