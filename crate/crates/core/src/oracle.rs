//! Independent reference solutions used to validate the grid solver:
//! a one-dimensional finite-difference HJB solve, Monte Carlo and
//! quadrature formulas for discounted and ergodic costs of the linear
//! process.

use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::mc::par_replicas;
use crate::model::{ControlSpec, ModelSpec};
use crate::quadrature::{standard_normal_rule, tensor_normal_rule};
use crate::rng::{fill_normals, stream};
use crate::stats::MeanSe;

/// Solution of `α v = ½ g² v'' + min_u [(b(x) + g R(u)) v' + L(x, u)]` on a
/// uniform grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdSolution {
    pub alpha: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub policy: Vec<usize>,
    pub howard_iterations: usize,
}

impl FdSolution {
    /// Piecewise-linear interpolation, clamped to the domain.
    pub fn interpolate(&self, x: f64) -> f64 {
        let n = self.x.len();
        let dx = self.x[1] - self.x[0];
        let t = ((x - self.x[0]) / dx).clamp(0.0, (n - 1) as f64);
        let i = (t.floor() as usize).min(n - 2);
        let f = t - i as f64;
        (1.0 - f) * self.v[i] + f * self.v[i + 1]
    }
}

/// Exponentially fitted diffusion `(cδ/2)·coth(cδ/2D)`; keeps the scheme
/// monotone for every Péclet number.
fn fitted_diffusion(d: f64, c: f64, dx: f64) -> f64 {
    let pe = c * dx / (2.0 * d);
    if pe.abs() < 1e-8 {
        d
    } else {
        d * pe / pe.tanh()
    }
}

/// Tridiagonal solve, `sub[0]` and `sup[n-1]` unused.
fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - sub[i] * c[i - 1];
        c[i] = if i + 1 < n { sup[i] / m } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Howard policy iteration on `[-half_width, half_width]` with reflecting
/// ends, for a scalar model `dX = (aX + F(X) + g R(u)) dt + g dW`.
pub fn fd_hjb_1d(
    model: &ModelSpec,
    drift: &dyn Fn(f64) -> f64,
    spec: &ControlSpec,
    alpha: f64,
    half_width: f64,
    nodes: usize,
) -> Result<FdSolution> {
    if model.n_modes != 1 {
        return Err(Error::Precondition("finite-difference oracle is one-dimensional".into()));
    }
    if nodes < 3 || !(alpha > 0.0) {
        return Err(Error::Precondition("need at least 3 nodes and a positive discount".into()));
    }
    let a = model.a[0];
    let g = model.g.get(0, 0);
    let diff = 0.5 * g * g;
    let dx = 2.0 * half_width / (nodes - 1) as f64;
    let x: Vec<f64> = (0..nodes).map(|i| -half_width + i as f64 * dx).collect();
    let b: Vec<f64> = x.iter().map(|&xi| a * xi + drift(xi)).collect();
    let actions: Vec<f64> = spec.r_table.iter().map(|r| g * r[0]).collect();
    let costs: Vec<Vec<f64>> = x.iter().map(|&xi| (0..spec.len()).map(|k| spec.cost(&[xi], k)).collect()).collect();

    // coefficients of v_{i-1}, v_i, v_{i+1} in the generator under control k
    let stencil = |i: usize, k: usize| -> (f64, f64, f64) {
        let c = b[i] + actions[k];
        let df = fitted_diffusion(diff, c, dx);
        let lo = df / (dx * dx) - c / (2.0 * dx);
        let hi = df / (dx * dx) + c / (2.0 * dx);
        if i == 0 {
            (0.0, -2.0 * df / (dx * dx), 2.0 * df / (dx * dx))
        } else if i == nodes - 1 {
            (2.0 * df / (dx * dx), -2.0 * df / (dx * dx), 0.0)
        } else {
            (lo, -(lo + hi), hi)
        }
    };
    let apply = |i: usize, k: usize, v: &[f64]| -> f64 {
        let (l, m, h) = stencil(i, k);
        let vl = if i > 0 { v[i - 1] } else { 0.0 };
        let vh = if i + 1 < nodes { v[i + 1] } else { 0.0 };
        l * vl + m * v[i] + h * vh + costs[i][k]
    };

    let mut policy = vec![0usize; nodes];
    let mut v = vec![0.0; nodes];
    let mut sub = vec![0.0; nodes];
    let mut diag = vec![0.0; nodes];
    let mut sup = vec![0.0; nodes];
    let mut rhs = vec![0.0; nodes];
    for iteration in 1..=500 {
        for i in 0..nodes {
            let (l, m, h) = stencil(i, policy[i]);
            sub[i] = -l;
            diag[i] = alpha - m;
            sup[i] = -h;
            rhs[i] = costs[i][policy[i]];
        }
        v = thomas(&sub, &diag, &sup, &rhs);
        let mut changed = false;
        for i in 0..nodes {
            let current = apply(i, policy[i], &v);
            for k in 0..spec.len() {
                if apply(i, k, &v) < current - 1e-12 * (1.0 + current.abs()) {
                    policy[i] = k;
                    changed = true;
                }
            }
        }
        if !changed {
            return Ok(FdSolution { alpha, x, v, policy, howard_iterations: iteration });
        }
    }
    Err(Error::NotConverged { iterations: 500, residual: f64::NAN })
}

/// Mean and covariance of the linear process at time `t` from `x`.
pub fn ou_marginal(model: &ModelSpec, x: &[f64], t: f64) -> (Vec<f64>, Mat) {
    let n = model.n_modes;
    let mean = (0..n).map(|i| (model.a[i] * t).exp() * x[i]).collect();
    let ggt = model.g.matmul(&model.g.transpose());
    let cov = Mat::from_fn(n, |i, j| {
        let s = model.a[i] + model.a[j];
        ggt.get(i, j) * (s * t).exp_m1() / s
    });
    (mean, cov)
}

/// `∫_0^∞ e^{-αt} E φ(U^x_t) dt` by Monte Carlo: with `τ ~ Exp(α)`
/// independent of the path this equals `E φ(U^x_τ) / α`, and `U^x_τ` is
/// sampled exactly from its Gaussian marginal.
pub fn ou_discounted_mc(
    model: &ModelSpec,
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    alpha: f64,
    x: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<MeanSe> {
    let exp = Exp::new(alpha).map_err(|e| Error::Precondition(e.to_string()))?;
    let n = model.n_modes;
    let samples = par_replicas(n_mc, |i| {
        let mut rng = stream(seed, i as u64);
        let tau: f64 = exp.sample(&mut rng);
        let (mean, cov) = ou_marginal(model, x, tau);
        let l = cov.cholesky().unwrap_or_else(|| Mat::zeros(n));
        let mut eta = vec![0.0; n];
        fill_normals(&mut rng, &mut eta);
        let shock = l.mul_vec(&eta);
        let p: Vec<f64> = mean.iter().zip(&shock).map(|(m, s)| m + s).collect();
        phi(&p) / alpha
    });
    Ok(MeanSe::from_samples(&samples))
}

/// Same quantity by deterministic quadrature when `φ` depends on one
/// coordinate only. Time is mapped to `s = 1 - e^{-αt}` and integrated by
/// Gauss–Legendre, space by Gauss–Hermite.
pub fn ou_discounted_quadrature(
    model: &ModelSpec,
    phi: &dyn Fn(f64) -> f64,
    coordinate: usize,
    alpha: f64,
    x: &[f64],
) -> f64 {
    let (s_nodes, s_weights) = crate::quadrature::composite_legendre(200);
    let gh = standard_normal_rule(40);
    let mut acc = 0.0;
    for (s, w) in s_nodes.iter().zip(&s_weights) {
        let t = -(1.0 - s).ln() / alpha;
        let (mean, cov) = ou_marginal(model, x, t);
        let sd = cov.get(coordinate, coordinate).max(0.0).sqrt();
        let e: f64 = gh.iter().map(|(z, wz)| wz * phi(mean[coordinate] + sd * z)).sum();
        // dt = ds / (α (1 - s)), e^{-αt} = 1 - s
        acc += w * e / alpha;
    }
    acc
}

/// `∫ φ dμ` for the invariant Gaussian law of the linear process.
pub fn gaussian_stationary_mean(model: &ModelSpec, phi: &dyn Fn(&[f64]) -> f64, points_per_dim: usize) -> f64 {
    let n = model.n_modes;
    let l = model.stationary_cov().cholesky().expect("stationary covariance is positive definite");
    let (nodes, weights) = tensor_normal_rule(n, points_per_dim);
    nodes.chunks(n).zip(&weights).map(|(z, w)| w * phi(&l.mul_vec(z))).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar() -> ModelSpec {
        ModelSpec::new(vec![-1.0], Mat::identity(1)).unwrap()
    }

    #[test]
    fn thomas_solves_tridiagonal() {
        let x = thomas(&[0.0, 1.0, 1.0], &[4.0, 4.0, 4.0], &[1.0, 1.0, 0.0], &[5.0, 6.0, 5.0]);
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn fd_constant_cost() {
        let spec = ControlSpec::new(vec![vec![0.0]], |_| vec![0.0], |_, _| 0.7, 1.0).unwrap();
        let sol = fd_hjb_1d(&scalar(), &|_| 0.0, &spec, 0.1, 3.0, 101).unwrap();
        assert!(sol.v.iter().all(|v| (v - 7.0).abs() < 1e-10));
    }

    #[test]
    fn fd_linear_cost_matches_closed_form() {
        // L = x, dX = -X dt + dW: v(x) = x / (1 + α)
        let spec = ControlSpec::new(vec![vec![0.0]], |_| vec![0.0], |x, _| x[0], 10.0).unwrap();
        let sol = fd_hjb_1d(&scalar(), &|_| 0.0, &spec, 0.5, 6.0, 601).unwrap();
        for x in [-1.0, 0.0, 0.7] {
            assert!((sol.interpolate(x) - x / 1.5).abs() < 1e-3);
        }
    }

    #[test]
    fn discounted_quadrature_of_linear_function() {
        let m = scalar();
        let v = ou_discounted_quadrature(&m, &|y| y, 0, 0.5, &[1.2]);
        assert!((v - 1.2 / 1.5).abs() < 1e-10);
    }

    #[test]
    fn stationary_second_moment() {
        let m = ModelSpec::new(vec![-1.0, -4.0], Mat::identity(2)).unwrap();
        let v = gaussian_stationary_mean(&m, &|x| x[1] * x[1], 4);
        assert!((v - 0.125).abs() < 1e-14);
    }
}
