//! Discounted backward equation in Markovian form.
//!
//! The value `v^α` is the fixed point of the one-step operator
//!
//! ```text
//! (𝒯v)(x) = e^{-αh} E v(X_h) + E ∫_0^h e^{-αs} ψ(X_s, ∇v(X_s) G) ds
//! ```
//!
//! on a tensor grid, with `X_h` drawn from one exponential-Euler step of size
//! `h` and the time integral replaced by the trapezoid rule with exact
//! exponential weights, so that `ψ ≡ c` gives `c/α` to round-off.
//!
//! For drivers built from a control set, [`OperatorForm::Controlled`]
//! selects the equivalent controlled form
//!
//! ```text
//! (𝒯v)(x) = min_u [ e^{-αh} E v(X_h^u) + (1 − e^{-αh})/α · L(x, u) ]
//! ```
//!
//! where `X_h^u` carries the extra drift `G r(u)` inside the step.

use std::io::{Read, Write};

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{read_f64s, read_u32, Scheme};
use crate::linalg::{dot, norm, Mat};
use crate::mc::par_replicas;
use crate::model::{DriftField, DriverSpec, ModelSpec};
use crate::quadrature::tensor_normal_rule;
use crate::rng::{fill_normals, stream};
use crate::stats::MeanSe;

/// Tensor grid on the box `[-half_width_d, half_width_d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub half_width: Vec<f64>,
    pub nodes: Vec<usize>,
}

impl GridSpec {
    pub fn new(half_width: Vec<f64>, nodes: Vec<usize>) -> Result<Self> {
        if half_width.len() != nodes.len() || nodes.is_empty() {
            return Err(Error::Config("grid box and node counts must have the same positive length".into()));
        }
        if nodes.iter().any(|&n| n < 2) || half_width.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config("grid needs at least 2 nodes and a positive half-width per dimension".into()));
        }
        Ok(Self { half_width, nodes })
    }

    pub fn uniform(half_width: Vec<f64>, nodes_per_dim: usize) -> Result<Self> {
        let n = half_width.len();
        Self::new(half_width, vec![nodes_per_dim; n])
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell(&self, d: usize) -> f64 {
        2.0 * self.half_width[d] / (self.nodes[d] - 1) as f64
    }

    pub fn max_cell(&self) -> f64 {
        (0..self.dim()).map(|d| self.cell(d)).fold(0.0, f64::max)
    }

    /// Coordinates of node `flat`; the last dimension varies fastest.
    pub fn point_into(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for d in (0..self.dim()).rev() {
            let i = rem % self.nodes[d];
            rem /= self.nodes[d];
            out[d] = -self.half_width[d] + i as f64 * self.cell(d);
        }
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.point_into(flat, &mut p);
        p
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.half_width).all(|(v, b)| v.abs() <= *b)
    }

    /// Index of the node nearest to `x`.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut flat = 0;
        for d in 0..self.dim() {
            let t = ((x[d] + self.half_width[d]) / self.cell(d)).round();
            let i = t.clamp(0.0, (self.nodes[d] - 1) as f64) as usize;
            flat = flat * self.nodes[d] + i;
        }
        flat
    }
}

/// Grid representation of a value function with multilinear interpolation
/// and constant extrapolation outside the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub alpha: f64,
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl ValueFunction {
    pub fn new(alpha: f64, grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Format(format!("{} values for a grid of {} nodes", values.len(), grid.len())));
        }
        Ok(Self { alpha, grid, values })
    }

    pub fn constant(alpha: f64, grid: GridSpec, c: f64) -> Self {
        let values = vec![c; grid.len()];
        Self { alpha, grid, values }
    }

    pub fn from_fn(alpha: f64, grid: GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.point(i))).collect();
        Self { alpha, grid, values }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn interpolate(&self, x: &[f64]) -> f64 {
        interpolate(&self.grid, &self.values, x)
    }

    /// `∇v(x)`; callers multiply by `G` for the `Z` field.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        gradient_into(&self.grid, &self.values, x, &mut g);
        g
    }

    /// `∇v(x) G`
    pub fn z_field(&self, model: &ModelSpec, x: &[f64]) -> Vec<f64> {
        model.g.vec_mul(&self.gradient(x))
    }

    pub fn max_abs_diff(&self, other: &ValueFunction) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self { values: self.values.iter().map(|v| v + c).collect(), ..self.clone() }
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(VF_MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.grid.dim() as u32).to_le_bytes())?;
        w.write_all(&self.alpha.to_le_bytes())?;
        for b in &self.grid.half_width {
            w.write_all(&b.to_le_bytes())?;
        }
        for n in &self.grid.nodes {
            w.write_all(&(*n as u32).to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != VF_MAGIC {
            return Err(Error::Format("not a value-function dump".into()));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported value-function version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let alpha = read_f64s(&mut r, 1)?[0];
        let half_width = read_f64s(&mut r, dim)?;
        let nodes = (0..dim).map(|_| read_u32(&mut r).map(|n| n as usize)).collect::<Result<Vec<_>>>()?;
        let grid = GridSpec::new(half_width, nodes)?;
        let values = read_f64s(&mut r, grid.len())?;
        Self::new(alpha, grid, values)
    }

    /// CSV with header `x_1,...,x_N,value` (one row per node), for `N ≤ 2`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        if self.grid.dim() > 2 {
            return Err(Error::Precondition("CSV export is limited to N <= 2".into()));
        }
        let header: Vec<String> = (1..=self.grid.dim()).map(|k| format!("x_{k}")).collect();
        writeln!(w, "{},value", header.join(","))?;
        let mut p = vec![0.0; self.grid.dim()];
        for (i, v) in self.values.iter().enumerate() {
            self.grid.point_into(i, &mut p);
            let coords: Vec<String> = p.iter().map(|c| format!("{c:?}")).collect();
            writeln!(w, "{},{v:?}", coords.join(","))?;
        }
        Ok(())
    }
}

const VF_MAGIC: &[u8; 4] = b"EGVF";

/// Largest grid dimension handled by the interpolation kernels.
pub const MAX_DIM: usize = 6;
const MAX_CORNERS: usize = 1 << MAX_DIM;
/// Largest dimension interpolated with cubic weights.
const CUBIC_MAX_DIM: usize = 3;

fn strides(grid: &GridSpec) -> [usize; MAX_DIM] {
    let mut stride = [0usize; MAX_DIM];
    let mut s = 1usize;
    for d in (0..grid.dim()).rev() {
        stride[d] = s;
        s *= grid.nodes[d];
    }
    stride
}

fn stencil_size(grid: &GridSpec) -> usize {
    if uses_cubic(grid) {
        1 << (2 * grid.dim())
    } else {
        1 << grid.dim()
    }
}

/// Whether [`stencil_into`] uses tensor cubic weights on this grid.
pub fn uses_cubic(grid: &GridSpec) -> bool {
    grid.dim() <= CUBIC_MAX_DIM && grid.nodes.iter().all(|&n| n >= 4)
}

/// Corner indices and weights of the multilinear stencil at `x`, clamped to
/// the box. The weights are nonnegative. Returns the number of corners.
pub fn linear_stencil_into(grid: &GridSpec, x: &[f64], idx: &mut [usize], w: &mut [f64]) -> usize {
    let dim = grid.dim();
    let stride = strides(grid);
    let mut base = 0usize;
    let mut frac = [0.0f64; MAX_DIM];
    for d in 0..dim {
        let n = grid.nodes[d];
        let t = ((x[d] + grid.half_width[d]) / grid.cell(d)).clamp(0.0, (n - 1) as f64);
        let i = (t.floor() as usize).min(n - 2);
        frac[d] = t - i as f64;
        base += i * stride[d];
    }
    let corners = 1usize << dim;
    for corner in 0..corners {
        let mut wc = 1.0;
        let mut k = base;
        for d in 0..dim {
            if corner >> d & 1 == 1 {
                wc *= frac[d];
                k += stride[d];
            } else {
                wc *= 1.0 - frac[d];
            }
        }
        idx[corner] = k;
        w[corner] = wc;
    }
    corners
}

/// Interpolation stencil at `x`, clamped to the box: tensor four-point
/// Lagrange weights when [`uses_cubic`] holds, multilinear otherwise.
/// Returns the number of entries written.
pub fn stencil_into(grid: &GridSpec, x: &[f64], idx: &mut [usize], w: &mut [f64]) -> usize {
    if !uses_cubic(grid) {
        return linear_stencil_into(grid, x, idx, w);
    }
    let dim = grid.dim();
    let stride = strides(grid);
    let mut start = [0usize; MAX_DIM];
    let mut lw = [[0.0f64; 4]; MAX_DIM];
    for d in 0..dim {
        let n = grid.nodes[d];
        let t = ((x[d] + grid.half_width[d]) / grid.cell(d)).clamp(0.0, (n - 1) as f64);
        let i0 = (t.floor() as usize).saturating_sub(1).min(n - 4);
        let s = t - i0 as f64;
        let (a, b, c, e) = (s, s - 1.0, s - 2.0, s - 3.0);
        lw[d] = [-b * c * e / 6.0, a * c * e / 2.0, -a * b * e / 2.0, a * b * c / 6.0];
        start[d] = i0;
    }
    let count = 1usize << (2 * dim);
    for entry in 0..count {
        let mut wc = 1.0;
        let mut k = 0usize;
        for d in 0..dim {
            let o = entry >> (2 * d) & 3;
            wc *= lw[d][o];
            k += (start[d] + o) * stride[d];
        }
        idx[entry] = k;
        w[entry] = wc;
    }
    count
}

/// Interpolation of grid values at `x` with the weights of [`stencil_into`].
pub fn interpolate(grid: &GridSpec, values: &[f64], x: &[f64]) -> f64 {
    let mut idx = [0usize; MAX_CORNERS];
    let mut w = [0.0f64; MAX_CORNERS];
    let c = stencil_into(grid, x, &mut idx, &mut w);
    (0..c).map(|k| w[k] * values[idx[k]]).sum()
}

/// Central differences with a one-cell step, one-sided within a cell of the
/// boundary. Points outside the box are first clamped onto it.
pub fn gradient_into(grid: &GridSpec, values: &[f64], x: &[f64], out: &mut [f64]) {
    let dim = grid.dim();
    let mut p = [0.0f64; MAX_DIM];
    for d in 0..dim {
        p[d] = x[d].clamp(-grid.half_width[d], grid.half_width[d]);
    }
    for d in 0..dim {
        let h = grid.cell(d);
        let b = grid.half_width[d];
        let c = p[d];
        let (lo, hi) = ((c - h).max(-b), (c + h).min(b));
        p[d] = hi;
        let vh = interpolate(grid, values, &p[..dim]);
        p[d] = lo;
        let vl = interpolate(grid, values, &p[..dim]);
        p[d] = c;
        out[d] = (vh - vl) / (hi - lo);
    }
}

/// Conditional expectation rule for one step of the forward scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InnerRule {
    /// Tensor Gauss–Hermite nodes mapped through the step covariance.
    GaussHermite { points_per_dim: usize },
    /// Fixed Monte Carlo sample shared by every node and sweep; made
    /// antithetic and whitened so its first two moments are exact.
    MonteCarlo { n_mc: usize, seed: u64 },
}

impl Default for InnerRule {
    fn default() -> Self {
        InnerRule::GaussHermite { points_per_dim: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverParams {
    /// DP time step.
    pub h: f64,
    pub inner: InnerRule,
    pub tol: f64,
    pub max_iter: usize,
    /// Overrides the automatic sweep damping.
    #[serde(default)]
    pub relaxation: Option<f64>,
    #[serde(default)]
    pub form: OperatorForm,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            h: 1e-2,
            inner: InnerRule::default(),
            tol: 1e-6,
            max_iter: 50_000,
            relaxation: None,
            form: OperatorForm::default(),
        }
    }
}

/// Which one-step operator the solver iterates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorForm {
    /// `ψ(·, ∇v G)` along the uncontrolled step.
    #[default]
    Hamiltonian,
    /// Minimum over controls of the controlled step; needs a control-built
    /// driver.
    Controlled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_change: f64,
    /// Geometric mean of successive change ratios once the change is below
    /// `10·tol`.
    pub contraction_ratio: Option<f64>,
    pub discount_factor: f64,
    /// Damping factor applied to each sweep.
    pub relaxation: f64,
    /// Stationary probability that one DP step leaves the box.
    pub exit_fraction: f64,
    pub coverage_warning: bool,
    pub sup_norm: f64,
    pub bound: f64,
    pub bound_ok: bool,
}

#[derive(Debug, Clone)]
pub struct DiscountedSolution {
    pub vf: ValueFunction,
    pub report: SolveReport,
}

/// Cap on cached stencil entries; larger problems interpolate on the fly.
const STENCIL_CACHE_LIMIT: usize = 20_000_000;

/// Precomputed interpolation and gradient weights at fixed points.
struct Stencils {
    per_point: usize,
    corners: usize,
    idx: Vec<u32>,
    w: Vec<f64>,
}

impl Stencils {
    fn build(grid: &GridSpec, points: &[f64], with_gradient: bool) -> Self {
        let dim = grid.dim();
        let corners = stencil_size(grid);
        let per_point = if with_gradient { corners * (1 + 2 * dim) } else { corners };
        let count = points.len() / dim;
        let mut idx = vec![0u32; count * per_point];
        let mut w = vec![0.0; count * per_point];
        idx.par_chunks_mut(per_point).zip(w.par_chunks_mut(per_point)).enumerate().for_each(|(q, (ix, wx))| {
            let x = &points[q * dim..(q + 1) * dim];
            let mut ci = [0usize; MAX_CORNERS];
            let mut cw = [0.0f64; MAX_CORNERS];
            stencil_into(grid, x, &mut ci, &mut cw);
            for k in 0..corners {
                ix[k] = ci[k] as u32;
                wx[k] = cw[k];
            }
            if !with_gradient {
                return;
            }
            let mut p = [0.0f64; MAX_DIM];
            for d in 0..dim {
                p[d] = x[d].clamp(-grid.half_width[d], grid.half_width[d]);
            }
            for d in 0..dim {
                let (h, b, c) = (grid.cell(d), grid.half_width[d], p[d]);
                let (lo, hi) = ((c - h).max(-b), (c + h).min(b));
                let base = corners + 2 * d * corners;
                for (side, (at, sign)) in [(hi, 1.0), (lo, -1.0)].into_iter().enumerate() {
                    p[d] = at;
                    stencil_into(grid, &p[..dim], &mut ci, &mut cw);
                    for k in 0..corners {
                        ix[base + side * corners + k] = ci[k] as u32;
                        wx[base + side * corners + k] = sign * cw[k] / (hi - lo);
                    }
                }
                p[d] = c;
            }
        });
        Self { per_point, corners, idx, w }
    }

    #[inline]
    fn value(&self, q: usize, values: &[f64]) -> f64 {
        let base = q * self.per_point;
        let mut v = 0.0;
        for k in base..base + self.corners {
            v += self.w[k] * values[self.idx[k] as usize];
        }
        v
    }

    #[inline]
    fn eval(&self, q: usize, values: &[f64], grad: &mut [f64]) -> f64 {
        let base = q * self.per_point;
        let ix = &self.idx[base..base + self.per_point];
        let wx = &self.w[base..base + self.per_point];
        let c = self.corners;
        let mut v = 0.0;
        for k in 0..c {
            v += wx[k] * values[ix[k] as usize];
        }
        for (d, g) in grad.iter_mut().enumerate() {
            let s = c + 2 * d * c;
            let mut acc = 0.0;
            for k in s..s + 2 * c {
                acc += wx[k] * values[ix[k] as usize];
            }
            *g = acc;
        }
        v
    }
}

/// Precomputed pieces of `𝒯` that do not depend on `v`.
///
/// Points are numbered nodes first, then the inner sample points of node
/// `i` and branch `b` at `len + (i·B + b)·J + j`. Control-built drivers have
/// one branch per control, other drivers a single branch.
struct Operator<'a> {
    grid: &'a GridSpec,
    driver: &'a DriverSpec,
    model: &'a ModelSpec,
    branches: usize,
    controlled: bool,
    /// Coordinates of every point, `n_modes` entries each.
    points: Vec<f64>,
    weights: Vec<f64>,
    stencils: Option<Stencils>,
    /// Controlled form: discounted running cost per node and control.
    /// Hamiltonian form: `L(p, u)` per point and control when cached.
    costs: Vec<f64>,
    beta: f64,
    w0: f64,
    w1: f64,
}

impl<'a> Operator<'a> {
    fn new(
        model: &'a ModelSpec,
        drift: &DriftField,
        driver: &'a DriverSpec,
        alpha: f64,
        grid: &'a GridSpec,
        params: &SolverParams,
    ) -> Result<Self> {
        let n = model.n_modes;
        let h = params.h;
        let scheme = Scheme::new(model, h)?;
        let (etas, weights) = match params.inner {
            InnerRule::GaussHermite { points_per_dim } => tensor_normal_rule(n, points_per_dim),
            InnerRule::MonteCarlo { n_mc, seed } => {
                let etas = matched_sample(n, n_mc, seed)?;
                let m = etas.len() / n;
                (etas, vec![1.0 / m as f64; m])
            }
        };
        let mut offsets = vec![0.0; etas.len()];
        if model.noise {
            for (eta, o) in etas.chunks(n).zip(offsets.chunks_mut(n)) {
                scheme.chol.mul_vec_into(eta, o);
            }
        }
        let control = driver.control();
        if params.form == OperatorForm::Controlled && control.is_none() {
            return Err(Error::Precondition("the controlled form needs a driver built from a control set".into()));
        }
        let controlled = params.form == OperatorForm::Controlled && driver.constant_value().is_none();
        let shifts: Vec<Vec<f64>> = match control {
            Some(spec) if controlled => spec
                .r_table
                .iter()
                .map(|r| {
                    let mut g = vec![0.0; n];
                    model.g.mul_vec_into(r, &mut g);
                    g
                })
                .collect(),
            _ => vec![vec![0.0; n]],
        };
        let branches = shifts.len();
        let len = grid.len();
        let inner = weights.len();
        let block = branches * inner * n;
        let mut points = vec![0.0; (len + len * branches * inner) * n];
        let (nodes, samples) = points.split_at_mut(len * n);
        nodes.par_chunks_mut(n).enumerate().for_each(|(i, x)| grid.point_into(i, x));
        samples.par_chunks_mut(block).enumerate().for_each(|(i, chunk)| {
            let x = grid.point(i);
            let f = drift.eval(&x);
            let mut m = vec![0.0; n];
            for (shift, part) in shifts.iter().zip(chunk.chunks_mut(inner * n)) {
                for d in 0..n {
                    m[d] = scheme.decay[d] * (x[d] + h * (f[d] + shift[d]));
                }
                for (p, o) in part.chunks_mut(n).zip(offsets.chunks(n)) {
                    for d in 0..n {
                        p[d] = m[d] + o[d];
                    }
                }
            }
        });
        let total = len * (1 + branches * inner);
        let corners = stencil_size(grid);
        let per_point = if controlled { corners } else { corners * (1 + 2 * n) };
        let stencils =
            (total * per_point <= STENCIL_CACHE_LIMIT).then(|| Stencils::build(grid, &points, !controlled));
        let beta = (-alpha * h).exp();
        let w1 = (1.0 - beta * (1.0 + alpha * h)) / (alpha * alpha * h);
        let w0 = -(-alpha * h).exp_m1() / alpha - w1;
        let costs = match control {
            Some(spec) if controlled => {
                let mut c = vec![0.0; len * branches];
                c.par_chunks_mut(branches).enumerate().for_each(|(i, row)| {
                    let x = &points[i * n..(i + 1) * n];
                    for (u, r) in row.iter_mut().enumerate() {
                        *r = (w0 + w1) * spec.cost(x, u);
                    }
                });
                c
            }
            Some(spec) if driver.constant_value().is_none() && total * spec.len() <= STENCIL_CACHE_LIMIT => {
                let k = spec.len();
                let mut c = vec![0.0; total * k];
                c.par_chunks_mut(k).enumerate().for_each(|(q, row)| {
                    let p = &points[q * n..(q + 1) * n];
                    for (u, r) in row.iter_mut().enumerate() {
                        *r = spec.cost(p, u);
                    }
                });
                c
            }
            _ => Vec::new(),
        };
        Ok(Self { grid, driver, model, branches, controlled, points, weights, stencils, costs, beta, w0, w1 })
    }

    fn inner(&self) -> usize {
        self.weights.len()
    }

    fn point(&self, q: usize) -> &[f64] {
        let n = self.model.n_modes;
        &self.points[q * n..(q + 1) * n]
    }

    fn sample(&self, i: usize, branch: usize, j: usize) -> usize {
        self.grid.len() + (i * self.branches + branch) * self.inner() + j
    }

    /// Probability that one step leaves the box, with the start node drawn
    /// from `pi` and the branch from `policy`.
    fn exit_fraction(&self, pi: &[f64], policy: &[u32]) -> f64 {
        (0..self.grid.len())
            .map(|i| {
                let out: f64 = (0..self.inner())
                    .filter(|&j| !self.grid.contains(self.point(self.sample(i, policy[i] as usize, j))))
                    .map(|j| self.weights[j])
                    .sum();
                pi[i] * out
            })
            .sum()
    }

    #[inline]
    fn value(&self, q: usize, values: &[f64]) -> f64 {
        match &self.stencils {
            Some(s) => s.value(q, values),
            None => interpolate(self.grid, values, self.point(q)),
        }
    }

    #[inline]
    fn value_and_gradient(&self, q: usize, values: &[f64], grad: &mut [f64]) -> f64 {
        match &self.stencils {
            Some(s) => s.eval(q, values, grad),
            None => {
                let p = self.point(q);
                gradient_into(self.grid, values, p, grad);
                interpolate(self.grid, values, p)
            }
        }
    }

    #[inline]
    fn psi(&self, q: usize, z: &[f64]) -> f64 {
        match self.driver.control() {
            Some(spec) if !self.costs.is_empty() => {
                let k = spec.len();
                let mut best = f64::INFINITY;
                for (c, r) in self.costs[q * k..(q + 1) * k].iter().zip(&spec.r_table) {
                    best = best.min(c + dot(z, r));
                }
                best
            }
            _ => self.driver.eval(self.point(q), z),
        }
    }

    /// Invariant law of the interpolated transition kernel on the grid under
    /// `policy`, by power iteration on the transposed kernel.
    fn stationary_weights(&self, policy: &[u32], start: Option<Vec<f64>>, tol: f64, max_iter: usize) -> Vec<f64> {
        let len = self.grid.len();
        let inner = self.inner();
        let rows: Vec<Vec<(usize, f64)>> = (0..len)
            .into_par_iter()
            .map(|i| {
                let mut idx = [0usize; MAX_CORNERS];
                let mut w = [0.0f64; MAX_CORNERS];
                let mut row: Vec<(usize, f64)> = Vec::new();
                for j in 0..inner {
                    let c = linear_stencil_into(self.grid, self.point(self.sample(i, policy[i] as usize, j)), &mut idx, &mut w);
                    for k in 0..c {
                        if w[k] != 0.0 {
                            row.push((idx[k], self.weights[j] * w[k]));
                        }
                    }
                }
                row.sort_by_key(|e| e.0);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
                for (j, q) in row {
                    match merged.last_mut() {
                        Some(last) if last.0 == j => last.1 += q,
                        _ => merged.push((j, q)),
                    }
                }
                merged
            })
            .collect();
        let mut pi = start.filter(|p| p.len() == len).unwrap_or_else(|| vec![1.0 / len as f64; len]);
        let mut next = vec![0.0; len];
        for _ in 0..max_iter {
            next.iter_mut().for_each(|v| *v = 0.0);
            for (i, row) in rows.iter().enumerate() {
                for &(j, q) in row {
                    next[j] += pi[i] * q;
                }
            }
            let total: f64 = next.iter().sum();
            let mut change: f64 = 0.0;
            for (p, q) in pi.iter_mut().zip(&next) {
                let q = q / total;
                change += (q - *p).abs();
                *p = q;
            }
            if change < tol {
                break;
            }
        }
        pi
    }

    /// Applies `𝒯` to `values`, writing into `out` and the minimizing branch
    /// into `policy`.
    fn apply(&self, values: &[f64], out: &mut [f64], policy: &mut [u32]) {
        let n = self.model.n_modes;
        let inner = self.inner();
        let constant = self.driver.constant_value();
        out.par_iter_mut().zip(policy.par_iter_mut()).enumerate().for_each(|(i, (o, pol))| {
            if self.controlled {
                let mut best = f64::INFINITY;
                for b in 0..self.branches {
                    let base = self.sample(i, b, 0);
                    let ev: f64 = (0..inner).map(|j| self.weights[j] * self.value(base + j, values)).sum();
                    let v = self.beta * ev + self.costs[i * self.branches + b];
                    if v < best {
                        best = v;
                        *pol = b as u32;
                    }
                }
                *o = best;
                return;
            }
            let mut grad = [0.0f64; MAX_DIM];
            let mut z = [0.0f64; MAX_DIM];
            let (grad, z) = (&mut grad[..n], &mut z[..n]);
            let mut ev = 0.0;
            let mut epsi = 0.0;
            for j in 0..inner {
                let q = self.sample(i, 0, j);
                let wj = self.weights[j];
                if constant.is_some() {
                    ev += wj * self.value(q, values);
                } else {
                    ev += wj * self.value_and_gradient(q, values, grad);
                    self.model.g.vec_mul_into(grad, z);
                    epsi += wj * self.psi(q, z);
                }
            }
            let running = match constant {
                Some(c) => (self.w0 + self.w1) * c,
                None => {
                    self.value_and_gradient(i, values, grad);
                    self.model.g.vec_mul_into(grad, z);
                    self.w0 * self.psi(i, z) + self.w1 * epsi
                }
            };
            *o = self.beta * ev + running;
        });
    }
}

/// `2·⌈n_mc/2⌉` standard normal vectors in antithetic pairs, transformed so
/// that the sample second moment is exactly the identity.
fn matched_sample(n: usize, n_mc: usize, seed: u64) -> Result<Vec<f64>> {
    let pairs = n_mc.div_ceil(2);
    if 2 * pairs < 2 * n {
        return Err(Error::Precondition(format!("inner Monte Carlo needs at least {} samples", 2 * n)));
    }
    let mut rng = stream(seed, 0);
    let mut half = vec![0.0; pairs * n];
    fill_normals(&mut rng, &mut half);
    let mut second = Mat::zeros(n);
    for eta in half.chunks(n) {
        for i in 0..n {
            for j in 0..n {
                second.set(i, j, second.get(i, j) + eta[i] * eta[j] / pairs as f64);
            }
        }
    }
    let k = second
        .cholesky()
        .ok_or_else(|| Error::Precondition("inner Monte Carlo sample is degenerate".into()))?;
    let mut etas = Vec::with_capacity(2 * pairs * n);
    let mut w = vec![0.0; n];
    for eta in half.chunks(n) {
        k.solve_lower_into(eta, &mut w);
        etas.extend_from_slice(&w);
    }
    for i in 0..pairs * n {
        etas.push(-etas[i]);
    }
    Ok(etas)
}

/// Sweeps between refreshes of the shift weights while the policy moves.
const PI_REFRESH: usize = 25;

/// Solves for `v^α` by shifted value iteration.
///
/// Each sweep is followed by a constant shift `β/(1-β)·δ`, where `δ` is the
/// change averaged against the invariant law of the grid transition kernel
/// under the current policy.
/// Because `𝒯(v + c) = 𝒯v + βc`, the shift removes the slowly decaying
/// constant mode without moving the fixed point.
#[allow(clippy::too_many_arguments)]
pub fn solve_discounted(
    model: &ModelSpec,
    drift: &DriftField,
    driver: &DriverSpec,
    alpha: f64,
    grid: &GridSpec,
    params: &SolverParams,
    init: Option<&[f64]>,
) -> Result<DiscountedSolution> {
    if !(alpha > 0.0) {
        return Err(Error::Precondition(format!("discount must be positive, got {alpha}")));
    }
    if grid.dim() != model.n_modes {
        return Err(Error::Precondition("grid dimension differs from n_modes".into()));
    }
    if grid.dim() > MAX_DIM {
        return Err(Error::Precondition(format!("grids above {MAX_DIM} dimensions are not supported")));
    }
    let op = Operator::new(model, drift, driver, alpha, grid, params)?;
    let mut values = match init {
        Some(v) if v.len() == grid.len() => v.to_vec(),
        Some(_) => return Err(Error::Precondition("warm start has the wrong size".into())),
        None => vec![0.0; grid.len()],
    };
    let mut next = vec![0.0; grid.len()];
    let mut policy = vec![0u32; grid.len()];
    let mut pi: Vec<f64> = Vec::new();
    let mut pi_policy: Option<Vec<u32>> = None;
    let mut since_refresh = 0usize;
    // ψ(·, ∇v G) acts on central differences like an explicit advection
    // step with Courant number y; damping keeps the sweep stable.
    let relaxation = match (params.relaxation, driver.constant_value()) {
        (Some(r), _) => r,
        (None, Some(_)) => 1.0,
        (None, None) if op.controlled => 1.0,
        (None, None) => {
            let inv_cells: f64 = (0..grid.dim()).map(|d| grid.cell(d).powi(-2)).sum::<f64>().sqrt();
            let y = (op.w0 + op.w1) * driver.l * model.g.norm2() * inv_cells;
            1.0 / (1.0 + y * y)
        }
    };
    let mu = 1.0 - relaxation * (1.0 - op.beta);
    let gain = mu / (1.0 - mu);
    let mut changes: Vec<f64> = Vec::new();
    let mut change = f64::INFINITY;
    let mut iterations = 0;
    while iterations < params.max_iter {
        op.apply(&values, &mut next, &mut policy);
        iterations += 1;
        since_refresh += 1;
        let stale = pi_policy.as_ref() != Some(&policy);
        if stale && (pi_policy.is_none() || since_refresh >= PI_REFRESH) {
            pi = op.stationary_weights(&policy, Some(std::mem::take(&mut pi)), 1e-11, 20_000);
            pi_policy = Some(policy.clone());
            since_refresh = 0;
        }
        let delta: f64 = relaxation * next.iter().zip(&values).zip(&pi).map(|((a, b), w)| w * (a - b)).sum::<f64>();
        let shift = gain * delta;
        change = 0.0;
        for (v, nv) in values.iter_mut().zip(&next) {
            let updated = *v + relaxation * (nv - *v) + shift;
            change = f64::max(change, (updated - *v).abs() / relaxation);
            *v = updated;
        }
        if !change.is_finite() {
            return Err(Error::NonFinite { what: "value iteration", step: iterations, state: vec![] });
        }
        changes.push(change);
        if change < params.tol {
            break;
        }
    }
    if change >= params.tol {
        return Err(Error::NotConverged { iterations, residual: change });
    }
    if pi_policy.as_ref() != Some(&policy) {
        pi = op.stationary_weights(&policy, Some(pi), 1e-11, 20_000);
    }
    let exit_fraction = op.exit_fraction(&pi, &policy);
    if exit_fraction > 0.05 {
        warn!("grid coverage: {:.1}% of stationary mass leaves the box per step", 100.0 * exit_fraction);
    }
    let contraction_ratio = contraction_estimate(&changes, 10.0 * params.tol);
    debug!("alpha={alpha}: {iterations} sweeps, ratio {contraction_ratio:?}");
    let vf = ValueFunction::new(alpha, grid.clone(), values)?;
    let sup = vf.sup_norm();
    let bound = driver.l / alpha;
    let report = SolveReport {
        iterations,
        final_change: change,
        contraction_ratio,
        discount_factor: op.beta,
        relaxation,
        exit_fraction,
        coverage_warning: exit_fraction > 0.05,
        sup_norm: sup,
        bound,
        bound_ok: sup <= bound + params.tol,
    };
    Ok(DiscountedSolution { vf, report })
}

fn contraction_estimate(changes: &[f64], below: f64) -> Option<f64> {
    let tail: Vec<f64> = changes.iter().copied().skip_while(|&c| c >= below).filter(|&c| c > 0.0).collect();
    if tail.len() < 3 {
        return None;
    }
    let k = (tail.len() - 1) as f64;
    Some((tail[tail.len() - 1] / tail[0]).powf(1.0 / k))
}

/// `Υ̃(x) = [ψ(x,ζ) − ψ(x,ζ′)] / |ζ − ζ′|² · (ζ − ζ′)ᵀ`, zero when `ζ = ζ′`.
/// The result is projected onto the ball of radius `l`.
pub fn linearization_field(
    driver: &DriverSpec,
    zeta: &dyn Fn(&[f64]) -> Vec<f64>,
    zeta_prime: &dyn Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
) -> Vec<f64> {
    let z = zeta(x);
    let zp = zeta_prime(x);
    let diff: Vec<f64> = z.iter().zip(&zp).map(|(a, b)| a - b).collect();
    let d2 = dot(&diff, &diff);
    if d2.sqrt() < 1e-14 {
        return vec![0.0; diff.len()];
    }
    let q = (driver.eval(x, &z) - driver.eval(x, &zp)) / d2;
    let mut out: Vec<f64> = diff.iter().map(|d| q * d).collect();
    let size = norm(&out);
    if size > driver.l {
        out.iter_mut().for_each(|o| *o *= driver.l / size);
    }
    out
}

/// Mean-identity residual of a backward equation along forward paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualStats {
    pub m: MeanSe,
    pub allowance: f64,
    pub pass: bool,
}

impl ResidualStats {
    pub fn new(m: MeanSe, allowance: f64) -> Self {
        Self { m, allowance, pass: m.mean.abs() <= 3.0 * m.se + allowance }
    }
}

/// Per path: `v(X_T) − v(x0) + ∫_0^T (ψ(X_s, ∇v(X_s)G) − c·v(X_s) − λ) ds`
/// with trapezoidal quadrature on the simulation grid.
#[allow(clippy::too_many_arguments)]
pub(crate) fn path_identity_samples(
    model: &ModelSpec,
    drift: &DriftField,
    driver: &DriverSpec,
    vf: &ValueFunction,
    value_coef: f64,
    lambda: f64,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let steps = (horizon / dt).round().max(1.0) as usize;
    let dt = horizon / steps as f64;
    let scheme = Scheme::new(model, dt)?;
    let n = model.n_modes;
    let v0 = vf.interpolate(x0);
    let integrand = |x: &[f64]| -> f64 {
        let z = vf.z_field(model, x);
        driver.eval(x, &z) - value_coef * vf.interpolate(x) - lambda
    };
    Ok(par_replicas(n_mc, |i| {
        let mut rng = stream(seed, i as u64);
        let mut x = x0.to_vec();
        let mut buf = vec![0.0; n];
        let mut eta = vec![0.0; n];
        let mut g_prev = integrand(&x);
        let mut integral = 0.0;
        for _ in 0..steps {
            fill_normals(&mut rng, &mut eta);
            scheme.step(drift, &mut x, &eta, &mut buf);
            let g = integrand(&x);
            integral += 0.5 * dt * (g_prev + g);
            g_prev = g;
        }
        vf.interpolate(&x) - v0 + integral
    }))
}

/// Integrated mean form of the discounted equation.
#[allow(clippy::too_many_arguments)]
pub fn bsde_residual(
    model: &ModelSpec,
    drift: &DriftField,
    driver: &DriverSpec,
    vf: &ValueFunction,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    n_mc: usize,
    seed: u64,
    allowance: f64,
) -> Result<ResidualStats> {
    let samples =
        path_identity_samples(model, drift, driver, vf, vf.alpha, 0.0, x0, horizon, dt, n_mc, seed)?;
    Ok(ResidualStats::new(MeanSe::from_samples(&samples), allowance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;

    fn grid1(b: f64, n: usize) -> GridSpec {
        GridSpec::new(vec![b], vec![n]).unwrap()
    }

    #[test]
    fn matched_sample_has_exact_moments() {
        let etas = matched_sample(2, 31, 5).unwrap();
        assert_eq!(etas.len(), 64);
        let m = etas.len() / 2;
        for i in 0..2 {
            let mean: f64 = etas.chunks(2).map(|e| e[i]).sum::<f64>() / m as f64;
            assert!(mean.abs() < 1e-14);
            for j in 0..2 {
                let s: f64 = etas.chunks(2).map(|e| e[i] * e[j]).sum::<f64>() / m as f64;
                assert!((s - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!(matched_sample(3, 4, 1).is_err());
    }

    #[test]
    fn node_layout_last_dim_fastest() {
        let g = GridSpec::new(vec![1.0, 2.0], vec![3, 5]).unwrap();
        assert_eq!(g.point(0), vec![-1.0, -2.0]);
        assert_eq!(g.point(1), vec![-1.0, -1.0]);
        assert_eq!(g.point(5), vec![0.0, -2.0]);
        assert_eq!(g.nearest(&[0.1, -1.1]), 6);
    }

    #[test]
    fn interpolation_reproduces_bilinear_functions() {
        let g = GridSpec::new(vec![1.0, 1.0], vec![7, 9]).unwrap();
        let f = |x: &[f64]| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1];
        let vf = ValueFunction::from_fn(1.0, g, f);
        for p in [[0.13, -0.77], [0.99, 0.01], [-0.5, 0.5]] {
            assert!((vf.interpolate(&p) - f(&p)).abs() < 1e-14);
        }
        assert_eq!(vf.interpolate(&[5.0, 5.0]), f(&[1.0, 1.0]));
    }

    #[test]
    fn gradient_of_linear_is_exact() {
        let g = GridSpec::new(vec![2.0, 2.0], vec![11, 11]).unwrap();
        let vf = ValueFunction::from_fn(1.0, g, |x| 3.0 * x[0]);
        for p in [[0.0, 0.0], [1.95, -2.0], [-2.0, 0.3]] {
            let gr = vf.gradient(&p);
            assert!((gr[0] - 3.0).abs() < 1e-12 && gr[1].abs() < 1e-12);
        }
        let c = ValueFunction::constant(1.0, GridSpec::new(vec![1.0], vec![5]).unwrap(), 2.0);
        assert_eq!(c.gradient(&[0.3]), vec![0.0]);
    }

    #[test]
    fn constant_driver_solves_exactly() {
        let model = ModelSpec::new(vec![-1.0], Mat::identity(1)).unwrap();
        let sol = solve_discounted(
            &model,
            &DriftField::zero(),
            &DriverSpec::constant(2.0),
            0.5,
            &grid1(3.0, 21),
            &SolverParams::default(),
            None,
        )
        .unwrap();
        assert!(sol.vf.values.iter().all(|v| (v - 4.0).abs() < 1e-10));
        assert!(sol.report.bound_ok);
    }

    #[test]
    fn linearization_examples() {
        let d = DriverSpec::new(|_, z| z[0], 1.0);
        let two = |_: &[f64]| vec![2.0];
        let one = |_: &[f64]| vec![1.0];
        assert_eq!(linearization_field(&d, &two, &one, &[0.0]), vec![1.0]);
        assert_eq!(linearization_field(&d, &two, &two, &[0.0]), vec![0.0]);
    }

    #[test]
    fn value_function_binary_round_trip() {
        let g = GridSpec::new(vec![1.0, 0.5], vec![4, 3]).unwrap();
        let vf = ValueFunction::from_fn(0.25, g, |x| x[0] - x[1] * x[1]);
        let mut bytes = Vec::new();
        vf.write_binary(&mut bytes).unwrap();
        assert_eq!(ValueFunction::read_binary(bytes.as_slice()).unwrap(), vf);
    }
}
