//! Forward-equation coefficients, the stochastic heat equation instance and
//! the Hamiltonian driver built from control data.
//!
//! After Galerkin truncation the state space, the noise space and their
//! duals are all `R^N`; covectors act on vectors by the dot product.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Mat};
use crate::quadrature::composite_legendre;

/// Smallest admissible |sigma| at any quadrature node.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Tolerance on `g * g_inv - I`, per entry.
pub const INVERSE_TOL: f64 = 1e-12;

type StateFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type PsiFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// Truncated coefficients of `dX = (AX + Υ(X)) dt + G dW` with diagonal `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub n_modes: usize,
    /// Eigenvalues of `A`.
    pub a: Vec<f64>,
    pub k_diss: f64,
    pub g: Mat,
    pub g_inv: Mat,
    /// `sup |Υ|` of the drift attached to a run.
    pub drift_bound: f64,
    /// When false the stochastic convolution is switched off (test-only
    /// deterministic runs); `g` is kept so Girsanov quantities stay defined.
    pub noise: bool,
}

impl ModelSpec {
    /// Builds a model with `k_diss = min_i |a_i|`.
    pub fn new(a: Vec<f64>, g: Mat) -> Result<Self> {
        let k = a.iter().fold(f64::INFINITY, |m, v| m.min(-v));
        Self::with_dissipativity(a, g, k)
    }

    pub fn with_dissipativity(a: Vec<f64>, g: Mat, k_diss: f64) -> Result<Self> {
        let n = a.len();
        if n == 0 {
            return Err(Error::InvalidModel("n_modes must be positive".into()));
        }
        if g.dim() != n {
            return Err(Error::InvalidModel(format!("G is {}x{}, expected {n}x{n}", g.dim(), g.dim())));
        }
        if !(k_diss > 0.0) {
            return Err(Error::InvalidModel(format!("k_diss must be positive, got {k_diss}")));
        }
        if let Some(bad) = a.iter().find(|&&ai| !(ai <= -k_diss)) {
            return Err(Error::InvalidModel(format!("eigenvalue {bad} exceeds -k_diss = {}", -k_diss)));
        }
        let g_inv = g
            .inverse()
            .ok_or_else(|| Error::InvalidModel("noise operator G is singular".into()))?;
        let err = g.matmul(&g_inv).max_abs_diff(&Mat::identity(n));
        if err > INVERSE_TOL {
            return Err(Error::InvalidModel(format!("G is ill-conditioned: |G G^-1 - I| = {err:e}")));
        }
        Ok(Self { n_modes: n, a, k_diss, g, g_inv, drift_bound: 0.0, noise: true })
    }

    pub fn with_drift_bound(mut self, bound: f64) -> Self {
        self.drift_bound = bound;
        self
    }

    pub fn without_noise(&self) -> Self {
        Self { noise: false, ..self.clone() }
    }

    /// Covariance of the invariant law of the linear (Ornstein–Uhlenbeck) part.
    pub fn stationary_cov(&self) -> Mat {
        let ggt = self.g.matmul(&self.g.transpose());
        Mat::from_fn(self.n_modes, |i, j| ggt.get(i, j) / -(self.a[i] + self.a[j]))
    }

    pub fn stationary_std(&self) -> Vec<f64> {
        let c = self.stationary_cov();
        (0..self.n_modes).map(|i| c.get(i, i).sqrt()).collect()
    }

    /// Default half-width of the value-function box per mode:
    /// four stationary standard deviations plus `drift_bound / k_diss`.
    pub fn default_box(&self) -> Vec<f64> {
        self.stationary_std()
            .into_iter()
            .map(|s| 4.0 * s + self.drift_bound / self.k_diss)
            .collect()
    }
}

/// Bounded drift `Υ` with a certified sup bound.
#[derive(Clone)]
pub struct DriftField {
    eval: Arc<StateFn>,
    pub sup_bound: f64,
    pub lipschitz: Option<f64>,
    zero: bool,
}

impl fmt::Debug for DriftField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftField")
            .field("sup_bound", &self.sup_bound)
            .field("lipschitz", &self.lipschitz)
            .field("zero", &self.zero)
            .finish()
    }
}

impl DriftField {
    pub fn new(
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        sup_bound: f64,
        lipschitz: Option<f64>,
    ) -> Self {
        Self { eval: Arc::new(f), sup_bound, lipschitz, zero: false }
    }

    pub fn zero() -> Self {
        Self {
            eval: Arc::new(|_, out: &mut [f64]| out.iter_mut().for_each(|o| *o = 0.0)),
            sup_bound: 0.0,
            lipschitz: Some(0.0),
            zero: true,
        }
    }

    pub fn constant(v: Vec<f64>) -> Self {
        let bound = norm(&v);
        Self::new(move |_, out| out.copy_from_slice(&v), bound, Some(0.0))
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn negated(&self) -> Self {
        let inner = self.eval.clone();
        Self {
            eval: Arc::new(move |x, out| {
                inner(x, out);
                out.iter_mut().for_each(|o| *o = -*o);
            }),
            ..self.clone()
        }
    }

    /// Checks `|Υ(x)| ≤ sup_bound` on the given probes.
    pub fn audit(&self, probes: &[Vec<f64>]) -> Result<()> {
        for x in probes {
            let v = norm(&self.eval(x));
            if !v.is_finite() || v > self.sup_bound * (1.0 + 1e-12) + 1e-15 {
                return Err(Error::InvalidModel(format!(
                    "drift magnitude {v} at {x:?} exceeds certified bound {}",
                    self.sup_bound
                )));
            }
        }
        Ok(())
    }
}

/// Driver `ψ(x, z)` of the backward equation.
#[derive(Clone)]
pub struct DriverSpec {
    psi: Arc<PsiFn>,
    /// Lipschitz constant in `z` and bound on `|ψ(·, 0)|`.
    pub l: f64,
    constant: Option<f64>,
    control: Option<ControlSpec>,
}

impl fmt::Debug for DriverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverSpec").field("l", &self.l).field("constant", &self.constant).finish()
    }
}

impl DriverSpec {
    pub fn new(psi: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static, l: f64) -> Self {
        Self { psi: Arc::new(psi), l, constant: None, control: None }
    }

    /// `ψ ≡ c`.
    pub fn constant(c: f64) -> Self {
        Self { psi: Arc::new(move |_, _| c), l: c.abs(), constant: Some(c), control: None }
    }

    pub fn constant_value(&self) -> Option<f64> {
        self.constant
    }

    /// The control data this driver was built from, if any.
    pub fn control(&self) -> Option<&ControlSpec> {
        self.control.as_ref()
    }

    #[inline]
    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        (self.psi)(x, z)
    }

    /// Same driver, scaled by `s` (the Lipschitz constant scales with it).
    pub fn scaled(&self, s: f64) -> Self {
        let inner = self.psi.clone();
        Self {
            psi: Arc::new(move |x, z| s * inner(x, z)),
            l: self.l * s.abs(),
            constant: self.constant.map(|c| c * s),
            control: None,
        }
    }

    /// Checks `|ψ(x,0)| ≤ l` and `|ψ(x,z) - ψ(x,z')| ≤ l |z - z'|` on probes.
    pub fn audit(&self, probes: &[(Vec<f64>, Vec<f64>, Vec<f64>)]) -> Result<()> {
        for (x, z, zp) in probes {
            let zero = vec![0.0; z.len()];
            let p0 = self.eval(x, &zero);
            if p0.abs() > self.l * (1.0 + 1e-12) {
                return Err(Error::InvalidModel(format!("|ψ(x,0)| = {} exceeds l = {}", p0.abs(), self.l)));
            }
            let diff: Vec<f64> = z.iter().zip(zp).map(|(a, b)| a - b).collect();
            let lhs = (self.eval(x, z) - self.eval(x, zp)).abs();
            if lhs > self.l * norm(&diff) * (1.0 + 1e-12) + 1e-14 {
                return Err(Error::InvalidModel(format!(
                    "ψ not {}-Lipschitz in z at {x:?}: |Δψ| = {lhs}",
                    self.l
                )));
            }
        }
        Ok(())
    }
}

/// Finite control set with actions `R(u)` and running cost `L(x, u)`.
#[derive(Clone)]
pub struct ControlSpec {
    pub controls: Vec<Vec<f64>>,
    /// `R(u)` for each control, in list order.
    pub r_table: Vec<Vec<f64>>,
    cost: Arc<PsiFn>,
    pub bound_c: f64,
}

impl fmt::Debug for ControlSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSpec")
            .field("controls", &self.controls)
            .field("r_table", &self.r_table)
            .field("bound_c", &self.bound_c)
            .finish()
    }
}

/// Minimum of the Hamiltonian over the control set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianMin {
    pub value: f64,
    /// Index of the first minimising control in list order.
    pub index: usize,
}

impl ControlSpec {
    pub fn new(
        controls: Vec<Vec<f64>>,
        r: impl Fn(&[f64]) -> Vec<f64>,
        cost: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        bound_c: f64,
    ) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::Config("control set U is empty".into()));
        }
        if !(bound_c > 0.0) {
            return Err(Error::Config(format!("control bound c must be positive, got {bound_c}")));
        }
        let r_table = controls.iter().map(|u| r(u)).collect();
        Ok(Self { controls, r_table, cost: Arc::new(cost), bound_c })
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    #[inline]
    pub fn cost(&self, x: &[f64], index: usize) -> f64 {
        (self.cost)(x, &self.controls[index])
    }

    pub fn max_action_norm(&self) -> f64 {
        self.r_table.iter().map(|r| norm(r)).fold(0.0, f64::max)
    }

    #[inline]
    pub fn hamiltonian(&self, x: &[f64], z: &[f64]) -> HamiltonianMin {
        let mut best = HamiltonianMin { value: f64::INFINITY, index: 0 };
        for (i, r) in self.r_table.iter().enumerate() {
            let v = self.cost(x, i) + dot(z, r);
            // strict comparison keeps the first minimiser
            if v < best.value {
                best = HamiltonianMin { value: v, index: i };
            }
        }
        best
    }

    /// Checks the bounds `|R(u)| ≤ c`, `|L(x,u)| ≤ c` and `c`-Lipschitz `L`
    /// on pairs of probe states.
    pub fn audit(&self, probes: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        let c = self.bound_c * (1.0 + 1e-12);
        if self.max_action_norm() > c {
            return Err(Error::Config(format!("|R(u)| exceeds c = {}", self.bound_c)));
        }
        for (x, y) in probes {
            for i in 0..self.len() {
                let (lx, ly) = (self.cost(x, i), self.cost(y, i));
                if lx.abs() > c || ly.abs() > c {
                    return Err(Error::Config(format!("|L(x,u)| exceeds c = {} at {x:?}", self.bound_c)));
                }
                let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                if (lx - ly).abs() > c * norm(&d) + 1e-14 {
                    return Err(Error::Config(format!("L(·,u) is not c-Lipschitz near {x:?}")));
                }
            }
        }
        Ok(())
    }
}

pub fn hamiltonian(spec: &ControlSpec, x: &[f64], z: &[f64]) -> HamiltonianMin {
    spec.hamiltonian(x, z)
}

/// `ψ(x, z) = min_u L(x,u) + <z, R(u)>` with `l = c · max(1, max_u |R(u)|)`.
pub fn driver_from_control(spec: &ControlSpec) -> DriverSpec {
    let l = spec.bound_c * spec.max_action_norm().max(1.0);
    let inner = spec.clone();
    let mut driver = DriverSpec::new(move |x, z| inner.hamiltonian(x, z).value, l);
    driver.control = Some(spec.clone());
    driver
}

/// Scalar nonlinearity `f(ξ, η)` of the heat equation, with its sup and
/// Lipschitz constant in `η`.
#[derive(Clone)]
pub struct ScalarNonlinearity {
    f: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub sup_abs: f64,
    pub lipschitz: f64,
    zero: bool,
}

impl fmt::Debug for ScalarNonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarNonlinearity")
            .field("sup_abs", &self.sup_abs)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl ScalarNonlinearity {
    pub fn new(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static, sup_abs: f64, lipschitz: f64) -> Self {
        Self { f: Arc::new(f), sup_abs, lipschitz, zero: false }
    }

    pub fn zero() -> Self {
        Self { zero: true, ..Self::new(|_, _| 0.0, 0.0, 0.0) }
    }

    /// `amplitude · cos(η)`
    pub fn cos(amplitude: f64) -> Self {
        Self::new(move |_, eta| amplitude * eta.cos(), amplitude.abs(), amplitude.abs())
    }

    /// `amplitude · sin(η)`
    pub fn sin(amplitude: f64) -> Self {
        Self::new(move |_, eta| amplitude * eta.sin(), amplitude.abs(), amplitude.abs())
    }

    /// `amplitude · tanh(scale · η)`
    pub fn tanh_scaled(amplitude: f64, scale: f64) -> Self {
        Self::new(
            move |_, eta| amplitude * (scale * eta).tanh(),
            amplitude.abs(),
            (amplitude * scale).abs(),
        )
    }

    /// `amplitude · tanh(η / width)`: with positive amplitude it pushes the
    /// field away from zero.
    pub fn outward(amplitude: f64, width: f64) -> Self {
        Self::tanh_scaled(amplitude, 1.0 / width)
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    #[inline]
    pub fn eval(&self, xi: f64, eta: f64) -> f64 {
        (self.f)(xi, eta)
    }
}

/// Dirichlet eigenfunction `e_k(ξ) = √2 sin(kπξ)`, `k ≥ 1`.
#[inline]
pub fn dirichlet_mode(k: usize, xi: f64) -> f64 {
    SQRT_2 * (k as f64 * PI * xi).sin()
}

/// Spectral truncation of the stochastic heat equation on [0, 1] with
/// Dirichlet boundary conditions.
///
/// `n_quad` is the number of composite Gauss–Legendre panels used for both
/// `G_jk = <σ e_j, e_k>` and the projected Nemytskii drift.
pub fn build_heat_model(
    n_modes: usize,
    f: &ScalarNonlinearity,
    sigma: &dyn Fn(f64) -> f64,
    n_quad: usize,
) -> Result<(ModelSpec, DriftField)> {
    if n_modes == 0 {
        return Err(Error::InvalidModel("n_modes must be positive".into()));
    }
    if n_quad < 2 * n_modes {
        return Err(Error::InvalidModel(format!(
            "n_quad = {n_quad} is too small for {n_modes} modes (need at least {})",
            2 * n_modes
        )));
    }
    let (nodes, weights) = composite_legendre(n_quad);
    let sig: Vec<f64> = nodes.iter().map(|&xi| sigma(xi)).collect();
    if let Some((i, s)) = sig.iter().enumerate().find(|(_, s)| !(s.abs() >= SIGMA_FLOOR)) {
        return Err(Error::InvalidModel(format!(
            "sigma({}) = {s} is below the floor {SIGMA_FLOOR}",
            nodes[i]
        )));
    }
    // basis[q * n + k] = e_{k+1}(ξ_q)
    let basis: Vec<f64> = nodes
        .iter()
        .flat_map(|&xi| (1..=n_modes).map(move |k| dirichlet_mode(k, xi)))
        .collect();
    let g = Mat::from_fn(n_modes, |k, j| {
        (0..nodes.len()).map(|q| weights[q] * sig[q] * basis[q * n_modes + j] * basis[q * n_modes + k]).sum()
    });
    let a: Vec<f64> = (1..=n_modes).map(|k| -(k as f64 * PI).powi(2)).collect();

    let sup_bound = (n_modes as f64).sqrt() * SQRT_2 * f.sup_abs;
    let drift = if f.is_zero() {
        DriftField::zero()
    } else {
        let f = f.clone();
        let lip = f.lipschitz;
        DriftField::new(
            move |x, out| {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (q, (&xi, &w)) in nodes.iter().zip(&weights).enumerate() {
                    let row = &basis[q * n_modes..(q + 1) * n_modes];
                    let u = dot(x, row);
                    let fw = w * f.eval(xi, u);
                    for (o, e) in out.iter_mut().zip(row) {
                        *o += fw * e;
                    }
                }
            },
            sup_bound,
            Some(lip),
        )
    };
    let model = ModelSpec::with_dissipativity(a, g, PI * PI)?.with_drift_bound(drift.sup_bound);
    Ok((model, drift))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_controls(n: usize) -> ControlSpec {
        ControlSpec::new(
            vec![vec![-1.0], vec![0.0], vec![1.0]],
            move |u| {
                let mut r = vec![0.0; n];
                r[0] = u[0];
                r
            },
            |_, u| u[0].abs(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_nonlinearity_gives_zero_drift() {
        let (model, drift) = build_heat_model(2, &ScalarNonlinearity::zero(), &|_| 0.7, 8).unwrap();
        assert_eq!(drift.sup_bound, 0.0);
        assert_eq!(model.drift_bound, 0.0);
        assert_eq!(drift.eval(&[0.3, -0.2]), vec![0.0, 0.0]);
    }

    #[test]
    fn unit_sigma_gives_identity_noise() {
        let (model, _) = build_heat_model(3, &ScalarNonlinearity::zero(), &|_| 1.0, 6).unwrap();
        assert!(model.g.max_abs_diff(&Mat::identity(3)) < 1e-12);
        assert_eq!(model.k_diss, PI * PI);
        assert!((model.a[2] + 9.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn constant_sigma_scales_identity() {
        let (model, _) = build_heat_model(2, &ScalarNonlinearity::zero(), &|_| 2.5, 4).unwrap();
        assert!(model.g.max_abs_diff(&Mat::identity(2).scale(2.5)) < 1e-10);
    }

    #[test]
    fn cos_projection_at_origin() {
        // closed form: ∫ √2 sin(πξ) dξ = 2√2/π
        let (_, drift) = build_heat_model(1, &ScalarNonlinearity::cos(1.0), &|_| 1.0, 2).unwrap();
        let expected = 2.0 * SQRT_2 / PI;
        assert!((drift.eval(&[0.0])[0] - expected).abs() < 1e-12);
        assert!((expected - 0.9003).abs() < 1e-4);
    }

    #[test]
    fn heat_drift_respects_certified_bound() {
        let (_, drift) = build_heat_model(3, &ScalarNonlinearity::tanh_scaled(1.0, 5.0), &|_| 1.0, 12).unwrap();
        let probes: Vec<Vec<f64>> =
            (0..50).map(|i| vec![(i as f64 * 0.37).sin() * 3.0, (i as f64).cos(), -0.1 * i as f64]).collect();
        drift.audit(&probes).unwrap();
    }

    #[test]
    fn rejects_degenerate_sigma_and_small_quadrature() {
        assert!(build_heat_model(2, &ScalarNonlinearity::zero(), &|xi| if xi < 0.5 { 0.0 } else { 1.0 }, 7).is_err());
        assert!(build_heat_model(3, &ScalarNonlinearity::zero(), &|_| 1.0, 5).is_err());
    }

    #[test]
    fn model_invariants_enforced() {
        assert!(ModelSpec::new(vec![-1.0, 0.5], Mat::identity(2)).is_err());
        assert!(ModelSpec::new(vec![-1.0], Mat::zeros(1)).is_err());
        let m = ModelSpec::new(vec![-1.0, -4.0], Mat::identity(2)).unwrap();
        assert_eq!(m.k_diss, 1.0);
        assert!((m.stationary_cov().get(1, 1) - 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn singleton_hamiltonian() {
        let spec = ControlSpec::new(vec![vec![0.5]], |u| vec![u[0], 0.0], |x, u| x[0] + u[0], 2.0).unwrap();
        let h = spec.hamiltonian(&[0.2, 0.0], &[1.0, 3.0]);
        assert_eq!(h.index, 0);
        assert!((h.value - (0.7 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn three_control_enumeration() {
        let spec = three_controls(2);
        let h = spec.hamiltonian(&[0.0, 0.0], &[-3.0, 0.0]);
        assert_eq!(h.value, -2.0);
        assert_eq!(spec.controls[h.index], vec![1.0]);
        // zero covector: min of costs, first minimiser wins
        let h0 = spec.hamiltonian(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!((h0.value, h0.index), (0.0, 1));
    }

    #[test]
    fn ties_break_to_first_in_list() {
        let spec = three_controls(1);
        // z = 1: costs 1-1=0, 0, 1+1 -> u=-1 and u=0 tie at 0
        assert_eq!(spec.hamiltonian(&[0.0], &[1.0]).index, 0);
    }

    #[test]
    fn driver_from_three_controls() {
        let spec = three_controls(2);
        let driver = driver_from_control(&spec);
        assert_eq!(driver.l, 1.0);
        for z1 in [-2.5, -1.0, -0.3, 0.0, 0.4, 1.7] {
            let psi = driver.eval(&[0.1, 0.2], &[z1, 0.9]);
            assert!((psi - (0.0f64).min(1.0 - z1.abs())).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_zero_action_driver_is_cost() {
        let spec = ControlSpec::new(vec![vec![0.0]], |_| vec![0.0], |x, _| x[0].tanh(), 1.0).unwrap();
        let d = driver_from_control(&spec);
        assert_eq!(d.eval(&[0.3], &[5.0]), 0.3f64.tanh());
    }

    #[test]
    fn empty_control_set_is_rejected() {
        let err = ControlSpec::new(vec![], |_| vec![0.0], |_, _| 0.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn control_audit_detects_violations() {
        let ok = three_controls(1);
        ok.audit(&[(vec![0.0], vec![1.0])]).unwrap();
        let bad = ControlSpec::new(vec![vec![2.0]], |u| vec![u[0]], |_, _| 0.0, 1.0).unwrap();
        assert!(bad.audit(&[(vec![0.0], vec![1.0])]).is_err());
    }
}
