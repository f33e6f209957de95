//! Simulation of the truncated mild equation
//!
//! ```text
//! X_{n+1} = e^{AΔt} (X_n + Δt Υ(X_n)) + ξ_n,   ξ_n ~ N(0, C),
//! C = ∫_0^Δt e^{As} G Gᵀ e^{Aᵀs} ds,
//! ```
//!
//! which is exact on the linear (Ornstein–Uhlenbeck) part for any step.
//! Noise is stored in standardized form `η_n = L⁻¹ ξ_n` (`C = L Lᵀ`) along
//! with the equivalent Brownian increment `ΔW_n = Bᵀ η_n`,
//! `B = Δt L⁻¹ e^{AΔt} G`. With `Q = BᵀB` the Girsanov exponent
//! `-Σ <θ_n, ΔW_n> - ½ Σ θ_nᵀ Q θ_n` is the exact log density ratio of the
//! discrete scheme under the drift change `Υ → Υ - Gθ`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Mat};
use crate::mc::par_replicas;
use crate::model::{DriftField, ModelSpec};
use crate::rng::{fill_normals, stream};
use crate::stats::MeanSe;

/// Default simulation step.
pub const DEFAULT_DT: f64 = 1e-2;

/// Precomputed one-step coefficients for a model and step size.
#[derive(Debug, Clone)]
pub struct Scheme {
    pub n: usize,
    pub dt: f64,
    /// `e^{a_i Δt}`
    pub decay: Vec<f64>,
    pub cov: Mat,
    /// Lower Cholesky factor of `cov` (zero when noise is disabled).
    pub chol: Mat,
    pub b_map: Mat,
    pub quad_form: Mat,
    pub g: Mat,
    pub noise: bool,
}

impl Scheme {
    pub fn new(model: &ModelSpec, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Precondition(format!("time step must be positive, got {dt}")));
        }
        let n = model.n_modes;
        let decay: Vec<f64> = model.a.iter().map(|a| (a * dt).exp()).collect();
        let ggt = model.g.matmul(&model.g.transpose());
        let cov = Mat::from_fn(n, |i, j| {
            let s = model.a[i] + model.a[j];
            ggt.get(i, j) * (s * dt).exp_m1() / s
        });
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::InvalidModel("step covariance is not positive definite".into()))?;
        // B = Δt L⁻¹ E G, column by column
        let eg = Mat::from_fn(n, |i, j| decay[i] * model.g.get(i, j));
        let mut b_map = Mat::zeros(n);
        let mut col = vec![0.0; n];
        let mut sol = vec![0.0; n];
        for j in 0..n {
            for i in 0..n {
                col[i] = dt * eg.get(i, j);
            }
            chol.solve_lower_into(&col, &mut sol);
            for i in 0..n {
                b_map.set(i, j, sol[i]);
            }
        }
        let quad_form = b_map.transpose().matmul(&b_map);
        let (chol, noise) = if model.noise { (chol, true) } else { (Mat::zeros(n), false) };
        Ok(Self { n, dt, decay, cov, chol, b_map, quad_form, g: model.g.clone(), noise })
    }

    /// `x ← e^{AΔt}(x + Δt·drift) + L η`
    #[inline]
    pub fn advance(&self, x: &mut [f64], drift: &[f64], eta: &[f64]) {
        for i in 0..self.n {
            x[i] = self.decay[i] * (x[i] + self.dt * drift[i]);
        }
        if self.noise {
            for i in 0..self.n {
                let mut s = 0.0;
                for k in 0..=i {
                    s += self.chol.get(i, k) * eta[k];
                }
                x[i] += s;
            }
        }
    }

    /// One step under `drift`, using `buf` as scratch for the drift value.
    #[inline]
    pub fn step(&self, drift: &DriftField, x: &mut [f64], eta: &[f64], buf: &mut [f64]) {
        drift.eval_into(x, buf);
        self.advance(x, buf, eta);
    }

    /// Whitened mean shift `L⁻¹ m` for a shift `m` of the one-step mean.
    #[inline]
    pub fn whiten(&self, m: &[f64], out: &mut [f64]) {
        self.chol.solve_lower_into(m, out);
    }

    /// `ΔW = Bᵀ η`
    #[inline]
    pub fn brownian_increment(&self, eta: &[f64], out: &mut [f64]) {
        self.b_map.vec_mul_into(eta, out);
    }
}

/// One simulated path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub n_modes: usize,
    pub times: Vec<f64>,
    /// `times.len()` states of `n_modes` entries each.
    pub states: Vec<f64>,
    /// Standardized Gaussians `η_n`, one `n_modes` block per step.
    pub noise: Vec<f64>,
    /// Equivalent Brownian increments `ΔW_n`, one block per step.
    pub dw: Vec<f64>,
    /// Quadratic form `Q` of the Girsanov exponent (≈ Δt·I).
    pub quad_form: Mat,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.n_modes..(i + 1) * self.n_modes]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn increment(&self, n: usize) -> &[f64] {
        &self.dw[n * self.n_modes..(n + 1) * self.n_modes]
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    /// CSV with header `t,x_1,...,x_N`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (1..=self.n_modes).map(|k| format!("x_{k}")).collect();
        writeln!(w, "t,{}", header.join(","))?;
        for (i, t) in self.times.iter().enumerate() {
            let row: Vec<String> = self.state(i).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{t:?},{}", row.join(","))?;
        }
        Ok(())
    }

    /// Compact little-endian dump, layout documented in `docs/formats.md`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TRAJ_MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.n_modes as u32).to_le_bytes())?;
        w.write_all(&(self.times.len() as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let has_noise = !self.dw.is_empty();
        w.write_all(&[u8::from(has_noise)])?;
        let mut put = |xs: &[f64]| -> Result<()> {
            for v in xs {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        put(&self.times)?;
        put(&self.states)?;
        if has_noise {
            put(&self.noise)?;
            put(&self.dw)?;
        }
        let q: Vec<f64> = self.quad_form.rows().concat();
        put(&q)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TRAJ_MAGIC {
            return Err(Error::Format("not a trajectory dump".into()));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported trajectory version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let len = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let times = read_f64s(&mut r, len)?;
        let states = read_f64s(&mut r, len * n)?;
        let steps = len.saturating_sub(1);
        let (noise, dw) = if flag[0] == 1 {
            (read_f64s(&mut r, steps * n)?, read_f64s(&mut r, steps * n)?)
        } else {
            (Vec::new(), Vec::new())
        };
        let q = read_f64s(&mut r, n * n)?;
        let quad_form = Mat::from_fn(n, |i, j| q[i * n + j]);
        Ok(Self { n_modes: n, times, states, noise, dw, quad_form, seed })
    }
}

const TRAJ_MAGIC: &[u8; 4] = b"EGTR";

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Uniform time grid `t0, t0 + dt, ..., t0 + steps·dt`.
pub fn uniform_grid(t0: f64, dt: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| t0 + i as f64 * dt).collect()
}

/// Returns the common step of a uniform grid.
pub fn check_uniform(t_grid: &[f64]) -> Result<f64> {
    if t_grid.len() < 2 {
        return Err(Error::Precondition("time grid needs at least two points".into()));
    }
    let dt = t_grid[1] - t_grid[0];
    if !(dt > 0.0) {
        return Err(Error::NonUniformGrid { index: 0, width: dt, expected: dt });
    }
    for (i, w) in t_grid.windows(2).enumerate() {
        let width = w[1] - w[0];
        if (width - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::NonUniformGrid { index: i, width, expected: dt });
        }
    }
    Ok(dt)
}

/// Simulates the mild equation with drift `drift` on `t_grid` from `x0`.
pub fn simulate_path(
    model: &ModelSpec,
    drift: &DriftField,
    x0: &[f64],
    t_grid: &[f64],
    seed: u64,
) -> Result<Trajectory> {
    let dt = check_uniform(t_grid)?;
    let scheme = Scheme::new(model, dt)?;
    let n = model.n_modes;
    if x0.len() != n {
        return Err(Error::Precondition(format!("x0 has {} entries, model has {n} modes", x0.len())));
    }
    let steps = t_grid.len() - 1;
    let mut rng = stream(seed, 0);
    let mut states = Vec::with_capacity(t_grid.len() * n);
    let mut noise = vec![0.0; steps * n];
    let mut dw = vec![0.0; steps * n];
    let mut x = x0.to_vec();
    let mut buf = vec![0.0; n];
    states.extend_from_slice(&x);
    for s in 0..steps {
        let eta = &mut noise[s * n..(s + 1) * n];
        fill_normals(&mut rng, eta);
        drift.eval_into(&x, &mut buf);
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "drift evaluation", step: s, state: x.clone() });
        }
        scheme.advance(&mut x, &buf, eta);
        scheme.brownian_increment(eta, &mut dw[s * n..(s + 1) * n]);
        states.extend_from_slice(&x);
    }
    Ok(Trajectory {
        n_modes: n,
        times: t_grid.to_vec(),
        states,
        noise,
        dw,
        quad_form: scheme.quad_form.clone(),
        seed,
    })
}

/// The linear process `U^x_t = e^{tA}x + stochastic convolution`.
pub fn simulate_ou(model: &ModelSpec, x0: &[f64], t_grid: &[f64], seed: u64) -> Result<Trajectory> {
    simulate_path(model, &DriftField::zero(), x0, t_grid, seed)
}

/// `log ρ = -Σ <G⁻¹ tilt(X_n), ΔW_n> - ½ Σ (G⁻¹ tilt)ᵀ Q (G⁻¹ tilt)`.
///
/// Reweighting paths of the drift `Υ` by `exp(log ρ)` yields the law of the
/// scheme with drift `Υ - tilt`.
pub fn girsanov_logweight(traj: &Trajectory, model: &ModelSpec, tilt: &DriftField) -> Result<f64> {
    let steps = traj.steps();
    if steps > 0 && traj.dw.len() != steps * traj.n_modes {
        return Err(Error::MissingIncrements);
    }
    let n = traj.n_modes;
    let mut tv = vec![0.0; n];
    let mut theta = vec![0.0; n];
    let mut q_theta = vec![0.0; n];
    let mut log = 0.0;
    for s in 0..steps {
        tilt.eval_into(traj.state(s), &mut tv);
        model.g_inv.mul_vec_into(&tv, &mut theta);
        traj.quad_form.mul_vec_into(&theta, &mut q_theta);
        log -= dot(&theta, traj.increment(s)) + 0.5 * dot(&theta, &q_theta);
    }
    Ok(log)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentRow {
    pub horizon: f64,
    /// `E sup_{[0,T]} |X|^p / (1+|x0|)^p`
    pub sup_ratio: MeanSe,
    /// `E |X_T|^p / (1+|x0|)^p`
    pub end_ratio: MeanSe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    pub p: u32,
    pub x0_norm: f64,
    pub rows: Vec<MomentRow>,
    /// Raised when the horizon moment still grows between the two largest
    /// horizons by more than three combined standard errors.
    pub growth_flag: bool,
}

/// Audits the uniform-in-time moment bound on a ladder of horizons.
pub fn moment_audit(
    model: &ModelSpec,
    drift: &DriftField,
    x0: &[f64],
    horizons: &[f64],
    p: u32,
    n_mc: usize,
    dt: f64,
    seed: u64,
) -> Result<MomentReport> {
    if p != 2 && p != 4 {
        return Err(Error::Precondition(format!("moment exponent must be 2 or 4, got {p}")));
    }
    let scheme = Scheme::new(model, dt)?;
    let n = model.n_modes;
    let marks: Vec<usize> = horizons.iter().map(|h| (h / dt).round() as usize).collect();
    let last = *marks.iter().max().unwrap_or(&0);
    let scale = (1.0 + norm(x0)).powi(p as i32);
    let per_path = par_replicas(n_mc, |i| {
        let mut rng = stream(seed, i as u64);
        let mut x = x0.to_vec();
        let mut buf = vec![0.0; n];
        let mut eta = vec![0.0; n];
        let mut sup = norm(&x).powi(p as i32);
        let mut sups = vec![0.0; marks.len()];
        let mut ends = vec![0.0; marks.len()];
        for s in 0..=last {
            for (k, &m) in marks.iter().enumerate() {
                if m == s {
                    sups[k] = sup;
                    ends[k] = norm(&x).powi(p as i32);
                }
            }
            if s == last {
                break;
            }
            fill_normals(&mut rng, &mut eta);
            scheme.step(drift, &mut x, &eta, &mut buf);
            sup = sup.max(norm(&x).powi(p as i32));
        }
        (sups, ends)
    });
    let rows: Vec<MomentRow> = horizons
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            let sups: Vec<f64> = per_path.iter().map(|(s, _)| s[k] / scale).collect();
            let ends: Vec<f64> = per_path.iter().map(|(_, e)| e[k] / scale).collect();
            MomentRow { horizon: h, sup_ratio: MeanSe::from_samples(&sups), end_ratio: MeanSe::from_samples(&ends) }
        })
        .collect();
    let growth_flag = match rows.len() {
        0 | 1 => false,
        len => {
            let (a, b) = (&rows[len - 2].end_ratio, &rows[len - 1].end_ratio);
            b.mean - a.mean > 3.0 * a.combined_se(b)
        }
    };
    Ok(MomentReport { p, x0_norm: norm(x0), rows, growth_flag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;

    fn scalar(a: f64) -> ModelSpec {
        ModelSpec::new(vec![a], Mat::identity(1)).unwrap()
    }

    #[test]
    fn noiseless_decay_is_exact() {
        let model = scalar(-1.0).without_noise();
        let grid = uniform_grid(0.0, 0.01, 100);
        let traj = simulate_path(&model, &DriftField::zero(), &[1.0], &grid, 3).unwrap();
        assert!((traj.last()[0] - (-1.0f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn same_seed_same_path() {
        let model = ModelSpec::new(vec![-1.0, -4.0], Mat::identity(2)).unwrap();
        let grid = uniform_grid(0.0, 0.01, 50);
        let a = simulate_ou(&model, &[0.1, 0.2], &grid, 11).unwrap();
        let b = simulate_ou(&model, &[0.1, 0.2], &grid, 11).unwrap();
        assert_eq!(a, b);
        let c = simulate_ou(&model, &[0.1, 0.2], &grid, 12).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn rejects_non_uniform_grid() {
        let model = scalar(-1.0);
        let err = simulate_ou(&model, &[0.0], &[0.0, 0.1, 0.25], 0).unwrap_err();
        assert!(matches!(err, Error::NonUniformGrid { index: 1, .. }));
    }

    #[test]
    fn nan_drift_aborts() {
        let model = scalar(-1.0);
        let drift = DriftField::new(|_, out| out[0] = f64::NAN, 1.0, None);
        let err = simulate_path(&model, &drift, &[0.0], &uniform_grid(0.0, 0.1, 3), 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, .. }));
    }

    #[test]
    fn zero_tilt_has_zero_logweight() {
        let model = scalar(-1.0);
        let traj = simulate_ou(&model, &[0.0], &uniform_grid(0.0, 0.01, 20), 1).unwrap();
        assert_eq!(girsanov_logweight(&traj, &model, &DriftField::zero()).unwrap(), 0.0);
    }

    #[test]
    fn one_step_logweight_by_hand() {
        let model = scalar(-1.0);
        let traj = Trajectory {
            n_modes: 1,
            times: vec![0.0, 0.01],
            states: vec![0.0, 0.0],
            noise: vec![0.0],
            dw: vec![0.3],
            quad_form: Mat::identity(1).scale(0.01),
            seed: 0,
        };
        let w = girsanov_logweight(&traj, &model, &DriftField::constant(vec![1.0])).unwrap();
        assert!((w + 0.305).abs() < 1e-15);
    }

    #[test]
    fn missing_increments_rejected() {
        let model = scalar(-1.0);
        let mut traj = simulate_ou(&model, &[0.0], &uniform_grid(0.0, 0.01, 5), 1).unwrap();
        traj.dw.clear();
        assert!(matches!(
            girsanov_logweight(&traj, &model, &DriftField::constant(vec![1.0])),
            Err(Error::MissingIncrements)
        ));
    }

    #[test]
    fn quad_form_matches_closed_form() {
        // diagonal case: Q_kk = Δt · 2aΔt e^{2aΔt} / (e^{2aΔt} - 1)
        let dt = 0.01;
        let model = ModelSpec::new(vec![-1.0, -39.5], Mat::identity(2)).unwrap();
        let s = Scheme::new(&model, dt).unwrap();
        for (k, a) in model.a.iter().enumerate() {
            let u = 2.0 * a * dt;
            let expected = dt * u * u.exp() / u.exp_m1();
            assert!((s.quad_form.get(k, k) - expected).abs() < 1e-15);
        }
        assert!(s.quad_form.get(0, 1).abs() < 1e-15);
        assert!((s.quad_form.get(0, 0) - dt).abs() < 1e-4);
    }

    #[test]
    fn binary_dump_round_trips() {
        let model = ModelSpec::new(vec![-1.0, -2.0], Mat::identity(2)).unwrap();
        let traj = simulate_ou(&model, &[0.5, -0.5], &uniform_grid(0.0, 0.05, 10), 9).unwrap();
        let mut bytes = Vec::new();
        traj.write_binary(&mut bytes).unwrap();
        assert_eq!(Trajectory::read_binary(bytes.as_slice()).unwrap(), traj);
    }

    #[test]
    fn noiseless_moment_ratio() {
        let model = scalar(-1.0).without_noise();
        let rep = moment_audit(&model, &DriftField::zero(), &[3.0], &[1.0, 2.0], 2, 4, 0.01, 0).unwrap();
        for row in &rep.rows {
            assert!((row.sup_ratio.mean - 9.0 / 16.0).abs() < 1e-14);
        }
        assert!(!rep.growth_flag);
        assert!(moment_audit(&model, &DriftField::zero(), &[3.0], &[1.0], 3, 4, 0.01, 0).is_err());
    }
}
