//! Vanishing-discount limit `α → 0` and the audits of the resulting
//! ergodic pair `(λ̄, v̄)`.

use log::info;
use serde::{Deserialize, Serialize};

use crate::bsde::{path_identity_samples, solve_discounted, GridSpec, ResidualStats, SolveReport, SolverParams, ValueFunction};
use crate::error::{Error, Result};
use crate::forward::Scheme;
use crate::linalg::{norm, norm_sq};
use crate::mc::par_replicas;
use crate::model::{DriftField, DriverSpec, ModelSpec};
use crate::rng::{fill_normals, stream};
use crate::stats::MeanSe;
use crate::tolerance::allowance;

/// Default discount ladder.
pub const DEFAULT_SCHEDULE: [f64; 6] = [0.5, 0.25, 0.1, 0.05, 0.02, 0.01];

/// Agreement required between λ estimates from different anchors or runs.
pub const LAMBDA_AGREEMENT: f64 = 2e-2;

/// Grid, ladder and solver settings of one vanishing-discount run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderConfig {
    pub schedule: Vec<f64>,
    pub grid: GridSpec,
    pub params: SolverParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErgodicSolution {
    pub lambda_bar: f64,
    /// `v^{α_last} − v^{α_last}(anchor)`, stored with `alpha = 0`.
    pub v_bar: ValueFunction,
    pub alpha_schedule: Vec<f64>,
    /// `λ_α = α v^α(anchor)` per rung.
    pub lambda_trace: Vec<f64>,
    /// `|λ_{α_i} − λ_{α_{i-1}}|`, first entry NaN.
    pub rung_gaps: Vec<f64>,
    /// Sup-norm distance between successive `v̄^α`, first entry NaN.
    pub convergence_report: Vec<f64>,
    pub anchor: Vec<f64>,
    pub rungs: Vec<ValueFunction>,
    pub solve_reports: Vec<SolveReport>,
    /// Rung gaps fail to decrease (advisory).
    pub cauchy_flag: bool,
    /// Some `|λ_α|` exceeds the driver bound `l`.
    pub bound_violation: bool,
}

impl ErgodicSolution {
    pub fn final_gap(&self) -> f64 {
        *self.rung_gaps.last().unwrap_or(&f64::NAN)
    }

    /// `Z̄(x) = ∇v̄(x) G`
    pub fn z_bar(&self, model: &ModelSpec, x: &[f64]) -> Vec<f64> {
        self.v_bar.z_field(model, x)
    }
}

/// Whether successive gaps decrease, allowing `slack` of round-off.
pub fn gaps_decreasing(gaps: &[f64], slack: f64) -> bool {
    let g: Vec<f64> = gaps.iter().copied().filter(|v| v.is_finite()).collect();
    g.windows(2).all(|w| w[1] <= w[0] + slack)
}

/// Solves the discounted problem along a decreasing ladder of discounts,
/// warm-starting each rung from `λ_prev/α + v̄_prev`.
#[allow(clippy::too_many_arguments)]
pub fn vanishing_discount(
    model: &ModelSpec,
    drift: &DriftField,
    driver: &DriverSpec,
    cfg: &LadderConfig,
    anchor: Option<&[f64]>,
) -> Result<ErgodicSolution> {
    let schedule = &cfg.schedule;
    if schedule.is_empty() {
        return Err(Error::Config("discount schedule is empty".into()));
    }
    if schedule.windows(2).any(|w| !(w[1] < w[0])) || schedule.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::Config("discount schedule must be positive and strictly decreasing".into()));
    }
    let anchor: Vec<f64> = anchor.map(|a| a.to_vec()).unwrap_or_else(|| vec![0.0; model.n_modes]);
    let mut lambda_trace = Vec::with_capacity(schedule.len());
    let mut rung_gaps = Vec::with_capacity(schedule.len());
    let mut convergence_report = Vec::with_capacity(schedule.len());
    let mut rungs: Vec<ValueFunction> = Vec::with_capacity(schedule.len());
    let mut solve_reports = Vec::with_capacity(schedule.len());
    let mut prev_bar: Option<ValueFunction> = None;
    for &alpha in schedule {
        let init: Option<Vec<f64>> = match (&prev_bar, lambda_trace.last()) {
            (Some(bar), Some(&lam)) => Some(bar.values.iter().map(|v| v + lam / alpha).collect()),
            _ => None,
        };
        let sol = solve_discounted(model, drift, driver, alpha, &cfg.grid, &cfg.params, init.as_deref())?;
        let at_anchor = sol.vf.interpolate(&anchor);
        let lambda = alpha * at_anchor;
        let bar = sol.vf.shifted(-at_anchor);
        info!("alpha={alpha}: lambda={lambda:.6} ({} sweeps)", sol.report.iterations);
        rung_gaps.push(lambda_trace.last().map_or(f64::NAN, |prev: &f64| (lambda - prev).abs()));
        convergence_report.push(prev_bar.as_ref().map_or(f64::NAN, |p| p.max_abs_diff(&bar)));
        lambda_trace.push(lambda);
        prev_bar = Some(bar);
        rungs.push(sol.vf);
        solve_reports.push(sol.report);
    }
    let mut v_bar = prev_bar.expect("schedule is non-empty");
    v_bar.alpha = 0.0;
    let cauchy_flag = !gaps_decreasing(&rung_gaps, 1e-10);
    let bound_violation = lambda_trace.iter().any(|l| l.abs() > driver.l * (1.0 + 1e-9));
    Ok(ErgodicSolution {
        lambda_bar: *lambda_trace.last().unwrap(),
        v_bar,
        alpha_schedule: schedule.clone(),
        lambda_trace,
        rung_gaps,
        convergence_report,
        anchor,
        rungs,
        solve_reports,
        cauchy_flag,
        bound_violation,
    })
}

/// Integrated ergodic identity
/// `E v̄(X_T) − v̄(x0) + E ∫_0^T (ψ(X, Z̄) − λ̄) ds` along forward paths.
#[allow(clippy::too_many_arguments)]
pub fn ebsde_residual(
    model: &ModelSpec,
    drift: &DriftField,
    driver: &DriverSpec,
    sol: &ErgodicSolution,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    n_mc: usize,
    seed: u64,
    allowance: f64,
) -> Result<ResidualStats> {
    let samples =
        path_identity_samples(model, drift, driver, &sol.v_bar, 0.0, sol.lambda_bar, x0, horizon, dt, n_mc, seed)?;
    Ok(ResidualStats::new(MeanSe::from_samples(&samples), allowance))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MildResidual {
    pub x: Vec<f64>,
    pub stats: ResidualStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MildReport {
    pub horizon: f64,
    pub quadrature_intervals: usize,
    pub points: Vec<MildResidual>,
    pub pass: bool,
}

/// Mild form `r(x) = P_T[v̄](x) + ∫_0^T (P_s[ψ(·, ∇v̄ G)](x) − λ̄) ds − v̄(x)`.
///
/// The semigroup is applied by Monte Carlo and the outer time integral by
/// composite Simpson on `intervals` (even) panels of `[0, T]`.
#[allow(clippy::too_many_arguments)]
pub fn hjb_mild_residual(
    model: &ModelSpec,
    drift: &DriftField,
    driver: &DriverSpec,
    sol: &ErgodicSolution,
    horizon: f64,
    x_list: &[Vec<f64>],
    intervals: usize,
    dt: f64,
    n_mc: usize,
    seed: u64,
    allowance: f64,
) -> Result<MildReport> {
    let intervals = intervals.max(2) + intervals % 2;
    let steps = (horizon / dt).round().max(1.0) as usize;
    let steps = steps.div_ceil(intervals) * intervals;
    let dt = horizon / steps as f64;
    let per_panel = steps / intervals;
    let scheme = Scheme::new(model, dt)?;
    let n = model.n_modes;
    let v_bar = &sol.v_bar;
    let integrand = |x: &[f64]| driver.eval(x, &v_bar.z_field(model, x));
    let simpson: Vec<f64> = (0..=intervals)
        .map(|k| {
            let w = if k == 0 || k == intervals { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            w * horizon / (3.0 * intervals as f64)
        })
        .collect();
    let mut points = Vec::with_capacity(x_list.len());
    for (pi, x0) in x_list.iter().enumerate() {
        let v0 = v_bar.interpolate(x0);
        let samples = par_replicas(n_mc, |i| {
            let mut rng = stream(seed, (pi * n_mc + i) as u64);
            let mut x = x0.clone();
            let mut buf = vec![0.0; n];
            let mut eta = vec![0.0; n];
            let mut acc = simpson[0] * integrand(&x);
            for k in 1..=intervals {
                for _ in 0..per_panel {
                    fill_normals(&mut rng, &mut eta);
                    scheme.step(drift, &mut x, &eta, &mut buf);
                }
                acc += simpson[k] * integrand(&x);
            }
            v_bar.interpolate(&x) + acc - sol.lambda_bar * horizon - v0
        });
        points.push(MildResidual { x: x0.clone(), stats: ResidualStats::new(MeanSe::from_samples(&samples), allowance) });
    }
    let pass = points.iter().all(|p| p.stats.pass);
    Ok(MildReport { horizon, quadrature_intervals: intervals, points, pass })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaUniquenessReport {
    pub anchors: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
    pub max_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Re-runs the ladder anchored at each point of `anchors` and compares
/// the resulting `λ̄`.
pub fn lambda_uniqueness_audit(
    model: &ModelSpec,
    drift: &DriftField,
    driver: &DriverSpec,
    cfg: &LadderConfig,
    anchors: &[Vec<f64>],
) -> Result<LambdaUniquenessReport> {
    let mut lambdas = Vec::with_capacity(anchors.len());
    for a in anchors {
        lambdas.push(vanishing_discount(model, drift, driver, cfg, Some(a))?.lambda_bar);
    }
    let max_gap = max_pairwise_gap(&lambdas);
    Ok(LambdaUniquenessReport {
        anchors: anchors.to_vec(),
        lambdas,
        max_gap,
        tolerance: LAMBDA_AGREEMENT,
        pass: max_gap <= LAMBDA_AGREEMENT,
    })
}

pub fn max_pairwise_gap(xs: &[f64]) -> f64 {
    let mut gap: f64 = 0.0;
    for (i, a) in xs.iter().enumerate() {
        for b in &xs[i + 1..] {
            gap = gap.max((a - b).abs());
        }
    }
    gap
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovianUniquenessReport {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_gap: f64,
    pub v_bar_gap: f64,
    pub v_bar_allowance: f64,
    /// Half-width of the box on which the `v̄` are compared.
    pub common_box: Vec<f64>,
    pub pass: bool,
}

/// Two independent ladder runs must agree on `λ̄` and on `v̄` over the
/// common box, the latter within the sum of both runs' allowances
/// `C·(h + cell²)`.
pub fn markovian_uniqueness_audit(
    model: &ModelSpec,
    drift: &DriftField,
    driver: &DriverSpec,
    run_a: &LadderConfig,
    run_b: &LadderConfig,
    compare_box: Option<&[f64]>,
) -> Result<MarkovianUniquenessReport> {
    let a = vanishing_discount(model, drift, driver, run_a, None)?;
    let b = vanishing_discount(model, drift, driver, run_b, None)?;
    let allowance = allowance(run_a.params.h, run_a.grid.max_cell()) + allowance(run_b.params.h, run_b.grid.max_cell());
    Ok(compare_solutions(&a, &b, allowance, compare_box))
}

pub fn compare_solutions(
    a: &ErgodicSolution,
    b: &ErgodicSolution,
    allowance: f64,
    compare_box: Option<&[f64]>,
) -> MarkovianUniquenessReport {
    let (ga, gb) = (&a.v_bar.grid, &b.v_bar.grid);
    let common: Vec<f64> = match compare_box {
        Some(c) => c.to_vec(),
        None => ga.half_width.iter().zip(&gb.half_width).map(|(x, y)| x.min(*y)).collect(),
    };
    let probe = GridSpec::new(common.clone(), ga.nodes.iter().zip(&gb.nodes).map(|(p, q)| *p.min(q)).collect())
        .expect("valid probe grid");
    let mut gap: f64 = 0.0;
    for i in 0..probe.len() {
        let x = probe.point(i);
        gap = gap.max((a.v_bar.interpolate(&x) - b.v_bar.interpolate(&x)).abs());
    }
    let lambda_gap = (a.lambda_bar - b.lambda_bar).abs();
    MarkovianUniquenessReport {
        lambda_a: a.lambda_bar,
        lambda_b: b.lambda_bar,
        lambda_gap,
        v_bar_gap: gap,
        v_bar_allowance: allowance,
        common_box: common,
        pass: lambda_gap <= LAMBDA_AGREEMENT && gap <= allowance,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformBoundsReport {
    pub alphas: Vec<f64>,
    /// `max_{x,x'} |v^α(x) − v^α(x')| / (1 + |x|² + |x'|²)`
    pub c_increment: Vec<f64>,
    /// `max_x |∇v^α(x)| / (1 + |x|²)`
    pub c_gradient: Vec<f64>,
    pub ratio_increment: f64,
    pub ratio_gradient: f64,
    /// Smallest `c` with `|v̄(x)| ≤ c (1 + |x|²)` on the grid.
    pub v_bar_growth: f64,
    pub max_ratio: f64,
    pub pass: bool,
}

/// `max/min` of the constants; entries at or below `floor` count as zero.
fn spread_ratio(cs: &[f64], floor: f64) -> f64 {
    let max = cs.iter().copied().fold(0.0, f64::max);
    let min = cs.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= floor {
        1.0
    } else if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// `α`-uniformity of the increment and gradient quotients over the ladder.
/// Increments are taken over a subgrid of at most `max_points` nodes.
pub fn uniform_bounds_audit(sol: &ErgodicSolution, max_points: usize, max_ratio: f64) -> UniformBoundsReport {
    let grid = &sol.v_bar.grid;
    let stride = ((grid.len() as f64 / max_points.max(1) as f64).ceil() as usize).max(1);
    let sub: Vec<usize> = (0..grid.len()).step_by(stride).collect();
    let pts: Vec<Vec<f64>> = sub.iter().map(|&i| grid.point(i)).collect();
    let mut c_increment = Vec::with_capacity(sol.rungs.len());
    let mut c_gradient = Vec::with_capacity(sol.rungs.len());
    for vf in &sol.rungs {
        let vals: Vec<f64> = sub.iter().map(|&i| vf.values[i]).collect();
        let mut ci: f64 = 0.0;
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                let q = (vals[a] - vals[b]).abs() / (1.0 + norm_sq(&pts[a]) + norm_sq(&pts[b]));
                ci = ci.max(q);
            }
        }
        let cg = (0..grid.len())
            .map(|i| {
                let x = grid.point(i);
                norm(&vf.gradient(&x)) / (1.0 + norm_sq(&x))
            })
            .fold(0.0, f64::max);
        c_increment.push(ci);
        c_gradient.push(cg);
    }
    let v_bar_growth = (0..grid.len())
        .map(|i| sol.v_bar.values[i].abs() / (1.0 + norm_sq(&grid.point(i))))
        .fold(0.0, f64::max);
    let scale = sol.rungs.iter().map(|v| v.sup_norm()).fold(1.0, f64::max);
    let floor = 1e-9 * scale;
    let ratio_increment = spread_ratio(&c_increment, floor);
    let ratio_gradient = spread_ratio(&c_gradient, floor);
    let finite = c_increment.iter().chain(&c_gradient).all(|c| c.is_finite());
    UniformBoundsReport {
        alphas: sol.alpha_schedule.clone(),
        c_increment,
        c_gradient,
        ratio_increment,
        ratio_gradient,
        v_bar_growth,
        max_ratio,
        pass: finite && ratio_increment <= max_ratio && ratio_gradient <= max_ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::GridSpec;
    use crate::linalg::Mat;

    fn cfg(nodes: usize) -> LadderConfig {
        LadderConfig {
            schedule: DEFAULT_SCHEDULE.to_vec(),
            grid: GridSpec::uniform(vec![2.0, 2.0], nodes).unwrap(),
            params: SolverParams::default(),
        }
    }

    #[test]
    fn constant_driver_ladder() {
        let model = ModelSpec::new(vec![-1.0, -4.0], Mat::identity(2)).unwrap();
        let sol = vanishing_discount(&model, &DriftField::zero(), &DriverSpec::constant(1.0), &cfg(9), None).unwrap();
        for l in &sol.lambda_trace {
            assert!((l - 1.0).abs() < 1e-10);
        }
        assert!(sol.v_bar.sup_norm() < 1e-8);
        let ub = uniform_bounds_audit(&sol, 100, 2.0);
        assert!(ub.pass && ub.c_gradient.iter().all(|c| *c < 1e-6));
    }

    #[test]
    fn schedule_must_decrease() {
        let model = ModelSpec::new(vec![-1.0, -4.0], Mat::identity(2)).unwrap();
        let mut c = cfg(5);
        c.schedule = vec![0.1, 0.2];
        assert!(vanishing_discount(&model, &DriftField::zero(), &DriverSpec::constant(1.0), &c, None).is_err());
    }

    #[test]
    fn gap_helpers() {
        assert!(gaps_decreasing(&[f64::NAN, 0.3, 0.2, 0.2], 0.0));
        assert!(!gaps_decreasing(&[f64::NAN, 0.1, 0.2], 1e-10));
        assert_eq!(max_pairwise_gap(&[1.0, 1.5, 0.75]), 0.75);
        assert_eq!(spread_ratio(&[0.0, 1e-12], 1e-10), 1.0);
        assert_eq!(spread_ratio(&[0.0, 1.0], 0.0), f64::INFINITY);
    }
}
