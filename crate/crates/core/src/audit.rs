//! The acceptance suite: twelve numbered criteria, each composed from the
//! module audits and run on the shipped scenarios.
//!
//! [`Audit`] holds the scenario under audit (`main`, the heat scenario by
//! default) and the built-in companions used by the oracle criteria. The
//! ergodic solution of `main` is computed once and shared.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bsde::{solve_discounted, ValueFunction};
use crate::control::{
    feedback_index, girsanov_cost_check, optimality_gap_audit, policy_library, CostParams, Policy, PolicyCost,
};
use crate::coupling::{
    bridge_audit, discrete_coupling_check, drift_invariance_audit, estimate_kappa1, iterated_coupling, test_library,
    tv_decay_estimate, BridgeAudit, CouplingConfig, CouplingRunStats, DiscreteCouplingReport, Kappa1Estimate,
    TvDecayReport,
};
use crate::ergodic::{
    ebsde_residual, gaps_decreasing, hjb_mild_residual, markovian_uniqueness_audit, max_pairwise_gap,
    uniform_bounds_audit, vanishing_discount, ErgodicSolution, LadderConfig, DEFAULT_SCHEDULE, LAMBDA_AGREEMENT,
};
use crate::error::{Error, Result};
use crate::mc::with_workers;
use crate::model::DriftField;
use crate::oracle::{fd_hjb_1d, gaussian_stationary_mean, ou_discounted_mc, ou_discounted_quadrature};
use crate::recurrence::{hitting_monotone, hitting_time_cdf_multi, HittingReport};
use crate::report;
use crate::scenario::{DriverConfig, NonlinearityConfig, Resolved, Scenario};
use crate::stats::MeanSe;
use crate::tolerance::allowance;

pub const CRITERIA: [u32; 12] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12];

/// Exactness tolerance of the constant-driver check.
pub const EXACT_TOL: f64 = 1e-8;
/// Gap allowed between the grid solver and the finite-difference oracle.
pub const FD_TOL: f64 = 1e-2;
/// Final rung gap of the ladder.
pub const FINAL_GAP_TOL: f64 = 2e-2;
/// Relative error allowed on the OU decay rate.
pub const OU_RATE_TOL: f64 = 0.2;
/// Nodes of the finite-difference oracle.
pub const FD_NODES: usize = 401;
/// Discount standing in for zero in the finite-difference ergodic constant.
pub const FD_ERGODIC_ALPHA: f64 = 1e-4;

pub fn criterion_name(id: u32) -> &'static str {
    match id {
        1 => "constant-driver exactness",
        2 => "z-free oracle",
        3 => "one-dimensional finite-difference oracle",
        4 => "ebsde and mild residuals",
        5 => "vanishing-discount stability",
        6 => "uniform bounds",
        7 => "lambda and Markovian uniqueness",
        8 => "coupling suite",
        9 => "drift invariance",
        10 => "recurrence",
        11 => "control optimality",
        12 => "scheme sanity",
        _ => "unknown",
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: u32,
    pub name: String,
    pub pass: bool,
    /// One-line account of the deciding numbers.
    pub summary: String,
    pub seconds: f64,
    pub details: Value,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} [{}] ({:.1}s): {}",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.summary
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub criteria: Vec<CriterionOutcome>,
    pub pass: bool,
}

/// Raw reports kept for CSV output.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub tv: Option<TvDecayReport>,
    pub meeting: Option<CouplingRunStats>,
    pub hitting: Vec<HittingReport>,
    pub policies: Vec<PolicyCost>,
}

pub struct Audit {
    pub main: Scenario,
    pub constant: Scenario,
    pub zfree: Scenario,
    pub scalar_ou: Scenario,
    pub adversarial: Scenario,
    solution: Option<Arc<ErgodicSolution>>,
    pub artifacts: Artifacts,
}

struct Verdict {
    pass: bool,
    summary: String,
    details: Value,
}

fn verdict(pass: bool, summary: String, details: Value) -> Result<Verdict> {
    Ok(Verdict { pass, summary, details })
}

impl Audit {
    /// Audits `main` with the built-in companion scenarios.
    pub fn new(main: Scenario) -> Result<Self> {
        Ok(Self {
            main,
            constant: Scenario::builtin("constant", &[])?,
            zfree: Scenario::builtin("zfree", &[])?,
            scalar_ou: Scenario::builtin("scalar_ou", &[])?,
            adversarial: Scenario::builtin("adversarial", &[])?,
            solution: None,
            artifacts: Artifacts::default(),
        })
    }

    /// Vanishing-discount solution of `main`, computed on first use.
    pub fn solution(&mut self) -> Result<Arc<ErgodicSolution>> {
        if let Some(s) = &self.solution {
            return Ok(s.clone());
        }
        let r = self.main.resolve()?;
        let cfg = self.main.ladder_config(&r.model)?;
        let anchor = self.main.ladder.anchors.first().cloned();
        let sol = Arc::new(vanishing_discount(&r.model, &r.drift, &r.driver, &cfg, anchor.as_deref())?);
        self.solution = Some(sol.clone());
        Ok(sol)
    }

    /// Runs one criterion. Numerical failures count as a failed criterion;
    /// configuration errors are returned.
    pub fn run(&mut self, id: u32) -> Result<CriterionOutcome> {
        let start = Instant::now();
        let out = match id {
            1 => self.constant_exactness(),
            2 => self.zfree_oracle(),
            3 => self.fd_oracle(),
            4 => self.residuals(),
            5 => self.ladder_stability(),
            6 => self.uniform_bounds(),
            7 => self.uniqueness(),
            8 => self.coupling_suite(),
            9 => self.drift_invariance(),
            10 => self.recurrence(),
            11 => self.control_optimality(),
            12 => self.scheme_sanity(),
            _ => return Err(Error::Config(format!("no acceptance criterion {id}"))),
        };
        let v = match out {
            Ok(v) => v,
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => Verdict { pass: false, summary: format!("error: {e}"), details: json!({ "error": e.to_string() }) },
        };
        Ok(CriterionOutcome {
            id,
            name: criterion_name(id).to_string(),
            pass: v.pass,
            summary: v.summary,
            seconds: start.elapsed().as_secs_f64(),
            details: v.details,
        })
    }

    /// Runs `ids` in order, calling `progress` after each.
    pub fn run_all(&mut self, ids: &[u32], mut progress: impl FnMut(&CriterionOutcome)) -> Result<AuditReport> {
        let mut criteria = Vec::with_capacity(ids.len());
        for &id in ids {
            let o = self.run(id)?;
            progress(&o);
            criteria.push(o);
        }
        let pass = criteria.iter().all(|c| c.pass);
        Ok(AuditReport { criteria, pass })
    }

    fn constant_exactness(&mut self) -> Result<Verdict> {
        let s = &self.constant;
        let DriverConfig::Constant { value } = s.driver else {
            return Err(Error::Config("constant scenario must use a constant driver".into()));
        };
        let r = s.resolve()?;
        let cfg = LadderConfig { schedule: DEFAULT_SCHEDULE.to_vec(), ..s.ladder_config(&r.model)? };
        let sol = vanishing_discount(&r.model, &r.drift, &r.driver, &cfg, None)?;
        let lambda_err = sol.lambda_trace.iter().map(|l| (l - value).abs()).fold(0.0, f64::max);
        let v_bar_sup = sol.v_bar.sup_norm();
        let bar_err = (sol.lambda_bar - value).abs();
        let pass = lambda_err <= EXACT_TOL && bar_err <= EXACT_TOL && v_bar_sup <= EXACT_TOL;
        verdict(
            pass,
            format!("max |lambda_alpha - {value}| = {lambda_err:.1e}, sup |v_bar| = {v_bar_sup:.1e}"),
            json!({ "value": value, "lambda_trace": sol.lambda_trace, "lambda_bar": sol.lambda_bar,
                    "max_lambda_error": lambda_err, "v_bar_sup": v_bar_sup, "tolerance": EXACT_TOL }),
        )
    }

    fn zfree_oracle(&mut self) -> Result<Verdict> {
        let s = &self.zfree;
        let DriverConfig::State { state_cost } = &s.driver else {
            return Err(Error::Config("z-free scenario must use a state driver".into()));
        };
        let r = s.resolve()?;
        if !r.drift.is_zero() {
            return Err(Error::Config("z-free scenario must have zero nonlinearity".into()));
        }
        let alpha = 0.1;
        let grid = s.grid(&r.model)?;
        let dp = solve_discounted(&r.model, &r.drift, &r.driver, alpha, &grid, &s.solver_params(), None)?;
        let band_grid = 2.0 * allowance(s.solver.h, grid.max_cell());
        let sd = r.model.stationary_std();
        let cost = state_cost.clone();
        let phi = move |x: &[f64]| cost.eval(x);
        let coordinate = match state_cost {
            crate::scenario::StateCost::TanhSquare { coordinate, .. }
            | crate::scenario::StateCost::TanhAffine { coordinate, .. } => *coordinate,
        };
        let mut probes = Vec::new();
        let mut worst: f64 = 0.0;
        let mut pass = true;
        let mut k = 0;
        for i in [-1.0, 0.0, 1.0] {
            for j in [-1.0, 0.0, 1.0] {
                let mut x = vec![0.0; r.model.n_modes];
                x[0] = 2.0 * sd[0] * i;
                if x.len() > 1 {
                    x[1] = 2.0 * sd[1] * j;
                } else if j != 0.0 {
                    continue;
                }
                let v = dp.vf.interpolate(&x);
                let mc = ou_discounted_mc(&r.model, &phi, alpha, &x, s.residual.n_mc, s.seed_for("oracle", k))?;
                let single = |y: f64| {
                    let mut p = vec![0.0; x.len()];
                    p[coordinate] = y;
                    phi(&p)
                };
                let quad = ou_discounted_quadrature(&r.model, &single, coordinate, alpha, &x);
                let gap = (v - mc.mean).abs();
                let band = (2.0 * mc.se).max(band_grid);
                pass &= gap <= band;
                worst = worst.max(gap / band);
                probes.push(json!({ "x": x, "grid": v, "mc": mc, "quadrature": quad, "gap": gap, "band": band }));
                k += 1;
            }
        }
        let ladder = vanishing_discount(&r.model, &r.drift, &r.driver, &s.ladder_config(&r.model)?, None)?;
        let stationary = gaussian_stationary_mean(&r.model, &phi, 24);
        let lambda_gap = (ladder.lambda_bar - stationary).abs();
        pass &= lambda_gap <= FD_TOL;
        verdict(
            pass,
            format!("worst probe gap/band = {worst:.2}, lambda gap = {lambda_gap:.1e} (tol {FD_TOL:.0e})"),
            json!({ "alpha": alpha, "probes": probes, "lambda_bar": ladder.lambda_bar,
                    "stationary_mean": stationary, "lambda_gap": lambda_gap }),
        )
    }

    fn fd_oracle(&mut self) -> Result<Verdict> {
        let s = &self.scalar_ou;
        let r = s.resolve()?;
        let spec = r.control.as_ref().ok_or_else(|| Error::Config("scalar_ou needs a control driver".into()))?;
        if r.model.n_modes != 1 {
            return Err(Error::Config("scalar_ou must have one mode".into()));
        }
        let grid = s.grid(&r.model)?;
        let inner = r.model.default_box()[0];
        let fd_half = 2.0 * grid.half_width[0];
        let drift = r.drift.clone();
        let drift_fn = move |x: f64| drift.eval(&[x])[0];
        let probe: Vec<f64> = (0..=200).map(|i| -inner + 2.0 * inner * i as f64 / 200.0).collect();
        let mut pass = true;
        let mut rows = Vec::new();
        for alpha in [0.1, 0.02] {
            let dp = solve_discounted(&r.model, &r.drift, &r.driver, alpha, &grid, &s.solver_params(), None)?;
            let fd = fd_hjb_1d(&r.model, &drift_fn, spec, alpha, fd_half, FD_NODES)?;
            let gap = probe.iter().map(|&x| (dp.vf.interpolate(&[x]) - fd.interpolate(x)).abs()).fold(0.0, f64::max);
            pass &= gap <= FD_TOL;
            rows.push(json!({ "alpha": alpha, "sup_gap": gap }));
        }
        let ladder = vanishing_discount(&r.model, &r.drift, &r.driver, &s.ladder_config(&r.model)?, None)?;
        let fd = fd_hjb_1d(&r.model, &drift_fn, spec, FD_ERGODIC_ALPHA, fd_half, FD_NODES)?;
        let fd_lambda = FD_ERGODIC_ALPHA * fd.interpolate(0.0);
        let lambda_gap = (ladder.lambda_bar - fd_lambda).abs();
        pass &= lambda_gap <= FD_TOL;
        let gaps: Vec<String> = rows.iter().map(|r| format!("{:.1e}", r["sup_gap"].as_f64().unwrap_or(f64::NAN))).collect();
        verdict(
            pass,
            format!("sup gaps [{}] at alpha 0.1, 0.02; lambda gap = {lambda_gap:.1e} (tol {FD_TOL:.0e})", gaps.join(", ")),
            json!({ "compare_half_width": inner, "fd_half_width": fd_half, "fd_nodes": FD_NODES, "rows": rows,
                    "lambda_bar": ladder.lambda_bar, "fd_lambda": fd_lambda, "lambda_gap": lambda_gap }),
        )
    }

    fn residuals(&mut self) -> Result<Verdict> {
        let sol = self.solution()?;
        let s = &self.main;
        let r = s.resolve()?;
        let c = &s.residual;
        let grid = &sol.v_bar.grid;
        let allow = allowance(c.dt, grid.max_cell());
        let x0 = s.point_or_origin(&c.x0);
        let mild_points = if c.mild_points.is_empty() { vec![x0.clone()] } else { c.mild_points.clone() };
        let run = |sol: &ErgodicSolution| -> Result<(crate::bsde::ResidualStats, crate::ergodic::MildReport)> {
            let e = ebsde_residual(
                &r.model,
                &r.drift,
                &r.driver,
                sol,
                &x0,
                c.horizon,
                c.dt,
                c.n_mc,
                s.seed_for("bsde", 0),
                allow,
            )?;
            let m = hjb_mild_residual(
                &r.model,
                &r.drift,
                &r.driver,
                sol,
                c.horizon,
                &mild_points,
                c.quadrature_intervals,
                c.dt,
                c.n_mc,
                s.seed_for("bsde", 1),
                allow,
            )?;
            Ok((e, m))
        };
        let (ebsde, mild) = run(&sol)?;
        let mut shifted = (*sol).clone();
        shifted.lambda_bar += 0.1;
        let (ebsde_l, mild_l) = run(&shifted)?;
        let corrupted = corrupt(&sol);
        let (ebsde_v, mild_v) = run(&corrupted)?;
        let flagged = |e: &crate::bsde::ResidualStats, m: &crate::ergodic::MildReport| !e.pass && !m.pass;
        let controls_ok = flagged(&ebsde_l, &mild_l) && flagged(&ebsde_v, &mild_v);
        let pass = ebsde.pass && mild.pass && controls_ok;
        let worst = std::iter::once(&ebsde)
            .chain(mild.points.iter().map(|p| &p.stats))
            .map(|st| st.m.mean.abs() / (3.0 * st.m.se + st.allowance))
            .fold(0.0, f64::max);
        verdict(
            pass,
            format!(
                "ebsde m = {:.2e} +/- {:.1e}, worst |m|/band = {worst:.2}, negative controls flagged: {controls_ok}",
                ebsde.m.mean, ebsde.m.se
            ),
            json!({ "allowance": allow, "ebsde": ebsde, "mild": mild,
                    "negative_controls": { "lambda_shift": { "ebsde": ebsde_l, "mild": mild_l },
                                           "corrupted_v_bar": { "ebsde": ebsde_v, "mild": mild_v } } }),
        )
    }

    fn ladder_stability(&mut self) -> Result<Verdict> {
        let sol = self.solution()?;
        let schedule_ok = sol.alpha_schedule == DEFAULT_SCHEDULE;
        let decreasing = gaps_decreasing(&sol.rung_gaps, 1e-10);
        let final_gap = sol.final_gap();
        let pass = schedule_ok && decreasing && final_gap <= FINAL_GAP_TOL;
        verdict(
            pass,
            format!("gaps decreasing: {decreasing}, final gap = {final_gap:.1e} (tol {FINAL_GAP_TOL:.0e})"),
            json!({ "alpha_schedule": sol.alpha_schedule, "lambda_trace": sol.lambda_trace,
                    "rung_gaps": sol.rung_gaps, "default_schedule": schedule_ok, "lambda_bar": sol.lambda_bar }),
        )
    }

    fn uniform_bounds(&mut self) -> Result<Verdict> {
        let sol = self.solution()?;
        let l = &self.main.ladder;
        let u = uniform_bounds_audit(&sol, l.bounds_max_points, l.bounds_max_ratio);
        verdict(
            u.pass,
            format!(
                "increment ratio = {:.3}, gradient ratio = {:.3} (max {})",
                u.ratio_increment, u.ratio_gradient, u.max_ratio
            ),
            serde_json::to_value(&u)?,
        )
    }

    fn uniqueness(&mut self) -> Result<Verdict> {
        let sol = self.solution()?;
        let s = &self.main;
        let r = s.resolve()?;
        let cfg = s.ladder_config(&r.model)?;
        let anchors = if s.ladder.anchors.is_empty() {
            let mut e = vec![0.0; r.model.n_modes];
            e[0] = 1.0;
            vec![vec![0.0; r.model.n_modes], e.clone(), e.iter().map(|v| -v).collect()]
        } else {
            s.ladder.anchors.clone()
        };
        let mut lambdas = Vec::with_capacity(anchors.len());
        for a in &anchors {
            if *a == sol.anchor {
                lambdas.push(sol.lambda_bar);
            } else {
                lambdas.push(vanishing_discount(&r.model, &r.drift, &r.driver, &cfg, Some(a))?.lambda_bar);
            }
        }
        let anchor_gap = max_pairwise_gap(&lambdas);
        let alt = LadderConfig {
            schedule: s.ladder.alt_schedule.clone(),
            grid: crate::bsde::GridSpec::uniform(cfg.grid.half_width.clone(), s.ladder.alt_nodes)?,
            params: crate::bsde::SolverParams { inner: s.ladder.alt_inner.clone(), ..s.solver_params() },
        };
        let markov = markovian_uniqueness_audit(&r.model, &r.drift, &r.driver, &cfg, &alt, None)?;
        let pass = anchor_gap <= LAMBDA_AGREEMENT && markov.pass;
        verdict(
            pass,
            format!(
                "anchor lambda spread = {anchor_gap:.1e}, run lambda gap = {:.1e} (tol {LAMBDA_AGREEMENT:.0e}), v_bar gap = {:.1e} vs allowance {:.1e}",
                markov.lambda_gap, markov.v_bar_gap, markov.v_bar_allowance
            ),
            json!({ "anchors": anchors, "anchor_lambdas": lambdas, "anchor_gap": anchor_gap, "markovian": markov }),
        )
    }

    fn coupling_suite(&mut self) -> Result<Verdict> {
        let run = coupling_run(&self.main)?;
        let tv = tv_run(&self.scalar_ou)?;
        let rate_target = -self.scalar_ou.resolve()?.model.a[0];
        let eta = tv.fit.as_ref().map_or(f64::NAN, |f| f.eta_hat);
        let rate_ok = self.scalar_ou.model.n_modes == 1 && (eta - rate_target).abs() <= OU_RATE_TOL * rate_target;
        let pass = run.pass() && rate_ok;
        let summary = format!(
            "discrete {}, bridge bound {} marginals {}, gamma = {:.3} R2 = {:.3}, OU rate = {eta:.3}",
            run.discrete.pass,
            run.bridge.bound_ok,
            run.bridge.marginals_ok,
            run.iterated.gamma_hat.unwrap_or(f64::NAN),
            run.iterated_r2()
        );
        let details = json!({ "coupling": run.to_json(), "ou_tv": tv, "ou_rate_target": rate_target, "ou_rate_ok": rate_ok });
        self.artifacts.tv = Some(tv);
        self.artifacts.meeting = Some(run.iterated);
        verdict(pass, summary, details)
    }

    fn drift_invariance(&mut self) -> Result<Verdict> {
        let s = &self.main;
        let r = s.resolve()?;
        let other = match s.model.f {
            NonlinearityConfig::Cos { amplitude } => NonlinearityConfig::Sin { amplitude },
            NonlinearityConfig::Sin { amplitude } => NonlinearityConfig::Cos { amplitude },
            _ => return self.drift_invariance_with(&r, r.drift.negated()),
        };
        let mut alt = s.clone();
        alt.model.f = other;
        let drift_b = alt.resolve()?.drift;
        self.drift_invariance_with(&r, drift_b)
    }

    fn drift_invariance_with(&self, r: &Resolved, drift_b: DriftField) -> Result<Verdict> {
        let s = &self.main;
        let step = 0.5 / r.model.k_diss;
        let times: Vec<f64> = (0..=12).map(|i| step * i as f64).collect();
        let x = s.recurrence_start(&r.model);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        let d = drift_invariance_audit(
            &r.model,
            &r.drift,
            &drift_b,
            &x,
            &y,
            &times,
            &test_library(&r.model.stationary_std()),
            s.coupling.tv_n_mc,
            s.coupling.dt,
            s.seed_for("coupling", 5),
        )?;
        let pass = d.pass && d.within_hypothesis;
        verdict(
            pass,
            format!(
                "eta ratio = {:.2}, c ratio = {:.2} (max 3), equal sup bounds: {}",
                d.eta_ratio.unwrap_or(f64::NAN),
                d.c_ratio.unwrap_or(f64::NAN),
                d.within_hypothesis
            ),
            serde_json::to_value(&d)?,
        )
    }

    fn recurrence(&mut self) -> Result<Verdict> {
        let mut rows = Vec::new();
        let mut pass = true;
        let mut worst = f64::INFINITY;
        let mut seen: Vec<String> = Vec::new();
        for s in [&self.main, &self.adversarial, &self.zfree, &self.constant, &self.scalar_ou] {
            if seen.contains(&s.id) {
                continue;
            }
            seen.push(s.id.clone());
            let run = recurrence_run(s)?;
            pass &= run.pass;
            worst = run.reports.iter().map(HittingReport::final_prob).fold(worst, f64::min);
            if s.id == self.main.id {
                self.artifacts.hitting = run.reports.clone();
            }
            rows.push(json!({ "scenario": s.id, "run": run }));
        }
        verdict(
            pass,
            format!("smallest final hit probability = {worst:.4} over {} scenarios", seen.len()),
            json!({ "scenarios": rows }),
        )
    }

    fn control_optimality(&mut self) -> Result<Verdict> {
        let sol = self.solution()?;
        let s = &self.main;
        let r = s.resolve()?;
        let spec = r.control.as_ref().ok_or_else(|| Error::Config("control audit needs a control driver".into()))?;
        let c = &s.control;
        let x0 = s.point_or_origin(&c.x0);
        let allow = allowance(c.dt, sol.v_bar.grid.max_cell());
        let params = CostParams { burn_in: c.burn_in, horizon: c.horizon, n_mc: c.n_mc, dt: c.dt, seed: s.seed_for("control", 0) };
        let lib = policy_library(spec, &sol);
        let opt = optimality_gap_audit(&r.model, &r.drift, spec, &sol, &lib, &x0, &params, allow)?;
        let gir = girsanov_cost_check(
            &r.model,
            &r.drift,
            spec,
            &Policy::Feedback(sol.clone()),
            &x0,
            c.girsanov_horizon,
            c.girsanov_n_mc,
            c.dt,
            s.seed_for("control", 1),
        )?;
        let mut counts = vec![0usize; spec.len()];
        for i in 0..sol.v_bar.grid.len() {
            counts[feedback_index(&r.model, spec, &sol, &sol.v_bar.grid.point(i))] += 1;
        }
        let mut rows = vec![opt.optimal.clone()];
        rows.extend(opt.alternates.iter().cloned());
        self.artifacts.policies = rows;
        let pass = opt.pass && gir.pass;
        let worst_alt = opt.alternates.iter().map(|a| a.gap_vs_lambda + a.band).fold(f64::INFINITY, f64::min);
        verdict(
            pass,
            format!(
                "J = {:.4} +/- {:.1e} vs lambda {:.4} (band {:.1e}), alternates ok: {}, verification max = {:.1e}, girsanov {}",
                opt.optimal.j.mean,
                opt.optimal.j.se,
                opt.lambda_bar,
                opt.optimal.band,
                opt.alternates.iter().all(|a| a.pass),
                opt.verification_max,
                gir.pass
            ),
            json!({ "optimality": opt, "girsanov": gir, "feedback_counts_on_grid": counts,
                    "smallest_alternate_margin": worst_alt }),
        )
    }

    fn scheme_sanity(&mut self) -> Result<Verdict> {
        let s = self.main.clone();
        let r = s.resolve()?;
        let mut stats = Vec::new();
        let mut pass = true;
        let mut check = |name: String, a: MeanSe, b: MeanSe| {
            let band = 3.0 * a.combined_se(&b);
            let ok = (a.mean - b.mean).abs() <= band;
            pass &= ok;
            stats.push(json!({ "statistic": name, "dt": a, "half_dt": b, "band": band, "pass": ok }));
        };

        let c = &s.recurrence;
        let x0 = s.recurrence_start(&r.model);
        let seed = s.seed_for("scheme", 0);
        let coarse = hitting_time_cdf_multi(&r.model, &r.drift, &x0, &c.epsilons, &c.horizons, c.n_mc, c.dt, seed)?;
        let fine =
            hitting_time_cdf_multi(&r.model, &r.drift, &x0, &c.epsilons, &c.horizons, c.n_mc, c.dt / 2.0, seed + 1)?;
        for (a, b) in coarse.iter().zip(&fine) {
            for i in 0..a.horizons.len() {
                check(
                    format!("hit_prob eps={} T={}", a.epsilon, a.horizons[i]),
                    binomial(a.hit_prob[i], a.n_mc),
                    binomial(b.hit_prob[i], b.n_mc),
                );
            }
        }

        let cs = &s.coupling;
        let k_a = estimate_kappa1(&r.model, &r.drift, cs.kappa_horizon, cs.dt, cs.kappa_n_mc, s.seed_for("scheme", 2))?;
        let k_b = estimate_kappa1(&r.model, &r.drift, cs.kappa_horizon, cs.dt / 2.0, cs.kappa_n_mc, s.seed_for("scheme", 3))?;
        check("max_t E|X_t|^2".into(), k_a.second_moment, k_b.second_moment);

        let ou = &self.scalar_ou;
        let ro = ou.resolve()?;
        let (oa, ob) = ou.coupling_starts();
        let lib = test_library(&ro.model.stationary_std());
        let oc = &ou.coupling;
        let tv_a = tv_decay_estimate(&ro.model, &ro.drift, &oa, &ob, &oc.tv_times, &lib, oc.tv_n_mc, oc.dt, ou.seed_for("scheme", 4))?;
        let tv_b =
            tv_decay_estimate(&ro.model, &ro.drift, &oa, &ob, &oc.tv_times, &lib, oc.tv_n_mc, oc.dt / 2.0, ou.seed_for("scheme", 5))?;
        for i in 0..tv_a.times.len() {
            let a = MeanSe { mean: tv_a.tv[i], se: tv_a.se[i], n: oc.tv_n_mc };
            let b = MeanSe { mean: tv_b.tv[i], se: tv_b.se[i], n: oc.tv_n_mc };
            check(format!("ou tv t={}", tv_a.times[i]), a, b);
        }
        let n_checked = stats.len();
        let n_failed = stats.iter().filter(|v| v["pass"] == json!(false)).count();

        let workers = [1usize, 2, 4];
        let payloads: Vec<Vec<(String, Vec<u8>)>> =
            workers.iter().map(|&w| with_workers(w, || reproducible_payloads(&s, self))).collect::<Result<_>>()?;
        let identical = payloads.windows(2).all(|w| w[0] == w[1]);
        pass &= identical;
        verdict(
            pass,
            format!(
                "{} of {n_checked} statistics outside their band after halving dt; CSVs identical across {:?} workers: {identical}",
                n_failed, workers
            ),
            json!({ "halving": stats, "workers": workers, "identical": identical,
                    "payloads": payloads[0].iter().map(|(k, v)| json!({ "kind": k, "bytes": v.len() })).collect::<Vec<_>>() }),
        )
    }
}

/// Coupling checks on one scenario: the discrete toy, the bridge coupling
/// from `±½√R e₁` and the iterated coupling from the configured starts.
#[derive(Debug, Clone)]
pub struct CouplingRun {
    pub discrete: DiscreteCouplingReport,
    pub kappa1: Kappa1Estimate,
    pub config: CouplingConfig,
    pub bridge: BridgeAudit,
    pub iterated: CouplingRunStats,
}

impl CouplingRun {
    pub fn iterated_r2(&self) -> f64 {
        self.iterated.fit.as_ref().map_or(f64::NAN, |f| f.r2)
    }

    /// `γ̂ > 0` with `R² ≥ 0.9` for the iterated coupling.
    pub fn iterated_ok(&self) -> bool {
        self.iterated.gamma_hat.is_some_and(|g| g > 0.0) && self.iterated_r2() >= 0.9
    }

    pub fn pass(&self) -> bool {
        self.discrete.pass && self.bridge.bound_ok && self.bridge.marginals_ok && self.iterated_ok()
    }

    pub fn to_json(&self) -> Value {
        let it = &self.iterated;
        json!({ "discrete": self.discrete, "kappa1": self.kappa1, "config": self.config, "bridge": self.bridge,
                "iterated": { "gamma_hat": it.gamma_hat, "kappa5_hat": it.kappa5_hat, "fit": it.fit,
                              "r2_ok": self.iterated_ok(), "attempts": it.attempts,
                              "attempt_met_fraction": it.attempt_met_fraction,
                              "return_time_moment": it.return_time_moment,
                              "girsanov_density_moment": it.girsanov_density_moment,
                              "capped_fraction": it.capped_fraction, "flag": it.flag },
                "pass": self.pass() })
    }
}

pub fn coupling_run(s: &Scenario) -> Result<CouplingRun> {
    let c = &s.coupling;
    let r = s.resolve()?;
    let discrete = discrete_coupling_check(&[0.5, 0.3, 0.2], &[0.2, 0.3, 0.5], c.discrete_n_mc, s.seed_for("coupling", 0))?;
    let kappa1 = estimate_kappa1(&r.model, &r.drift, c.kappa_horizon, c.dt, c.kappa_n_mc, s.seed_for("coupling", 1))?;
    let config = CouplingConfig::new(&r.model, kappa1.kappa1, c.bridge_n_mc, c.k_max, c.dt);
    config.validate(&r.model)?;
    let mut x = vec![0.0; r.model.n_modes];
    x[0] = 0.5 * config.ball_radius_sq.sqrt();
    let y: Vec<f64> = x.iter().map(|v| -v).collect();
    let bridge = bridge_audit(&r.model, &r.drift, &x, &y, &config, s.seed_for("coupling", 2))?;
    let (a, b) = s.coupling_starts();
    let iter_cfg = CouplingConfig { n_mc: c.n_mc, ..config.clone() };
    let iterated = iterated_coupling(&r.model, &r.drift, &a, &b, &iter_cfg, s.seed_for("coupling", 3))?;
    Ok(CouplingRun { discrete, kappa1, config, bridge, iterated })
}

/// Total-variation decay between the configured starts at `tv_times`.
pub fn tv_run(s: &Scenario) -> Result<TvDecayReport> {
    let r = s.resolve()?;
    let (a, b) = s.coupling_starts();
    let c = &s.coupling;
    tv_decay_estimate(
        &r.model,
        &r.drift,
        &a,
        &b,
        &c.tv_times,
        &test_library(&r.model.stationary_std()),
        c.tv_n_mc,
        c.dt,
        s.seed_for("coupling", 4),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecurrenceRun {
    pub x0: Vec<f64>,
    pub reports: Vec<HittingReport>,
    pub monotone: bool,
    pub pass: bool,
}

/// Hitting probabilities of every configured radius from the recurrence
/// start.
pub fn recurrence_run(s: &Scenario) -> Result<RecurrenceRun> {
    let r = s.resolve()?;
    let c = &s.recurrence;
    let x0 = s.recurrence_start(&r.model);
    let reports =
        hitting_time_cdf_multi(&r.model, &r.drift, &x0, &c.epsilons, &c.horizons, c.n_mc, c.dt, s.seed_for("recurrence", 0))?;
    let monotone = hitting_monotone(&reports);
    let pass = monotone && reports.iter().all(HittingReport::pass);
    Ok(RecurrenceRun { x0, reports, monotone, pass })
}

/// `p̂` with the Agresti–Coull standard error, which stays positive at 0
/// and 1.
fn binomial(p: f64, n: usize) -> MeanSe {
    let nf = n as f64;
    let k = p * nf;
    let pt = (k + 2.0) / (nf + 4.0);
    MeanSe { mean: p, se: (pt * (1.0 - pt) / (nf + 4.0)).sqrt(), n }
}

/// `v̄ + 0.2·sin(π x₁ / B₁)`.
fn corrupt(sol: &ErgodicSolution) -> ErgodicSolution {
    let grid = sol.v_bar.grid.clone();
    let b = grid.half_width[0];
    let bump = ValueFunction::from_fn(0.0, grid.clone(), |x| 0.2 * (std::f64::consts::PI * x[0] / b).sin());
    let values = sol.v_bar.values.iter().zip(&bump.values).map(|(v, d)| v + d).collect();
    let mut out = sol.clone();
    out.v_bar = ValueFunction { values, ..sol.v_bar.clone() };
    out
}

/// Small seeded runs whose CSV payloads must not depend on the worker
/// count.
fn reproducible_payloads(s: &Scenario, audit: &Audit) -> Result<Vec<(String, Vec<u8>)>> {
    let r = s.resolve()?;
    let mut out = Vec::new();
    let c = &s.recurrence;
    let x0 = s.recurrence_start(&r.model);
    let hits = hitting_time_cdf_multi(&r.model, &r.drift, &x0, &c.epsilons, &c.horizons, 500, c.dt, s.seed_for("scheme", 6))?;
    for h in &hits {
        let mut buf = Vec::new();
        report::write_hitting(&mut buf, h)?;
        out.push((format!("hitting_eps{}", h.epsilon), buf));
    }
    let ou = &audit.scalar_ou;
    let ro = ou.resolve()?;
    let (oa, ob) = ou.coupling_starts();
    let tv = tv_decay_estimate(
        &ro.model,
        &ro.drift,
        &oa,
        &ob,
        &ou.coupling.tv_times,
        &test_library(&ro.model.stationary_std()),
        2000,
        ou.coupling.dt,
        ou.seed_for("scheme", 7),
    )?;
    let mut buf = Vec::new();
    report::write_tv(&mut buf, &tv)?;
    out.push(("tv".into(), buf));
    let k1 = estimate_kappa1(&r.model, &r.drift, s.coupling.kappa_horizon, s.coupling.dt, 500, s.seed_for("scheme", 8))?;
    let cfg = CouplingConfig::new(&r.model, k1.kappa1, 200, 20, s.coupling.dt);
    let (a, b) = s.coupling_starts();
    let it = iterated_coupling(&r.model, &r.drift, &a, &b, &cfg, s.seed_for("scheme", 9))?;
    let mut buf = Vec::new();
    report::write_meeting(&mut buf, &it)?;
    out.push(("meeting".into(), buf));
    let k = &audit.constant;
    let rk = k.resolve()?;
    let ladder = vanishing_discount(&rk.model, &rk.drift, &rk.driver, &k.ladder_config(&rk.model)?, None)?;
    let mut buf = Vec::new();
    report::write_lambda_trace(&mut buf, &ladder)?;
    out.push(("lambda_trace".into(), buf));
    Ok(out)
}
