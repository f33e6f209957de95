use ergolab::audit::{coupling_run, recurrence_run, tv_run, Audit, CRITERIA};
use ergolab::bsde::solve_discounted;
use ergolab::coupling::test_library;
use ergolab::ergodic::{uniform_bounds_audit, vanishing_discount};
use ergolab::forward::uniform_grid;
use ergolab::recurrence::{default_spans, invariant_measure_estimate};
use ergolab::report::{self, ReportDir, Summary};
use ergolab::scenario::Scenario;
use ergolab::{simulate_path, Result};
use serde_json::json;

use crate::Command;

/// Runs `command`, writing into `dir`. Returns the pass flag of audit
/// commands and `None` for plain runs.
pub fn run(command: &Command, s: &Scenario, dir: &mut ReportDir, quiet: bool) -> Result<Option<bool>> {
    match command {
        Command::Simulate => simulate(s, dir),
        Command::SolveAlpha { alpha } => solve_alpha(s, *alpha, dir),
        Command::Ergodic => ergodic(s, dir),
        Command::Coupling => coupling(s, dir),
        Command::Recurrence => recurrence(s, dir),
        Command::Control => audit(s, &[11], "control", dir, quiet),
        Command::HjbCheck => audit(s, &[4, 5, 6], "hjb-check", dir, quiet),
        Command::FullAudit { criteria } => {
            let ids = if criteria.is_empty() { CRITERIA.to_vec() } else { criteria.clone() };
            audit(s, &ids, "full-audit", dir, quiet)
        }
    }
}

fn simulate(s: &Scenario, dir: &mut ReportDir) -> Result<Option<bool>> {
    let r = s.resolve()?;
    let c = &s.simulate;
    let x0 = if c.x0.is_empty() { vec![1.0; r.model.n_modes] } else { c.x0.clone() };
    let steps = (c.horizon / c.dt).round().max(1.0) as usize;
    let seed = s.seed_for("forward", 0);
    let traj = simulate_path(&r.model, &r.drift, &x0, &uniform_grid(0.0, c.dt, steps), seed)?;
    dir.write("trajectory", "csv", |b| report::write_trajectory(b, &traj, &r.model.a))?;
    let results = json!({ "x0": x0, "steps": steps, "dt": c.dt, "final_state": traj.last(), "path_seed": seed });
    dir.json("summary", &Summary::new("simulate", s, None, results))?;
    Ok(None)
}

fn solve_alpha(s: &Scenario, alpha: f64, dir: &mut ReportDir) -> Result<Option<bool>> {
    let r = s.resolve()?;
    let grid = s.grid(&r.model)?;
    let sol = solve_discounted(&r.model, &r.drift, &r.driver, alpha, &grid, &s.solver_params(), None)?;
    if grid.dim() <= 2 {
        dir.write("value", "csv", |b| sol.vf.write_csv(b))?;
    }
    let origin = vec![0.0; r.model.n_modes];
    let results = json!({ "alpha": alpha, "lambda_alpha": alpha * sol.vf.interpolate(&origin),
                          "sup_norm": sol.vf.sup_norm(), "solve": sol.report });
    dir.json("summary", &Summary::new("solve-alpha", s, None, results))?;
    Ok(None)
}

fn ergodic(s: &Scenario, dir: &mut ReportDir) -> Result<Option<bool>> {
    let r = s.resolve()?;
    let anchor = s.ladder.anchors.first().cloned();
    let sol = vanishing_discount(&r.model, &r.drift, &r.driver, &s.ladder_config(&r.model)?, anchor.as_deref())?;
    dir.write("lambda_trace", "csv", |b| report::write_lambda_trace(b, &sol))?;
    if sol.v_bar.grid.dim() <= 2 {
        dir.write("v_bar", "csv", |b| sol.v_bar.write_csv(b))?;
    }
    let bounds = uniform_bounds_audit(&sol, s.ladder.bounds_max_points, s.ladder.bounds_max_ratio);
    let results = json!({ "lambda_bar": sol.lambda_bar, "anchor": sol.anchor, "alpha_schedule": sol.alpha_schedule,
                          "lambda_trace": sol.lambda_trace, "rung_gaps": sol.rung_gaps,
                          "convergence_report": sol.convergence_report, "cauchy_flag": sol.cauchy_flag,
                          "bound_violation": sol.bound_violation, "solve_reports": sol.solve_reports,
                          "uniform_bounds": bounds });
    dir.json("summary", &Summary::new("ergodic", s, None, results))?;
    Ok(None)
}

fn coupling(s: &Scenario, dir: &mut ReportDir) -> Result<Option<bool>> {
    let run = coupling_run(s)?;
    let tv = tv_run(s)?;
    dir.write("meeting", "csv", |b| report::write_meeting(b, &run.iterated))?;
    dir.write("tv", "csv", |b| report::write_tv(b, &tv))?;
    let pass = run.pass();
    let results = json!({ "coupling": run.to_json(), "tv": tv });
    dir.json("summary", &Summary::new("coupling", s, Some(pass), results))?;
    Ok(Some(pass))
}

fn recurrence(s: &Scenario, dir: &mut ReportDir) -> Result<Option<bool>> {
    let run = recurrence_run(s)?;
    for h in &run.reports {
        dir.write(&format!("hitting_eps{}", h.epsilon), "csv", |b| report::write_hitting(b, h))?;
    }
    let r = s.resolve()?;
    let (burn_in, horizon) = default_spans(&r.model);
    let a = run.x0.clone();
    let b: Vec<f64> = a.iter().map(|v| -v).collect();
    let invariant = invariant_measure_estimate(
        &r.model,
        &r.drift,
        [&a, &b],
        burn_in,
        horizon,
        s.recurrence.n_mc,
        &test_library(&r.model.stationary_std()),
        s.recurrence.dt,
        s.seed_for("recurrence", 1),
    )?;
    let pass = run.pass;
    dir.json("summary", &Summary::new("recurrence", s, Some(pass), json!({ "hitting": run, "invariant": invariant })))?;
    Ok(Some(pass))
}

fn audit(s: &Scenario, ids: &[u32], name: &str, dir: &mut ReportDir, quiet: bool) -> Result<Option<bool>> {
    let mut audit = Audit::new(s.clone())?;
    let report = audit.run_all(ids, |o| {
        if !quiet {
            println!("{}", o.line());
        }
    })?;
    if ids.iter().any(|i| [4, 5, 6, 7, 11].contains(i)) {
        let sol = audit.solution()?;
        dir.write("lambda_trace", "csv", |b| report::write_lambda_trace(b, &sol))?;
    }
    let a = &audit.artifacts;
    if let Some(tv) = &a.tv {
        dir.write("tv", "csv", |b| report::write_tv(b, tv))?;
    }
    if let Some(m) = &a.meeting {
        dir.write("meeting", "csv", |b| report::write_meeting(b, m))?;
    }
    for h in &a.hitting {
        dir.write(&format!("hitting_eps{}", h.epsilon), "csv", |b| report::write_hitting(b, h))?;
    }
    if !a.policies.is_empty() {
        dir.write("policies", "csv", |b| report::write_policies(b, &a.policies))?;
    }
    let pass = report.pass;
    dir.json("summary", &Summary::new(name, s, Some(pass), report))?;
    Ok(Some(pass))
}
