//! CSV and JSON report writers.
//!
//! Numbers are written with the shortest representation that parses back to
//! the same `f64`, so reports are byte-identical across runs with the same
//! seed. Undefined entries are left empty.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::control::PolicyCost;
use crate::coupling::{CouplingRunStats, TvDecayReport};
use crate::error::Result;
use crate::ergodic::ErgodicSolution;
use crate::forward::Trajectory;
use crate::recurrence::HittingReport;
use crate::scenario::Scenario;

pub const LAMBDA_TRACE_HEADER: &str = "alpha,lambda,gap";
pub const TV_HEADER: &str = "t,tv_estimate,se";
pub const MEETING_HEADER: &str = "k,met_fraction";
pub const HITTING_HEADER: &str = "T,hit_prob,ci_low,ci_high";
pub const POLICY_HEADER: &str = "policy_id,J,se,gap_vs_lambda";

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else {
        String::new()
    }
}

pub fn write_lambda_trace<W: Write>(mut w: W, sol: &ErgodicSolution) -> Result<()> {
    writeln!(w, "{LAMBDA_TRACE_HEADER}")?;
    for ((a, l), g) in sol.alpha_schedule.iter().zip(&sol.lambda_trace).zip(&sol.rung_gaps) {
        writeln!(w, "{},{},{}", num(*a), num(*l), num(*g))?;
    }
    Ok(())
}

/// `t,x_1..x_N,mean_1..mean_N` where `mean_k = e^{t a_k} x0_k` is the
/// decay of the linear part from the initial state.
pub fn write_trajectory<W: Write>(mut w: W, traj: &Trajectory, eigenvalues: &[f64]) -> Result<()> {
    let n = traj.n_modes;
    let xs: Vec<String> = (1..=n).map(|k| format!("x_{k}")).collect();
    let ms: Vec<String> = (1..=n).map(|k| format!("mean_{k}")).collect();
    writeln!(w, "t,{},{}", xs.join(","), ms.join(","))?;
    let x0 = traj.state(0);
    for (i, &t) in traj.times.iter().enumerate() {
        let row: Vec<String> = traj.state(i).iter().map(|v| num(*v)).collect();
        let mean: Vec<String> = (0..n).map(|k| num((eigenvalues[k] * t).exp() * x0[k])).collect();
        writeln!(w, "{},{},{}", num(t), row.join(","), mean.join(","))?;
    }
    Ok(())
}

pub fn write_tv<W: Write>(mut w: W, r: &TvDecayReport) -> Result<()> {
    writeln!(w, "{TV_HEADER}")?;
    for ((t, tv), se) in r.times.iter().zip(&r.tv).zip(&r.se) {
        writeln!(w, "{},{},{}", num(*t), num(*tv), num(*se))?;
    }
    Ok(())
}

/// Rows `k = 0..=k_max` of the cumulative meeting fraction.
pub fn write_meeting<W: Write>(mut w: W, r: &CouplingRunStats) -> Result<()> {
    writeln!(w, "{MEETING_HEADER}")?;
    for (k, f) in r.met_fraction_by_k.iter().enumerate() {
        writeln!(w, "{k},{}", num(*f))?;
    }
    Ok(())
}

pub fn write_hitting<W: Write>(mut w: W, r: &HittingReport) -> Result<()> {
    writeln!(w, "{HITTING_HEADER}")?;
    for i in 0..r.horizons.len() {
        writeln!(w, "{},{},{},{}", num(r.horizons[i]), num(r.hit_prob[i]), num(r.ci_low[i]), num(r.ci_high[i]))?;
    }
    Ok(())
}

pub fn write_policies<W: Write>(mut w: W, rows: &[PolicyCost]) -> Result<()> {
    writeln!(w, "{POLICY_HEADER}")?;
    for p in rows {
        writeln!(w, "{},{},{},{}", p.id, num(p.j.mean), num(p.j.se), num(p.gap_vs_lambda))?;
    }
    Ok(())
}

/// JSON summary shared by every command.
#[derive(Debug, Clone, Serialize)]
pub struct Summary<T: Serialize> {
    pub command: String,
    pub scenario_id: String,
    pub seed: u64,
    /// Set for audits, absent for plain runs.
    pub pass: Option<bool>,
    pub config: Scenario,
    pub results: T,
}

impl<T: Serialize> Summary<T> {
    pub fn new(command: &str, scenario: &Scenario, pass: Option<bool>, results: T) -> Self {
        Self {
            command: command.to_string(),
            scenario_id: scenario.id.clone(),
            seed: scenario.seed,
            pass,
            config: scenario.clone(),
            results,
        }
    }
}

/// Output directory whose files are named `<id>_s<seed>_<kind>.<ext>`.
#[derive(Debug, Clone)]
pub struct ReportDir {
    pub root: PathBuf,
    prefix: String,
    written: Vec<PathBuf>,
}

impl ReportDir {
    pub fn create(root: &Path, scenario: &Scenario) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), prefix: format!("{}_s{}", scenario.id, scenario.seed), written: Vec::new() })
    }

    pub fn path(&self, kind: &str, ext: &str) -> PathBuf {
        self.root.join(format!("{}_{kind}.{ext}", self.prefix))
    }

    /// Writes one file through `body`.
    pub fn write(&mut self, kind: &str, ext: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<PathBuf> {
        let mut buf = Vec::new();
        body(&mut buf)?;
        let path = self.path(kind, ext);
        fs::write(&path, buf)?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, kind: &str, value: &T) -> Result<PathBuf> {
        self.write(kind, "json", |b| {
            serde_json::to_writer_pretty(&mut *b, value)?;
            b.push(b'\n');
            Ok(())
        })
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.written
    }

    /// Deletes every file written so far and the directory if it is empty.
    pub fn discard(self) {
        for f in &self.written {
            let _ = fs::remove_file(f);
        }
        let _ = fs::remove_dir(&self.root);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::MeanSe;

    #[test]
    fn policy_rows_follow_header() {
        let rows = vec![PolicyCost {
            id: "optimal".into(),
            j: MeanSe { mean: 0.5, se: 0.01, n: 10 },
            gap_vs_lambda: 0.002,
            band: 0.03,
            pass: true,
        }];
        let mut buf = Vec::new();
        write_policies(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "policy_id,J,se,gap_vs_lambda\noptimal,0.5,0.01,0.002\n");
    }

    #[test]
    fn non_finite_values_are_empty() {
        assert_eq!(num(f64::NAN), "");
        assert_eq!(num(0.1), "0.1");
        assert_eq!(num(2.5e-13), "2.5e-13");
    }
}
