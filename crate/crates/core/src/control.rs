//! Feedback synthesis from an ergodic solution and Monte Carlo ergodic costs.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ergodic::ErgodicSolution;
use crate::error::{Error, Result};
use crate::forward::Scheme;
use crate::linalg::dot;
use crate::mc::par_replicas;
use crate::model::{ControlSpec, DriftField, ModelSpec};
use crate::rng::{fill_normals, stream, PathRng};
use crate::stats::MeanSe;

/// Tolerance of the pointwise verification identity.
pub const VERIFICATION_TOL: f64 = 1e-10;

/// A control rule. Randomized rules draw from the path's stream.
#[derive(Clone)]
pub enum Policy {
    /// `γ(x, ∇v̄(x) G)`
    Feedback(Arc<ErgodicSolution>),
    Constant(usize),
    /// The feedback, replaced by a uniform control with probability `eps`
    /// at each step.
    EpsilonGreedy { base: Arc<ErgodicSolution>, eps: f64 },
    /// Open loop: `controls[⌊t / hold⌋ mod len]`.
    Schedule { controls: Vec<usize>, hold: f64 },
    /// Jumps to a uniform control at rate `1 / hold`.
    RandomSwitching { hold: f64 },
}

#[derive(Clone)]
pub struct NamedPolicy {
    pub id: String,
    pub policy: Policy,
}

impl Policy {
    /// Index of the control used on `[t, t + dt)` given the previous one.
    #[allow(clippy::too_many_arguments)]
    pub fn select(
        &self,
        model: &ModelSpec,
        spec: &ControlSpec,
        x: &[f64],
        t: f64,
        dt: f64,
        previous: usize,
        rng: &mut PathRng,
    ) -> usize {
        match self {
            Policy::Feedback(sol) => feedback_index(model, spec, sol, x),
            Policy::Constant(k) => *k,
            Policy::EpsilonGreedy { base, eps } => {
                if rng.gen::<f64>() < *eps {
                    rng.gen_range(0..spec.len())
                } else {
                    feedback_index(model, spec, base, x)
                }
            }
            Policy::Schedule { controls, hold } => controls[((t / hold).floor() as usize) % controls.len()],
            Policy::RandomSwitching { hold } => {
                if rng.gen::<f64>() < dt / hold {
                    rng.gen_range(0..spec.len())
                } else {
                    previous
                }
            }
        }
    }

    fn is_feedback(&self) -> bool {
        matches!(self, Policy::Feedback(_))
    }
}

/// `γ(x, ∇v̄(x) G)`, the first minimizer of the Hamiltonian.
pub fn feedback_index(model: &ModelSpec, spec: &ControlSpec, sol: &ErgodicSolution, x: &[f64]) -> usize {
    spec.hamiltonian(x, &sol.z_bar(model, x)).index
}

pub fn feedback_from_solution(sol: Arc<ErgodicSolution>) -> Policy {
    Policy::Feedback(sol)
}

/// Constants, ε-greedy perturbations (`ε ∈ {0.1, 0.3}`), two periodic
/// schedules and five random switchers.
pub fn policy_library(spec: &ControlSpec, sol: &Arc<ErgodicSolution>) -> Vec<NamedPolicy> {
    let mut out: Vec<NamedPolicy> = (0..spec.len())
        .map(|k| NamedPolicy { id: format!("constant-{k}"), policy: Policy::Constant(k) })
        .collect();
    for eps in [0.1, 0.3] {
        out.push(NamedPolicy { id: format!("greedy-{eps}"), policy: Policy::EpsilonGreedy { base: sol.clone(), eps } });
    }
    let all: Vec<usize> = (0..spec.len()).collect();
    for hold in [0.1, 1.0] {
        out.push(NamedPolicy { id: format!("schedule-{hold}"), policy: Policy::Schedule { controls: all.clone(), hold } });
    }
    for hold in [0.02, 0.05, 0.1, 0.5, 2.0] {
        out.push(NamedPolicy { id: format!("switching-{hold}"), policy: Policy::RandomSwitching { hold } });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub burn_in: f64,
    pub horizon: f64,
    pub n_mc: usize,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Time average of `L(X, u)` over `[burn_in, horizon]`, across paths.
    pub j: MeanSe,
    /// Largest `L(X,ū) + <Z̄, R(ū)> − ψ(X, Z̄)` met along the paths (feedback
    /// policies only).
    pub verification_max: Option<f64>,
}

/// Simulates `dX = (AX + F(X) + G R(u)) dt + G dW` under `policy`.
pub fn ergodic_cost(
    model: &ModelSpec,
    drift: &DriftField,
    spec: &ControlSpec,
    policy: &Policy,
    x0: &[f64],
    p: &CostParams,
) -> Result<CostEstimate> {
    if !(p.horizon > p.burn_in && p.burn_in >= 0.0) {
        return Err(Error::Precondition("horizon must exceed burn_in".into()));
    }
    let scheme = Scheme::new(model, p.dt)?;
    let n = model.n_modes;
    let steps = (p.horizon / p.dt).round() as usize;
    let burn = (p.burn_in / p.dt).round() as usize;
    let check = policy.is_feedback();
    let sol = match policy {
        Policy::Feedback(s) => Some(s.clone()),
        _ => None,
    };
    let results = par_replicas(p.n_mc, |i| -> Result<(f64, f64)> {
        let mut rng = stream(p.seed, i as u64);
        let mut x = x0.to_vec();
        let (mut f, mut eta, mut gr) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut u = 0;
        let mut acc = 0.0;
        let mut worst = f64::NEG_INFINITY;
        for s in 0..steps {
            let t = s as f64 * p.dt;
            u = policy.select(model, spec, &x, t, p.dt, u, &mut rng);
            if u >= spec.len() {
                return Err(Error::Precondition(format!("policy returned control {u} outside U")));
            }
            if check {
                let z = sol.as_ref().unwrap().z_bar(model, &x);
                let h = spec.hamiltonian(&x, &z);
                let gap = spec.cost(&x, u) + dot(&z, &spec.r_table[u]) - h.value;
                worst = worst.max(gap);
            }
            if s >= burn {
                acc += spec.cost(&x, u);
            }
            drift.eval_into(&x, &mut f);
            model.g.mul_vec_into(&spec.r_table[u], &mut gr);
            for k in 0..n {
                f[k] += gr[k];
            }
            fill_normals(&mut rng, &mut eta);
            scheme.advance(&mut x, &f, &eta);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "controlled path", step: s, state: x.clone() });
            }
        }
        Ok((acc / (steps - burn) as f64, worst))
    });
    let results: Vec<(f64, f64)> = results.into_iter().collect::<Result<_>>()?;
    let js: Vec<f64> = results.iter().map(|r| r.0).collect();
    Ok(CostEstimate {
        j: MeanSe::from_samples(&js),
        verification_max: check.then(|| results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max)),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCost {
    pub id: String,
    pub j: MeanSe,
    pub gap_vs_lambda: f64,
    pub band: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub lambda_bar: f64,
    pub allowance: f64,
    pub optimal: PolicyCost,
    pub alternates: Vec<PolicyCost>,
    pub verification_max: f64,
    pub verification_ok: bool,
    pub pass: bool,
    /// The audit covers a finite library of policies only.
    pub note: String,
}

/// `|J(ū) − λ̄| ≤ 3 SE + allowance` and `J(u) − λ̄ ≥ −(3 SE + allowance)` for
/// each alternate `u`.
pub fn optimality_gap_audit(
    model: &ModelSpec,
    drift: &DriftField,
    spec: &ControlSpec,
    sol: &Arc<ErgodicSolution>,
    alternates: &[NamedPolicy],
    x0: &[f64],
    params: &CostParams,
    allowance: f64,
) -> Result<OptimalityReport> {
    let lambda = sol.lambda_bar;
    let opt = ergodic_cost(model, drift, spec, &Policy::Feedback(sol.clone()), x0, params)?;
    let band = |j: &MeanSe| 3.0 * j.se + allowance;
    let optimal = PolicyCost {
        id: "optimal".into(),
        j: opt.j,
        gap_vs_lambda: opt.j.mean - lambda,
        band: band(&opt.j),
        pass: (opt.j.mean - lambda).abs() <= band(&opt.j),
    };
    let mut rows = Vec::with_capacity(alternates.len());
    for (k, alt) in alternates.iter().enumerate() {
        let p = CostParams { seed: params.seed.wrapping_add(1 + k as u64), ..*params };
        let c = ergodic_cost(model, drift, spec, &alt.policy, x0, &p)?;
        let gap = c.j.mean - lambda;
        rows.push(PolicyCost { id: alt.id.clone(), j: c.j, gap_vs_lambda: gap, band: band(&c.j), pass: gap >= -band(&c.j) });
    }
    let verification_max = opt.verification_max.unwrap_or(0.0);
    let verification_ok = verification_max <= VERIFICATION_TOL;
    let pass = optimal.pass && verification_ok && rows.iter().all(|r| r.pass);
    Ok(OptimalityReport {
        lambda_bar: lambda,
        allowance,
        optimal,
        alternates: rows,
        verification_max,
        verification_ok,
        pass,
        note: "evidence over a finite policy library, not a proof of optimality".into(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GirsanovCheck {
    pub horizon: f64,
    pub direct: MeanSe,
    pub reweighted: MeanSe,
    pub pass: bool,
}

/// `E[(1/T) ∫_0^T L(X, u) dt]` under the controlled dynamics, computed by
/// direct simulation and by reweighting uncontrolled paths with the
/// discrete Girsanov density of the drift change `G R(u)`.
pub fn girsanov_cost_check(
    model: &ModelSpec,
    drift: &DriftField,
    spec: &ControlSpec,
    policy: &Policy,
    x0: &[f64],
    horizon: f64,
    n_mc: usize,
    dt: f64,
    seed: u64,
) -> Result<GirsanovCheck> {
    let direct = ergodic_cost(
        model,
        drift,
        spec,
        policy,
        x0,
        &CostParams { burn_in: 0.0, horizon, n_mc, dt, seed },
    )?
    .j;
    let scheme = Scheme::new(model, dt)?;
    let n = model.n_modes;
    let steps = (horizon / dt).round() as usize;
    let seed2 = seed.wrapping_add(0x5eed);
    let samples = par_replicas(n_mc, |i| {
        let mut rng = stream(seed2, i as u64);
        let mut x = x0.to_vec();
        let (mut buf, mut eta, mut dw, mut qr) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut u = 0;
        let mut acc = 0.0;
        let mut log_rho = 0.0;
        for s in 0..steps {
            u = policy.select(model, spec, &x, s as f64 * dt, dt, u, &mut rng);
            acc += spec.cost(&x, u);
            let r = &spec.r_table[u];
            fill_normals(&mut rng, &mut eta);
            scheme.brownian_increment(&eta, &mut dw);
            scheme.quad_form.mul_vec_into(r, &mut qr);
            log_rho += dot(r, &dw) - 0.5 * dot(r, &qr);
            scheme.step(drift, &mut x, &eta, &mut buf);
        }
        log_rho.exp() * acc / steps as f64
    });
    let reweighted = MeanSe::from_samples(&samples);
    let pass = (direct.mean - reweighted.mean).abs() <= 3.0 * direct.combined_se(&reweighted);
    Ok(GirsanovCheck { horizon, direct, reweighted, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;

    fn scalar() -> ModelSpec {
        ModelSpec::new(vec![-1.0], Mat::identity(1)).unwrap()
    }

    #[test]
    fn constant_cost_is_exact() {
        let spec = ControlSpec::new(vec![vec![0.0], vec![1.0]], |u| vec![u[0]], |_, _| 0.4, 1.0).unwrap();
        let p = CostParams { burn_in: 1.0, horizon: 3.0, n_mc: 8, dt: 0.01, seed: 2 };
        let c = ergodic_cost(&scalar(), &DriftField::zero(), &spec, &Policy::RandomSwitching { hold: 0.1 }, &[0.0], &p)
            .unwrap();
        assert!((c.j.mean - 0.4).abs() < 1e-12 && c.j.se < 1e-12);
    }

    #[test]
    fn schedule_cycles_through_controls() {
        let spec = ControlSpec::new(vec![vec![0.0], vec![1.0]], |u| vec![u[0]], |_, u| u[0], 1.0).unwrap();
        let pol = Policy::Schedule { controls: vec![0, 1], hold: 0.5 };
        let mut rng = stream(0, 0);
        let m = scalar();
        assert_eq!(pol.select(&m, &spec, &[0.0], 0.2, 0.01, 0, &mut rng), 0);
        assert_eq!(pol.select(&m, &spec, &[0.0], 0.7, 0.01, 0, &mut rng), 1);
        assert_eq!(pol.select(&m, &spec, &[0.0], 1.2, 0.01, 0, &mut rng), 0);
    }

    #[test]
    fn reweighting_matches_direct_for_constant_push() {
        let spec = ControlSpec::new(vec![vec![1.0]], |u| vec![u[0]], |x, _| x[0].tanh(), 1.0).unwrap();
        let c = girsanov_cost_check(&scalar(), &DriftField::zero(), &spec, &Policy::Constant(0), &[0.0], 1.0, 4000, 0.01, 4)
            .unwrap();
        assert!(c.pass, "{c:?}");
    }
}
