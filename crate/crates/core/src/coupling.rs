//! Coupling of two copies of the forward equation: return to a ball,
//! bridge-shifted maximal coupling over one period, iterated meeting, and
//! empirical total-variation decay of the transition semigroup.
//!
//! All densities are those of the discrete scheme. Over one period of `S`
//! steps the shifted law `μ̃₂` of `X̃ = X^y + b`, with
//! `b_n = (T − t_n)/T · e^{A t_n}(x − y)`, differs from the law `μ₁` of
//! `X^x` only through the one-step means, so with the whitened mean gap
//! `μ_n = L⁻¹ (m̃₂ − m₁)(X_n)` the log ratio is `Σ μ_n·η_n − ½|μ_n|²`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::Scheme;
use crate::linalg::{dot, norm_sq};
use crate::mc::par_replicas;
use crate::model::{DriftField, ModelSpec};
use crate::rng::{fill_normals, stream, PathRng};
use crate::stats::{linear_fit, LinearFit, MeanSe};

/// Cap on residual candidate draws per coupling attempt.
pub const MAX_CANDIDATES: usize = 10_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingConfig {
    /// `R`: the ball is `{|x|² ≤ R}`.
    pub ball_radius_sq: f64,
    /// `T = ln 8 / k`.
    pub period: f64,
    pub eta: f64,
    pub n_mc: usize,
    pub k_max: usize,
    pub dt: f64,
}

impl CouplingConfig {
    /// `R = 4κ̂₁`, `T = ln 8 / k_diss` and `η = ln 2 / T`.
    pub fn new(model: &ModelSpec, kappa1: f64, n_mc: usize, k_max: usize, dt: f64) -> Self {
        let period = 8f64.ln() / model.k_diss;
        Self { ball_radius_sq: 4.0 * kappa1, period, eta: 2f64.ln() / period, n_mc, k_max, dt }
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        if ((-model.k_diss * self.period).exp() - 0.125).abs() > 1e-12 {
            return Err(Error::Config(format!("period {} does not satisfy e^(-kT) = 1/8", self.period)));
        }
        if !(self.eta > 0.0 && self.eta * self.period < 2.0 * 2f64.ln()) {
            return Err(Error::Config(format!("eta = {} must lie in (0, 2 ln 2 / T)", self.eta)));
        }
        if !(self.ball_radius_sq > 0.0) || self.n_mc == 0 || self.k_max == 0 {
            return Err(Error::Config("ball radius, n_mc and k_max must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        Ok(())
    }

    /// Steps per period; the step is adjusted so that they tile `T` exactly.
    pub fn steps(&self) -> usize {
        (self.period / self.dt).round().max(1.0) as usize
    }

    fn scheme(&self, model: &ModelSpec) -> Result<Scheme> {
        Scheme::new(model, self.period / self.steps() as f64)
    }

    fn in_ball(&self, x: &[f64]) -> bool {
        norm_sq(x) <= self.ball_radius_sq
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Kappa1Estimate {
    pub kappa1: f64,
    /// Time at which `E|X^0_t|²` peaked.
    pub at_time: f64,
    pub second_moment: MeanSe,
}

/// `κ̂₁ = max_t E|X^0_t|² / 2` over `[0, horizon]`.
pub fn estimate_kappa1(
    model: &ModelSpec,
    drift: &DriftField,
    horizon: f64,
    dt: f64,
    n_mc: usize,
    seed: u64,
) -> Result<Kappa1Estimate> {
    let steps = (horizon / dt).round().max(1.0) as usize;
    let scheme = Scheme::new(model, horizon / steps as f64)?;
    let n = model.n_modes;
    let paths = par_replicas(n_mc, |i| {
        let mut rng = stream(seed, i as u64);
        let mut x = vec![0.0; n];
        let (mut buf, mut eta) = (vec![0.0; n], vec![0.0; n]);
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            fill_normals(&mut rng, &mut eta);
            scheme.step(drift, &mut x, &eta, &mut buf);
            out.push(norm_sq(&x));
        }
        out
    });
    let mut best = (0usize, MeanSe::from_samples(&[0.0]));
    for s in 0..steps {
        let col: Vec<f64> = paths.iter().map(|p| p[s]).collect();
        let m = MeanSe::from_samples(&col);
        if m.mean > best.1.mean {
            best = (s, m);
        }
    }
    Ok(Kappa1Estimate {
        kappa1: best.1.mean / 2.0,
        at_time: (best.0 + 1) as f64 * scheme.dt,
        second_moment: best.1,
    })
}

fn run_period(scheme: &Scheme, steps: usize, drift: &DriftField, x: &mut [f64], rng: &mut PathRng) {
    let n = x.len();
    let (mut buf, mut eta) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..steps {
        fill_normals(rng, &mut eta);
        scheme.step(drift, x, &eta, &mut buf);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnStats {
    /// First `k` with both copies in the ball, `k_max` when capped.
    pub return_k: Vec<usize>,
    pub capped_fraction: f64,
    /// `E[e^{η τ}] / (1 + |x|² + |y|²)` with `τ = kT`.
    pub normalized_moment: MeanSe,
    /// `P(τ > kT)`, `k = 0..k_max`.
    pub survival: Vec<f64>,
    /// Geometric decay ratio of the survival per period, from a log-linear fit.
    pub fitted_ratio: Option<f64>,
    pub fit: Option<LinearFit>,
    pub flag: bool,
}

/// Independent copies from `x` and `y`, observed every period until both
/// are in the ball.
pub fn lyapunov_return(
    model: &ModelSpec,
    drift: &DriftField,
    x: &[f64],
    y: &[f64],
    cfg: &CouplingConfig,
    seed: u64,
) -> Result<ReturnStats> {
    cfg.validate(model)?;
    let scheme = cfg.scheme(model)?;
    let steps = cfg.steps();
    let return_k = par_replicas(cfg.n_mc, |i| {
        let mut rng = stream(seed, i as u64);
        let (mut v1, mut v2) = (x.to_vec(), y.to_vec());
        for k in 0..cfg.k_max {
            if cfg.in_ball(&v1) && cfg.in_ball(&v2) {
                return k;
            }
            run_period(&scheme, steps, drift, &mut v1, &mut rng);
            run_period(&scheme, steps, drift, &mut v2, &mut rng);
        }
        cfg.k_max
    });
    let n = cfg.n_mc as f64;
    let capped = return_k.iter().filter(|&&k| k >= cfg.k_max).count();
    let scale = 1.0 + norm_sq(x) + norm_sq(y);
    let moments: Vec<f64> =
        return_k.iter().map(|&k| (cfg.eta * k as f64 * cfg.period).exp() / scale).collect();
    let survival: Vec<f64> =
        (0..=cfg.k_max).map(|k| return_k.iter().filter(|&&r| r > k).count() as f64 / n).collect();
    let fit = geometric_fit(&survival, cfg.n_mc, 1.0);
    Ok(ReturnStats {
        capped_fraction: capped as f64 / n,
        normalized_moment: MeanSe::from_samples(&moments),
        fitted_ratio: fit.map(|f| f.slope.exp()),
        fit,
        survival,
        flag: capped as f64 > 0.01 * n,
        return_k,
    })
}

/// Log-linear fit of a tail probability against `k·unit`, restricted to
/// `k ≥ 1` with at least 20 of `n` replicas remaining.
fn geometric_fit(tail: &[f64], n: usize, unit: f64) -> Option<LinearFit> {
    let floor = 20.0 / n as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = tail
        .iter()
        .enumerate()
        .skip(1)
        .take_while(|(_, &p)| p >= floor)
        .map(|(k, &p)| (k as f64 * unit, p.ln()))
        .unzip();
    if xs.len() < 3 {
        return None;
    }
    linear_fit(&xs, &ys)
}

/// Result of one maximal-coupling draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupled<T> {
    pub first: T,
    pub second: T,
    pub met: bool,
    /// Residual candidates drawn (0 when the identity branch was taken).
    pub candidates: usize,
}

/// Maximal coupling of `p` and `q`: draw `Z₁ ~ p` and keep `Z₂ = Z₁` with
/// probability `min(1, q/p)`, otherwise draw `Z₂ ~ q` until a candidate is
/// accepted with probability `max(0, 1 − p/q)`.
///
/// Each sampler returns a draw together with `ln(q/p)` at it.
pub fn maximal_coupling<T: Clone, R: Rng>(
    rng: &mut R,
    mut draw_p: impl FnMut(&mut R) -> (T, f64),
    mut draw_q: impl FnMut(&mut R) -> (T, f64),
    cap: usize,
) -> Result<Coupled<T>> {
    let (z1, lr) = draw_p(rng);
    let u: f64 = rng.gen();
    if u.ln() < lr {
        return Ok(Coupled { second: z1.clone(), first: z1, met: true, candidates: 0 });
    }
    for c in 1..=cap {
        let (z2, lr2) = draw_q(rng);
        let u: f64 = rng.gen();
        if u < -(-lr2).exp_m1() {
            return Ok(Coupled { first: z1, second: z2, met: false, candidates: c });
        }
    }
    Err(Error::SamplerExhausted { draws: cap })
}

/// Samples an index from a finite distribution.
pub fn sample_discrete<R: Rng>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.gen::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteCouplingReport {
    pub tv: f64,
    pub equal_fraction: MeanSe,
    /// Empirical laws of the two coordinates.
    pub first_law: Vec<f64>,
    pub second_law: Vec<f64>,
    pub pass: bool,
}

/// Checks `P(Z₁ = Z₂) = 1 − TV(p, q)` and both marginals within 3 SE.
pub fn discrete_coupling_check(p: &[f64], q: &[f64], n_mc: usize, seed: u64) -> Result<DiscreteCouplingReport> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Precondition("distributions must have equal, nonzero length".into()));
    }
    let draws = par_replicas(n_mc, |i| {
        let mut rng = stream(seed, i as u64);
        let ratio = |k: usize| (q[k] / p[k]).ln();
        maximal_coupling(
            &mut rng,
            |r| {
                let k = sample_discrete(r, p);
                (k, ratio(k))
            },
            |r| {
                let k = sample_discrete(r, q);
                (k, ratio(k))
            },
            MAX_CANDIDATES,
        )
    });
    let draws: Vec<Coupled<usize>> = draws.into_iter().collect::<Result<_>>()?;
    let eq: Vec<f64> = draws.iter().map(|c| f64::from(u8::from(c.first == c.second))).collect();
    let equal_fraction = MeanSe::from_samples(&eq);
    let law = |pick: &dyn Fn(&Coupled<usize>) -> usize| -> Vec<f64> {
        let mut h = vec![0.0; p.len()];
        for d in &draws {
            h[pick(d)] += 1.0 / n_mc as f64;
        }
        h
    };
    let first_law = law(&|c| c.first);
    let second_law = law(&|c| c.second);
    let tv = total_variation(p, q);
    let band = |emp: f64, exact: f64| {
        let se = (exact * (1.0 - exact) / n_mc as f64).sqrt();
        (emp - exact).abs() <= 3.0 * se + 1e-12
    };
    let marginals_ok = first_law.iter().zip(p).all(|(e, x)| band(*e, *x))
        && second_law.iter().zip(q).all(|(e, x)| band(*e, *x));
    let pass = band(equal_fraction.mean, 1.0 - tv) && marginals_ok;
    Ok(DiscreteCouplingReport { tv, equal_fraction, first_law, second_law, pass })
}

/// Outcome of coupling one period.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodCoupling {
    /// States of the first leg, flattened, `S + 1` rows.
    pub path1: Vec<f64>,
    /// States of the second leg (bridge shift removed).
    pub path2: Vec<f64>,
    pub met: bool,
    /// `ln dμ̃₂/dμ₁` along the first leg.
    pub log_ratio: f64,
    pub candidates: usize,
}

impl PeriodCoupling {
    pub fn end1(&self, n: usize) -> &[f64] {
        &self.path1[self.path1.len() - n..]
    }

    pub fn end2(&self, n: usize) -> &[f64] {
        &self.path2[self.path2.len() - n..]
    }
}

struct Bridge<'a> {
    scheme: Scheme,
    steps: usize,
    drift: &'a DriftField,
    /// `b_n`, flattened.
    shift: Vec<f64>,
    n: usize,
}

impl<'a> Bridge<'a> {
    fn new(model: &ModelSpec, drift: &'a DriftField, x: &[f64], y: &[f64], cfg: &CouplingConfig) -> Result<Self> {
        if !model.noise {
            return Err(Error::Precondition("bridge coupling needs nondegenerate noise".into()));
        }
        let scheme = cfg.scheme(model)?;
        let steps = cfg.steps();
        let n = model.n_modes;
        let mut shift = Vec::with_capacity((steps + 1) * n);
        for s in 0..=steps {
            let t = s as f64 * scheme.dt;
            let frac = (steps - s) as f64 / steps as f64;
            for i in 0..n {
                shift.push(frac * (model.a[i] * t).exp() * (x[i] - y[i]));
            }
        }
        Ok(Self { scheme, steps, drift, shift, n })
    }

    fn b(&self, s: usize) -> &[f64] {
        &self.shift[s * self.n..(s + 1) * self.n]
    }

    /// Whitened gap between the one-step means of `μ̃₂` and `μ₁` at `z`.
    fn mean_gap(&self, s: usize, z: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let n = self.n;
        let (b0, b1) = (self.b(s), self.b(s + 1));
        let mut f1 = vec![0.0; n];
        let mut f2 = vec![0.0; n];
        let shifted: Vec<f64> = z.iter().zip(b0).map(|(a, b)| a - b).collect();
        self.drift.eval_into(z, &mut f1);
        self.drift.eval_into(&shifted, &mut f2);
        for i in 0..n {
            scratch[i] = self.scheme.decay[i] * (-b0[i] + self.scheme.dt * (f2[i] - f1[i])) + b1[i];
        }
        self.scheme.whiten(scratch, out);
    }

    /// Path under `μ₁` (`shifted = false`) or `μ̃₂` (`shifted = true`) from
    /// `x`, returned with `ln dμ̃₂/dμ₁` along it.
    fn draw(&self, x: &[f64], shifted: bool, rng: &mut PathRng) -> (Vec<f64>, f64) {
        let n = self.n;
        let mut path = Vec::with_capacity((self.steps + 1) * n);
        path.extend_from_slice(x);
        let mut z = x.to_vec();
        let (mut eta, mut mu, mut scratch, mut buf) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut lr = 0.0;
        for s in 0..self.steps {
            fill_normals(rng, &mut eta);
            self.mean_gap(s, &z, &mut mu, &mut scratch);
            let m2 = norm_sq(&mu);
            if shifted {
                lr += dot(&mu, &eta) + 0.5 * m2;
                // X̃_{n+1} = step of (X̃_n − b_n) under the original drift, plus b_{n+1}
                let b0 = self.b(s);
                for i in 0..n {
                    z[i] -= b0[i];
                }
                self.scheme.step(self.drift, &mut z, &eta, &mut buf);
                let b1 = self.b(s + 1);
                for i in 0..n {
                    z[i] += b1[i];
                }
            } else {
                lr += dot(&mu, &eta) - 0.5 * m2;
                self.scheme.step(self.drift, &mut z, &eta, &mut buf);
            }
            path.extend_from_slice(&z);
        }
        (path, lr)
    }

    fn unshift(&self, path: &mut [f64]) {
        for (v, b) in path.iter_mut().zip(&self.shift) {
            *v -= b;
        }
    }

    fn couple(&self, x: &[f64], rng: &mut PathRng) -> Result<PeriodCoupling> {
        let mut lr1 = 0.0;
        let c = maximal_coupling(
            rng,
            |r| {
                let (p, lr) = self.draw(x, false, r);
                lr1 = lr;
                (p, lr)
            },
            |r| self.draw(x, true, r),
            MAX_CANDIDATES,
        )?;
        let mut path2 = c.second;
        self.unshift(&mut path2);
        Ok(PeriodCoupling { path1: c.first, path2, met: c.met, log_ratio: lr1, candidates: c.candidates })
    }
}

/// Couples `X^x` and `X^y` over one period through the bridge shift.
/// On the identity branch the two legs agree at `T`.
pub fn bridge_maximal_coupling(
    model: &ModelSpec,
    drift: &DriftField,
    x: &[f64],
    y: &[f64],
    cfg: &CouplingConfig,
    seed: u64,
) -> Result<PeriodCoupling> {
    cfg.validate(model)?;
    if !cfg.in_ball(x) || !cfg.in_ball(y) {
        return Err(Error::Precondition("both starting points must lie in the ball |x|² ≤ R".into()));
    }
    let bridge = Bridge::new(model, drift, x, y, cfg)?;
    bridge.couple(x, &mut stream(seed, 0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentComparison {
    pub coordinate: usize,
    pub power: u32,
    pub coupled: MeanSe,
    pub direct: MeanSe,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgeAudit {
    pub met_fraction: MeanSe,
    /// `κ̂₄ = E_{μ₁}[(dμ̃₂/dμ₁)³]`
    pub kappa4: MeanSe,
    /// `met_fraction ≥ 1/(4κ̂₄)` within 3 SE.
    pub bound_ok: bool,
    pub max_candidates: usize,
    /// First two moments of both legs at `T` against direct simulation.
    pub marginals: Vec<MomentComparison>,
    pub marginals_ok: bool,
}

/// Repeats the one-period coupling `cfg.n_mc` times and compares both legs
/// at `T` with direct simulations of `X^x_T` and `X^y_T`.
pub fn bridge_audit(
    model: &ModelSpec,
    drift: &DriftField,
    x: &[f64],
    y: &[f64],
    cfg: &CouplingConfig,
    seed: u64,
) -> Result<BridgeAudit> {
    cfg.validate(model)?;
    let bridge = Bridge::new(model, drift, x, y, cfg)?;
    let n = model.n_modes;
    let runs: Vec<PeriodCoupling> = par_replicas(cfg.n_mc, |i| bridge.couple(x, &mut stream(seed, i as u64)))
        .into_iter()
        .collect::<Result<_>>()?;
    let direct = |start: &[f64], offset: u64| -> Vec<Vec<f64>> {
        par_replicas(cfg.n_mc, |i| {
            let mut rng = stream(seed, offset + i as u64);
            let mut v = start.to_vec();
            run_period(&bridge.scheme, bridge.steps, drift, &mut v, &mut rng);
            v
        })
    };
    let direct1 = direct(x, cfg.n_mc as u64);
    let direct2 = direct(y, 2 * cfg.n_mc as u64);
    let mut marginals = Vec::new();
    for (leg, reference) in [(0usize, &direct1), (1, &direct2)] {
        for coordinate in 0..n {
            for power in [1u32, 2] {
                let coupled: Vec<f64> = runs
                    .iter()
                    .map(|r| if leg == 0 { r.end1(n) } else { r.end2(n) }[coordinate].powi(power as i32))
                    .collect();
                let dir: Vec<f64> = reference.iter().map(|v| v[coordinate].powi(power as i32)).collect();
                let (c, d) = (MeanSe::from_samples(&coupled), MeanSe::from_samples(&dir));
                let pass = (c.mean - d.mean).abs() <= 3.0 * c.combined_se(&d);
                marginals.push(MomentComparison { coordinate, power, coupled: c, direct: d, pass });
            }
        }
    }
    let met: Vec<f64> = runs.iter().map(|r| f64::from(u8::from(r.met))).collect();
    let cubes: Vec<f64> = runs.iter().map(|r| (3.0 * r.log_ratio).exp()).collect();
    let met_fraction = MeanSe::from_samples(&met);
    let kappa4 = MeanSe::from_samples(&cubes);
    Ok(BridgeAudit {
        bound_ok: met_fraction.mean + 3.0 * met_fraction.se >= 1.0 / (4.0 * kappa4.mean),
        met_fraction,
        kappa4,
        max_candidates: runs.iter().map(|r| r.candidates).max().unwrap_or(0),
        marginals_ok: marginals.iter().all(|m| m.pass),
        marginals,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingRunStats {
    /// `n₀` per replica; `k_max` when the replica never met.
    pub meeting_times: Vec<usize>,
    /// `P(V¹_{kT} = V²_{kT})`, `k = 0..=k_max`.
    pub met_fraction_by_k: Vec<f64>,
    /// `E[e^{η τ}]` for the first return of both copies to the ball.
    pub return_time_moment: MeanSe,
    /// `κ̂₄` over all coupling attempts.
    pub girsanov_density_moment: MeanSe,
    pub attempts: usize,
    /// Fraction of attempts that took the identity branch.
    pub attempt_met_fraction: f64,
    pub gamma_hat: Option<f64>,
    /// `κ̂₅`, normalized by `1 + |x|² + |y|²`.
    pub kappa5_hat: Option<f64>,
    pub fit: Option<LinearFit>,
    pub capped_fraction: f64,
    pub flag: bool,
}

struct ReplicaOutcome {
    meeting: Option<usize>,
    first_return: usize,
    log_ratios: Vec<f64>,
}

/// Runs the two copies period by period: independently outside the ball,
/// through the bridge coupling inside it, and identically once met.
pub fn iterated_coupling(
    model: &ModelSpec,
    drift: &DriftField,
    x: &[f64],
    y: &[f64],
    cfg: &CouplingConfig,
    seed: u64,
) -> Result<CouplingRunStats> {
    cfg.validate(model)?;
    let scheme = cfg.scheme(model)?;
    let steps = cfg.steps();
    let outcomes: Vec<ReplicaOutcome> = par_replicas(cfg.n_mc, |i| -> Result<ReplicaOutcome> {
        let mut rng = stream(seed, i as u64);
        let (mut v1, mut v2) = (x.to_vec(), y.to_vec());
        let mut log_ratios = Vec::new();
        let mut first_return = None;
        if v1 == v2 {
            return Ok(ReplicaOutcome { meeting: Some(0), first_return: 0, log_ratios });
        }
        for k in 0..cfg.k_max {
            if cfg.in_ball(&v1) && cfg.in_ball(&v2) {
                first_return.get_or_insert(k);
                let bridge = Bridge::new(model, drift, &v1, &v2, cfg)?;
                let c = bridge.couple(&v1, &mut rng)?;
                log_ratios.push(c.log_ratio);
                let n = v1.len();
                if c.met {
                    return Ok(ReplicaOutcome {
                        meeting: Some(k + 1),
                        first_return: first_return.unwrap_or(k),
                        log_ratios,
                    });
                }
                v1.copy_from_slice(c.end1(n));
                v2.copy_from_slice(c.end2(n));
            } else {
                run_period(&scheme, steps, drift, &mut v1, &mut rng);
                run_period(&scheme, steps, drift, &mut v2, &mut rng);
            }
        }
        Ok(ReplicaOutcome { meeting: None, first_return: first_return.unwrap_or(cfg.k_max), log_ratios })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let n = cfg.n_mc as f64;
    let meeting_times: Vec<usize> = outcomes.iter().map(|o| o.meeting.unwrap_or(cfg.k_max)).collect();
    let capped = outcomes.iter().filter(|o| o.meeting.is_none()).count();
    let met_fraction_by_k: Vec<f64> = (0..=cfg.k_max)
        .map(|k| outcomes.iter().filter(|o| o.meeting.is_some_and(|m| m <= k)).count() as f64 / n)
        .collect();
    let returns: Vec<f64> =
        outcomes.iter().map(|o| (cfg.eta * o.first_return as f64 * cfg.period).exp()).collect();
    let ratios: Vec<f64> = outcomes.iter().flat_map(|o| o.log_ratios.iter().copied()).collect();
    let cubes: Vec<f64> = ratios.iter().map(|r| (3.0 * r).exp()).collect();
    let met_attempts = outcomes.iter().filter(|o| o.meeting.is_some_and(|m| m > 0)).count();
    let unmet: Vec<f64> = met_fraction_by_k.iter().map(|m| 1.0 - m).collect();
    let fit = geometric_fit(&unmet, cfg.n_mc, cfg.period);
    let scale = 1.0 + norm_sq(x) + norm_sq(y);
    Ok(CouplingRunStats {
        meeting_times,
        met_fraction_by_k,
        return_time_moment: MeanSe::from_samples(&returns),
        girsanov_density_moment: MeanSe::from_samples(&cubes),
        attempts: ratios.len(),
        attempt_met_fraction: if ratios.is_empty() { 1.0 } else { met_attempts as f64 / ratios.len() as f64 },
        gamma_hat: fit.map(|f| -f.slope),
        kappa5_hat: fit.map(|f| f.intercept.exp() / scale),
        fit,
        capped_fraction: capped as f64 / n,
        flag: capped as f64 > 0.01 * n,
    })
}

/// Bounded test functions with `|φ|₀ ≤ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFn {
    /// `clamp(x_i / scale, −1, 1)`
    ClippedCoordinate { index: usize, scale: f64 },
    /// `tanh((x_i − centre) / width)`
    SmoothStep { index: usize, centre: f64, width: f64 },
    /// `exp(−|x − centre|² / width²)`
    RadialBump { centre: Vec<f64>, width: f64 },
}

impl TestFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFn::ClippedCoordinate { index, scale } => (x[*index] / scale).clamp(-1.0, 1.0),
            TestFn::SmoothStep { index, centre, width } => ((x[*index] - centre) / width).tanh(),
            TestFn::RadialBump { centre, width } => {
                let d2: f64 = x.iter().zip(centre).map(|(a, c)| (a - c).powi(2)).sum();
                (-d2 / (width * width)).exp()
            }
        }
    }
}

/// Clipped coordinates, smooth steps and radial bumps at the scale of the
/// stationary spread `scales`.
pub fn test_library(scales: &[f64]) -> Vec<TestFn> {
    let n = scales.len();
    let mut fns = Vec::new();
    for (index, &s) in scales.iter().enumerate() {
        fns.push(TestFn::ClippedCoordinate { index, scale: 4.0 * s });
        for c in [-1.0, 0.0, 1.0] {
            fns.push(TestFn::SmoothStep { index, centre: c * s, width: s });
        }
    }
    let radius = norm_sq(scales).sqrt();
    fns.push(TestFn::RadialBump { centre: vec![0.0; n], width: radius });
    let mut off = vec![0.0; n];
    off[0] = scales[0];
    fns.push(TestFn::RadialBump { centre: off, width: radius });
    fns
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayFit {
    pub c_hat: f64,
    pub eta_hat: f64,
    pub r2: f64,
    /// Indices into `times` used by the fit.
    pub window: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TvDecayReport {
    pub times: Vec<f64>,
    /// `max_φ |E φ(X^x_t) − E φ(X^{x'}_t)|`
    pub tv: Vec<f64>,
    pub se: Vec<f64>,
    pub best_fn: Vec<usize>,
    pub fit: Option<DecayFit>,
    /// `ĉ / (1 + |x|² + |x'|²)`
    pub normalized_c: Option<f64>,
    pub all_zero: bool,
}

/// Empirical decay of `|P_t φ(x) − P_t φ(x')|`, maximized over `test_fns`,
/// with independent streams for the two starting points. `ln tv` is fitted
/// against `t` over the leading run of times where `tv > 3 SE`.
#[allow(clippy::too_many_arguments)]
pub fn tv_decay_estimate(
    model: &ModelSpec,
    drift: &DriftField,
    x: &[f64],
    x_prime: &[f64],
    times: &[f64],
    test_fns: &[TestFn],
    n_mc: usize,
    dt: f64,
    seed: u64,
) -> Result<TvDecayReport> {
    if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) || times[0] < 0.0 {
        return Err(Error::Precondition("times must be nonnegative and increasing".into()));
    }
    if test_fns.is_empty() {
        return Err(Error::Precondition("empty test-function library".into()));
    }
    let scheme = Scheme::new(model, dt)?;
    let marks: Vec<usize> = times.iter().map(|t| (t / dt).round() as usize).collect();
    let n = model.n_modes;
    let simulate = |start: &[f64], offset: u64| -> Vec<Vec<f64>> {
        par_replicas(n_mc, |i| {
            let mut rng = stream(seed, offset + i as u64);
            let mut v = start.to_vec();
            let (mut buf, mut eta) = (vec![0.0; n], vec![0.0; n]);
            let mut out = Vec::with_capacity(marks.len() * test_fns.len());
            let mut step = 0;
            for &m in &marks {
                while step < m {
                    fill_normals(&mut rng, &mut eta);
                    scheme.step(drift, &mut v, &eta, &mut buf);
                    step += 1;
                }
                out.extend(test_fns.iter().map(|f| f.eval(&v)));
            }
            out
        })
    };
    let a = simulate(x, 0);
    let b = simulate(x_prime, n_mc as u64);
    let nf = test_fns.len();
    let mut tv = Vec::with_capacity(times.len());
    let mut se = Vec::with_capacity(times.len());
    let mut best_fn = Vec::with_capacity(times.len());
    for ti in 0..times.len() {
        let mut best = (0usize, -1.0, 0.0);
        for f in 0..nf {
            let col = |s: &Vec<Vec<f64>>| MeanSe::from_samples(&s.iter().map(|r| r[ti * nf + f]).collect::<Vec<_>>());
            let (ma, mb) = (col(&a), col(&b));
            let d = (ma.mean - mb.mean).abs();
            if d > best.1 {
                best = (f, d, ma.combined_se(&mb));
            }
        }
        best_fn.push(best.0);
        tv.push(best.1);
        se.push(best.2);
    }
    let all_zero = tv.iter().all(|&d| d == 0.0);
    let start = times.iter().position(|&t| t > 0.0).unwrap_or(0);
    let end = (start..times.len()).take_while(|&i| tv[i] > 3.0 * se[i]).last().map_or(start, |e| e + 1);
    let fit = if end >= start + 3 {
        let ys: Vec<f64> = tv[start..end].iter().map(|d| d.ln()).collect();
        linear_fit(&times[start..end], &ys).map(|f| DecayFit {
            c_hat: f.intercept.exp(),
            eta_hat: -f.slope,
            r2: f.r2,
            window: (start, end),
        })
    } else {
        None
    };
    let scale = 1.0 + norm_sq(x) + norm_sq(x_prime);
    Ok(TvDecayReport {
        times: times.to_vec(),
        normalized_c: fit.as_ref().map(|f| f.c_hat / scale),
        fit,
        tv,
        se,
        best_fn,
        all_zero,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftInvarianceReport {
    pub a: TvDecayReport,
    pub b: TvDecayReport,
    pub sup_bound_a: f64,
    pub sup_bound_b: f64,
    /// Equal sup bounds; otherwise the comparison is informational.
    pub within_hypothesis: bool,
    pub eta_ratio: Option<f64>,
    pub c_ratio: Option<f64>,
    pub pass: bool,
}

fn symmetric_ratio(p: f64, q: f64) -> f64 {
    if p > 0.0 && q > 0.0 {
        (p / q).max(q / p)
    } else {
        f64::INFINITY
    }
}

/// Decay constants for two drifts: comparable when `η̂` and `ĉ` agree
/// within a factor 3.
#[allow(clippy::too_many_arguments)]
pub fn drift_invariance_audit(
    model: &ModelSpec,
    drift_a: &DriftField,
    drift_b: &DriftField,
    x: &[f64],
    x_prime: &[f64],
    times: &[f64],
    test_fns: &[TestFn],
    n_mc: usize,
    dt: f64,
    seed: u64,
) -> Result<DriftInvarianceReport> {
    let a = tv_decay_estimate(model, drift_a, x, x_prime, times, test_fns, n_mc, dt, seed)?;
    let b = tv_decay_estimate(model, drift_b, x, x_prime, times, test_fns, n_mc, dt, seed.wrapping_add(1))?;
    let (eta_ratio, c_ratio) = match (&a.fit, &b.fit) {
        (Some(fa), Some(fb)) => (Some(symmetric_ratio(fa.eta_hat, fb.eta_hat)), Some(symmetric_ratio(fa.c_hat, fb.c_hat))),
        _ => (None, None),
    };
    let within_hypothesis =
        (drift_a.sup_bound - drift_b.sup_bound).abs() <= 1e-12 * (1.0 + drift_a.sup_bound.max(drift_b.sup_bound));
    let pass = matches!((eta_ratio, c_ratio), (Some(e), Some(c)) if e <= 3.0 && c <= 3.0);
    Ok(DriftInvarianceReport {
        sup_bound_a: drift_a.sup_bound,
        sup_bound_b: drift_b.sup_bound,
        a,
        b,
        within_hypothesis,
        eta_ratio,
        c_ratio,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;

    fn scalar() -> ModelSpec {
        ModelSpec::new(vec![-1.0], Mat::identity(1)).unwrap()
    }

    #[test]
    fn config_invariants() {
        let m = scalar();
        let cfg = CouplingConfig::new(&m, 0.25, 10, 10, 0.01);
        cfg.validate(&m).unwrap();
        assert!((cfg.period - 8f64.ln()).abs() < 1e-15);
        let bad = CouplingConfig { eta: 2.0, ..cfg };
        assert!(bad.validate(&m).is_err());
    }

    #[test]
    fn identical_laws_always_meet() {
        let m = scalar();
        let cfg = CouplingConfig::new(&m, 0.25, 10, 10, 0.01);
        for seed in 0..20 {
            let c = bridge_maximal_coupling(&m, &DriftField::zero(), &[0.3], &[0.3], &cfg, seed).unwrap();
            assert!(c.met);
            assert_eq!(c.log_ratio, 0.0);
            assert_eq!(c.path1, c.path2);
        }
    }

    #[test]
    fn met_legs_agree_at_period_end() {
        let m = scalar();
        let cfg = CouplingConfig::new(&m, 1.0, 10, 10, 0.01);
        let mut seen = false;
        for seed in 0..50 {
            let c = bridge_maximal_coupling(&m, &DriftField::zero(), &[0.5], &[-0.4], &cfg, seed).unwrap();
            assert_eq!(c.path1[0], 0.5);
            assert!((c.path2[0] + 0.4).abs() < 1e-14);
            if c.met {
                seen = true;
                assert!((c.end1(1)[0] - c.end2(1)[0]).abs() < 1e-14);
            }
        }
        assert!(seen);
    }

    #[test]
    fn discrete_maximal_coupling() {
        let p = [0.5, 0.3, 0.2];
        let q = [0.2, 0.3, 0.5];
        assert!((total_variation(&p, &q) - 0.3).abs() < 1e-15);
        let r = discrete_coupling_check(&p, &q, 20_000, 3).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn test_functions_are_bounded() {
        for f in test_library(&[0.5, 0.2]) {
            for x in [[10.0, -3.0], [0.0, 0.0], [-0.4, 0.1]] {
                assert!(f.eval(&x).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn same_start_has_no_signal() {
        let m = scalar();
        let fns = test_library(&[0.7]);
        let r = tv_decay_estimate(&m, &DriftField::zero(), &[1.0], &[1.0], &[0.5, 1.0], &fns, 2000, 0.01, 1).unwrap();
        for (d, s) in r.tv.iter().zip(&r.se) {
            assert!(*d <= 4.0 * s);
        }
    }
}
