//! Hitting times of centred balls and the empirical invariant law.

use serde::{Deserialize, Serialize};

use crate::coupling::TestFn;
use crate::error::{Error, Result};
use crate::forward::Scheme;
use crate::linalg::norm;
use crate::mc::par_replicas;
use crate::model::{DriftField, ModelSpec};
use crate::rng::{fill_normals, stream};
use crate::stats::{batch_means, wilson_interval, MeanSe};

/// Probability required at the largest horizon.
pub const HIT_TARGET: f64 = 0.99;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HittingReport {
    pub epsilon: f64,
    pub horizons: Vec<f64>,
    /// Empirical `P(τ ≤ T)` per horizon.
    pub hit_prob: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub n_mc: usize,
    pub seed: u64,
    pub dt: f64,
}

impl HittingReport {
    pub fn final_prob(&self) -> f64 {
        *self.hit_prob.last().unwrap_or(&0.0)
    }

    pub fn pass(&self) -> bool {
        self.final_prob() >= HIT_TARGET
    }

    pub fn monotone_in_time(&self) -> bool {
        self.hit_prob.windows(2).all(|w| w[1] >= w[0])
    }
}

/// First sample time with `|X| < ε`, for every `ε` in `epsilons` on the
/// same paths. Paths stop at the largest horizon.
#[allow(clippy::too_many_arguments)]
pub fn hitting_time_cdf_multi(
    model: &ModelSpec,
    drift: &DriftField,
    x: &[f64],
    epsilons: &[f64],
    horizons: &[f64],
    n_mc: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<HittingReport>> {
    if epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Precondition("radii must be positive".into()));
    }
    if horizons.is_empty() || horizons.windows(2).any(|w| !(w[1] > w[0])) || horizons[0] < 0.0 {
        return Err(Error::Precondition("horizons must be nonnegative and increasing".into()));
    }
    let scheme = Scheme::new(model, dt)?;
    let last = (horizons[horizons.len() - 1] / dt).round() as usize;
    let n = model.n_modes;
    // first hitting step per radius, usize::MAX when not hit
    let hits: Vec<Vec<usize>> = par_replicas(n_mc, |i| {
        let mut rng = stream(seed, i as u64);
        let mut v = x.to_vec();
        let (mut buf, mut eta) = (vec![0.0; n], vec![0.0; n]);
        let mut first = vec![usize::MAX; epsilons.len()];
        let mut open = epsilons.len();
        let mark = |v: &[f64], step: usize, first: &mut [usize], open: &mut usize| {
            let r = norm(v);
            for (f, e) in first.iter_mut().zip(epsilons) {
                if *f == usize::MAX && r < *e {
                    *f = step;
                    *open -= 1;
                }
            }
        };
        mark(&v, 0, &mut first, &mut open);
        let mut step = 0;
        while open > 0 && step < last {
            fill_normals(&mut rng, &mut eta);
            scheme.step(drift, &mut v, &eta, &mut buf);
            step += 1;
            mark(&v, step, &mut first, &mut open);
        }
        first
    });
    Ok(epsilons
        .iter()
        .enumerate()
        .map(|(e, &epsilon)| {
            let mut hit_prob = Vec::with_capacity(horizons.len());
            let mut ci_low = Vec::with_capacity(horizons.len());
            let mut ci_high = Vec::with_capacity(horizons.len());
            for &t in horizons {
                let limit = (t / dt).round() as usize;
                let k = hits.iter().filter(|h| h[e] <= limit).count();
                let (lo, hi) = wilson_interval(k, n_mc, 1.96);
                hit_prob.push(k as f64 / n_mc as f64);
                ci_low.push(lo);
                ci_high.push(hi);
            }
            HittingReport { epsilon, horizons: horizons.to_vec(), hit_prob, ci_low, ci_high, n_mc, seed, dt }
        })
        .collect())
}

/// Single-radius form of [`hitting_time_cdf_multi`].
#[allow(clippy::too_many_arguments)]
pub fn hitting_time_cdf(
    model: &ModelSpec,
    drift: &DriftField,
    x: &[f64],
    epsilon: f64,
    horizons: &[f64],
    n_mc: usize,
    dt: f64,
    seed: u64,
) -> Result<HittingReport> {
    Ok(hitting_time_cdf_multi(model, drift, x, &[epsilon], horizons, n_mc, dt, seed)?.remove(0))
}

/// Exact monotonicity in `T` within each report and in `ε` across reports
/// sorted by radius.
pub fn hitting_monotone(reports: &[HittingReport]) -> bool {
    let mut sorted: Vec<&HittingReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
    sorted.iter().all(|r| r.monotone_in_time())
        && sorted.windows(2).all(|w| w[0].hit_prob.iter().zip(&w[1].hit_prob).all(|(a, b)| b >= a))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeComparison {
    pub probe: TestFn,
    /// Long-path time average from the first start, batch-means SE.
    pub time_average: MeanSe,
    /// Ensemble averages at `burn_in` from each start.
    pub ensemble: [MeanSe; 2],
    pub ergodic_ok: bool,
    pub mixing_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantReport {
    pub burn_in: f64,
    pub horizon: f64,
    pub starts: [Vec<f64>; 2],
    pub probes: Vec<ProbeComparison>,
    pub pass: bool,
    /// Set on failure: rescale factor for `burn_in` and `horizon`.
    pub suggested_rescale: Option<f64>,
}

/// Defaults `10/k` and `200/k`.
pub fn default_spans(model: &ModelSpec) -> (f64, f64) {
    (10.0 / model.k_diss, 200.0 / model.k_diss)
}

/// Time average of each probe along one long path against ensemble
/// averages at time `burn_in` from two starting points.
#[allow(clippy::too_many_arguments)]
pub fn invariant_measure_estimate(
    model: &ModelSpec,
    drift: &DriftField,
    starts: [&[f64]; 2],
    burn_in: f64,
    horizon: f64,
    n_paths: usize,
    probes: &[TestFn],
    dt: f64,
    seed: u64,
) -> Result<InvariantReport> {
    if !(burn_in > 0.0 && horizon > 0.0) {
        return Err(Error::Precondition("burn_in and horizon must be positive".into()));
    }
    let scheme = Scheme::new(model, dt)?;
    let n = model.n_modes;
    let burn_steps = (burn_in / dt).round() as usize;
    let avg_steps = (horizon / dt).round().max(1.0) as usize;

    let mut rng = stream(seed, 0);
    let mut v = starts[0].to_vec();
    let (mut buf, mut eta) = (vec![0.0; n], vec![0.0; n]);
    let mut series = vec![Vec::with_capacity(avg_steps); probes.len()];
    for step in 0..burn_steps + avg_steps {
        fill_normals(&mut rng, &mut eta);
        scheme.step(drift, &mut v, &eta, &mut buf);
        if step >= burn_steps {
            for (s, p) in series.iter_mut().zip(probes) {
                s.push(p.eval(&v));
            }
        }
    }
    let ensemble_at = |start: &[f64], offset: u64| -> Vec<Vec<f64>> {
        par_replicas(n_paths, |i| {
            let mut rng = stream(seed, offset + i as u64);
            let mut v = start.to_vec();
            let (mut buf, mut eta) = (vec![0.0; n], vec![0.0; n]);
            for _ in 0..burn_steps {
                fill_normals(&mut rng, &mut eta);
                scheme.step(drift, &mut v, &eta, &mut buf);
            }
            probes.iter().map(|p| p.eval(&v)).collect()
        })
    };
    let ens_a = ensemble_at(starts[0], 1);
    let ens_b = ensemble_at(starts[1], 1 + n_paths as u64);
    let comparisons: Vec<ProbeComparison> = probes
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let time_average = batch_means(&series[k], 20);
            let col = |e: &Vec<Vec<f64>>| MeanSe::from_samples(&e.iter().map(|r| r[k]).collect::<Vec<_>>());
            let (a, b) = (col(&ens_a), col(&ens_b));
            let within = |x: &MeanSe, y: &MeanSe| (x.mean - y.mean).abs() <= 3.0 * x.combined_se(y) + 1e-12;
            ProbeComparison {
                probe: p.clone(),
                ergodic_ok: within(&time_average, &a),
                mixing_ok: within(&a, &b),
                time_average,
                ensemble: [a, b],
            }
        })
        .collect();
    let pass = comparisons.iter().all(|c| c.ergodic_ok && c.mixing_ok);
    Ok(InvariantReport {
        burn_in,
        horizon,
        starts: [starts[0].to_vec(), starts[1].to_vec()],
        probes: comparisons,
        pass,
        suggested_rescale: if pass { None } else { Some(2.0) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;

    #[test]
    fn start_inside_ball_hits_immediately() {
        let m = ModelSpec::new(vec![-1.0], Mat::identity(1)).unwrap();
        let r = hitting_time_cdf(&m, &DriftField::zero(), &[0.0], 0.5, &[0.0, 1.0], 100, 0.01, 1).unwrap();
        assert_eq!(r.hit_prob, vec![1.0, 1.0]);
    }

    #[test]
    fn reports_are_monotone() {
        let m = ModelSpec::new(vec![-1.0], Mat::identity(1)).unwrap();
        let reps =
            hitting_time_cdf_multi(&m, &DriftField::zero(), &[2.0], &[0.25, 0.5], &[0.5, 1.0, 2.0], 500, 0.01, 3)
                .unwrap();
        assert!(hitting_monotone(&reps));
    }
}
