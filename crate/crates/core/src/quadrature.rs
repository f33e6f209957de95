//! Quadrature rules: composite Gauss–Legendre on [0, 1] for Galerkin
//! projections and tensor Gauss–Hermite rules for Gaussian expectations.

use std::num::NonZeroUsize;

use gauss_quad::{GaussHermite, GaussLegendre};

/// Gauss points per panel of the composite Legendre rule.
pub const LEGENDRE_POINTS_PER_PANEL: usize = 8;

/// Composite Gauss–Legendre rule on [0, 1] with `panels` equal panels.
pub fn composite_legendre(panels: usize) -> (Vec<f64>, Vec<f64>) {
    let rule = GaussLegendre::new(NonZeroUsize::new(LEGENDRE_POINTS_PER_PANEL).unwrap());
    let width = 1.0 / panels as f64;
    let mut nodes = Vec::with_capacity(panels * LEGENDRE_POINTS_PER_PANEL);
    let mut weights = Vec::with_capacity(panels * LEGENDRE_POINTS_PER_PANEL);
    for p in 0..panels {
        let lo = p as f64 * width;
        for &(x, w) in rule.as_node_weight_pairs() {
            nodes.push(lo + 0.5 * width * (x + 1.0));
            weights.push(0.5 * width * w);
        }
    }
    (nodes, weights)
}

/// Gauss–Hermite rule for the standard normal law: `E f(Z) ≈ Σ w_i f(z_i)`.
pub fn standard_normal_rule(points: usize) -> Vec<(f64, f64)> {
    let rule = GaussHermite::new(NonZeroUsize::new(points.max(1)).unwrap());
    let norm = std::f64::consts::PI.sqrt();
    rule.as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (std::f64::consts::SQRT_2 * x, w / norm))
        .collect()
}

/// Tensor-product standard normal rule in `dim` dimensions.
/// Returns flattened nodes (`dim` entries per point) and weights.
pub fn tensor_normal_rule(dim: usize, points_per_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let base = standard_normal_rule(points_per_dim);
    let m = base.len();
    let total = m.pow(dim as u32);
    let mut nodes = Vec::with_capacity(total * dim);
    let mut weights = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut w = 1.0;
        for _ in 0..dim {
            let (z, wz) = base[rem % m];
            nodes.push(z);
            w *= wz;
            rem /= m;
        }
        weights.push(w);
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_trig_products() {
        let (x, w) = composite_legendre(6);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * (std::f64::consts::PI * x).sin().powi(2)).sum();
        assert!((s - 0.5).abs() < 1e-14);
    }

    #[test]
    fn hermite_moments() {
        let rule = standard_normal_rule(5);
        let m2: f64 = rule.iter().map(|(z, w)| w * z * z).sum();
        let m4: f64 = rule.iter().map(|(z, w)| w * z.powi(4)).sum();
        let m0: f64 = rule.iter().map(|(_, w)| w).sum();
        assert!((m0 - 1.0).abs() < 1e-13);
        assert!((m2 - 1.0).abs() < 1e-13);
        assert!((m4 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_rule_weights_sum_to_one() {
        let (nodes, w) = tensor_normal_rule(3, 3);
        assert_eq!(w.len(), 27);
        assert_eq!(nodes.len(), 81);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-13);
    }
}
