//! Discretization allowance shared by the residual audits.

use serde::{Deserialize, Serialize};

/// Frozen constant `C` of the allowance `C·(Δt + cell²)`.
///
/// Calibrated on the z-free heat case (`ψ = tanh(x₁)`, `F ≡ 0`, `N = 2`,
/// 61 nodes, `Δt = h = 0.01`), where the measured grid-solver error plus
/// the integrated-identity residual came to about `0.06·(Δt + cell²)`.
/// `calibration_ratio` recomputes that figure.
pub const ALLOWANCE_CONSTANT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Allowance {
    pub constant: f64,
    pub dt: f64,
    pub cell: f64,
}

impl Allowance {
    pub fn new(dt: f64, cell: f64) -> Self {
        Self { constant: ALLOWANCE_CONSTANT, dt, cell }
    }

    pub fn value(&self) -> f64 {
        self.constant * (self.dt + self.cell * self.cell)
    }
}

/// `C·(Δt + cell²)` with the frozen constant.
pub fn allowance(dt: f64, cell: f64) -> f64 {
    Allowance::new(dt, cell).value()
}

/// Observed error divided by `Δt + cell²`; the frozen constant must
/// dominate it.
pub fn calibration_ratio(observed_error: f64, dt: f64, cell: f64) -> f64 {
    observed_error / (dt + cell * cell)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allowance_scales_with_step_and_cell() {
        assert!((allowance(0.01, 0.1) - 0.1 * 0.02).abs() < 1e-15);
        assert!(allowance(0.005, 0.05) < allowance(0.01, 0.1));
    }
}
