//! Central finite-difference gradient checker.
//!
//! The numeric side only ever calls a scalar loss closure on perturbed
//! parameters; it shares no code with the reverse pass it validates.

use super::Parameterized;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for relative error, so gradients that are
/// numerically zero compare on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Numeric gradient of `loss` with respect to every parameter of `model`,
/// laid out like `model.param_slices()`. The model is restored afterwards.
pub fn numeric_gradient<M, F>(model: &mut M, h: f64, mut loss: F) -> Vec<Vec<f64>>
where
    M: Parameterized,
    F: FnMut(&M) -> f64,
{
    let lens: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    let mut out = Vec::with_capacity(lens.len());
    for (block, &len) in lens.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = model.param_slices()[block][j];
            model.param_slices_mut()[block][j] = orig + h;
            let up = loss(model);
            model.param_slices_mut()[block][j] = orig - h;
            let down = loss(model);
            model.param_slices_mut()[block][j] = orig;
            *gj = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (block, index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.worst.is_some() && (self.worst.is_none() || other.max_rel_error > self.max_rel_error) {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
    }

    pub fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        }
    }
}

pub fn compare<M: Parameterized + ?Sized>(analytic: &M, numeric: &[Vec<f64>]) -> GradCheckReport {
    compare_slices(&analytic.param_slices(), numeric)
}

pub fn compare_slices(analytic: &[&[f64]], numeric: &[Vec<f64>]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient block count");
    let mut report = GradCheckReport::empty();
    for (b, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.len(), n.len(), "gradient block {b} length");
        for (j, (&ai, &ni)) in a.iter().zip(n).enumerate() {
            let e = relative_error(ai, ni);
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((b, j, ai, ni));
            }
            report.checked += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_gradient() {
        let mut w = array![[3.0, -1.0]];
        let g = numeric_gradient(&mut w, 1e-5, |w| w.iter().map(|v| v * v).sum());
        assert!((g[0][0] - 6.0).abs() < 1e-8);
        assert!((g[0][1] + 2.0).abs() < 1e-8);
        assert_eq!(w, array![[3.0, -1.0]]);
    }

    #[test]
    fn floor_applies_to_tiny_values() {
        assert!(relative_error(1e-12, 2e-12) < 1e-5);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
