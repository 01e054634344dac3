use super::Parameterized;
use crate::error::{Error, Result};

/// RMSprop hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

/// Running average of squared gradients, one accumulator per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    acc: Vec<Vec<f64>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.acc
    }
}

impl RmsProp {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!("learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidHyperparameter(format!("rho {} not in [0, 1)", self.rho)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidHyperparameter(format!("eps {} must be > 0", self.eps)));
        }
        Ok(())
    }

    /// One update over matching parameter and gradient slices:
    /// `acc = rho acc + (1 - rho) g^2`, `p -= lr g / (sqrt(acc) + eps)`.
    ///
    /// The state is sized from the parameters on the first call.
    pub fn step_slices(
        &self,
        params: Vec<&mut [f64]>,
        grads: Vec<&[f64]>,
        state: &mut OptimizerState,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidShape(format!(
                "{} parameter blocks but {} gradient blocks",
                params.len(),
                grads.len()
            )));
        }
        if state.acc.is_empty() && state.steps == 0 {
            state.acc = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if state.acc.len() != params.len() {
            return Err(Error::InvalidShape("optimizer state does not match parameters".into()));
        }
        for ((p, g), acc) in params.iter().zip(&grads).zip(&state.acc) {
            if p.len() != g.len() || p.len() != acc.len() {
                return Err(Error::InvalidShape(format!(
                    "parameter block of {} with gradient of {} and state of {}",
                    p.len(),
                    g.len(),
                    acc.len()
                )));
            }
        }
        for ((p, g), acc) in params.into_iter().zip(grads).zip(state.acc.iter_mut()) {
            for ((pi, &gi), ai) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
                *ai = self.rho * *ai + (1.0 - self.rho) * gi * gi;
                *pi -= self.lr * gi / (ai.sqrt() + self.eps);
            }
        }
        state.steps += 1;
        Ok(())
    }

    pub fn step<P: Parameterized>(&self, params: &mut P, grads: &P, state: &mut OptimizerState) -> Result<()> {
        self.step_slices(params.param_slices_mut(), grads.param_slices(), state)
    }
}
