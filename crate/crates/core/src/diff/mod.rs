//! Small reverse-mode differentiation layer over dense `f64` matrices.
//!
//! Every op records its inputs on a [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse and accumulates vector-Jacobian products. [`gradcheck`]
//! compares those gradients against central finite differences.

mod gradcheck;
mod tape;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, ParamCheck};
pub use tape::{CustomVjp, Gradients, Tape, Tensor, Var};

/// Whether batch normalization uses batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Eval,
}

/// Running statistics and hyperparameters of one batch-norm layer.
///
/// The affine `gamma`/`beta` are trainable and live with the other parameters;
/// this holds the non-trainable state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "batch norm epsilon {} must be > 0",
                self.epsilon
            )));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!(
                "batch norm momentum {} outside (0,1)",
                self.momentum
            )));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("negative running variance".into()));
        }
        Ok(())
    }
}

/// Training-mode batch norm: normalizes with the batch's own statistics and
/// folds them into the running estimates.
pub fn batchnorm_train(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BatchNormState,
) -> Result<Var> {
    let (y, mean, var) = tape.batchnorm_raw(x, gamma, beta, None, state.epsilon)?;
    let n = tape.shape(x).0 as f64;
    let m = state.momentum;
    let unbiased = var * (n / (n - 1.0));
    state.running_mean = &state.running_mean * (1.0 - m) + &(mean * m);
    state.running_var = &state.running_var * (1.0 - m) + &(unbiased * m);
    Ok(y)
}

/// Eval-mode batch norm with frozen running statistics.
pub fn batchnorm_eval(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &BatchNormState,
) -> Result<Var> {
    if tape.shape(x).1 != state.channels() {
        return Err(Error::ShapeMismatch(format!(
            "batch norm over {} channels, input has {}",
            state.channels(),
            tape.shape(x).1
        )));
    }
    let (y, _, _) = tape.batchnorm_raw(
        x,
        gamma,
        beta,
        Some((&state.running_mean, &state.running_var)),
        state.epsilon,
    )?;
    Ok(y)
}
