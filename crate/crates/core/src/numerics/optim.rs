use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    /// Adaptive first/second moment update.
    Adam,
    /// `p ← p − lr·g`.
    GradientDescent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub mode: OptimizerMode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            mode: OptimizerMode::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn gradient_descent(learning_rate: f64) -> Self {
        Self {
            mode: OptimizerMode::GradientDescent,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NumericsError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NumericsError::InvalidArgument(
                "moment decays must lie in [0, 1)".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(NumericsError::InvalidArgument(
                "epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Moment accumulators, one pair per parameter tensor, plus the step count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// A parameter tensor together with the name used in diagnostics.
pub struct NamedParam<'a> {
    pub name: String,
    pub value: &'a mut Tensor,
}

/// Applies one update to `params` in place.
///
/// Nothing is modified if any gradient is non-finite or mis-shaped.
pub fn optimizer_step(
    params: &mut [NamedParam<'_>],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<(), NumericsError> {
    config.validate()?;
    if params.len() != grads.len() {
        return Err(NumericsError::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(NumericsError::ShapeMismatch {
                context: "optimizer gradient",
                expected: p.value.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(NumericsError::NonFiniteGradient {
                param: p.name.clone(),
            });
        }
    }
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != params.len()
        || state
            .first_moment
            .iter()
            .zip(params.iter())
            .any(|(m, p)| m.len() != p.value.len())
    {
        return Err(NumericsError::InvalidArgument(
            "optimizer state does not match the parameter set".into(),
        ));
    }

    state.step += 1;
    let lr = config.learning_rate;
    match config.mode {
        OptimizerMode::GradientDescent => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (v, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *v -= lr * d;
                }
            }
        }
        OptimizerMode::Adam => {
            let t = state.step as i32;
            let c1 = 1.0 - config.beta1.powi(t);
            let c2 = 1.0 - config.beta2.powi(t);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let m = &mut state.first_moment[i];
                let s = &mut state.second_moment[i];
                for (((v, &d), m), s) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut())
                    .zip(s.iter_mut())
                {
                    *m = config.beta1 * *m + (1.0 - config.beta1) * d;
                    *s = config.beta2 * *s + (1.0 - config.beta2) * d * d;
                    *v -= lr * (*m / c1) / ((*s / c2).sqrt() + config.epsilon);
                }
            }
        }
    }
    Ok(())
}
