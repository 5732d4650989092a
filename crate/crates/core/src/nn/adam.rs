use serde::{Deserialize, Serialize};

use super::{Gradients, MlpParams};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub learning_rate: f64,
    pub first_moment: MlpParams,
    pub second_moment: MlpParams,
    pub step: u64,
}

/// Scalar part of [`OptimState`], stored in checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub(crate) struct OptimMeta {
    pub learning_rate: f64,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &MlpParams, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        })
    }

    pub(crate) fn meta(&self) -> OptimMeta {
        OptimMeta {
            learning_rate: self.learning_rate,
            step: self.step,
        }
    }
}

/// One bias-corrected Adam update. Parameters are untouched when any
/// gradient entry is non-finite.
pub fn step(params: &mut MlpParams, grads: &Gradients, opt: &mut OptimState) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&opt.first_moment) {
        return Err(Error::InvalidSpec(
            "optimizer step with mismatched parameter shapes".into(),
        ));
    }
    if let Some(layer) = grads
        .layers
        .iter()
        .position(|l| l.weights.iter().chain(l.bias.iter()).any(|g| !g.is_finite()))
    {
        return Err(Error::NonFiniteGradient { layer });
    }

    opt.step += 1;
    let t = opt.step as i32;
    let correction1 = 1.0 - ADAM_BETA1.powi(t);
    let correction2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = opt.learning_rate;

    let moments = opt.first_moment.iter_mut().zip(opt.second_moment.iter_mut());
    for ((p, g), (m, v)) in params.iter_mut().zip(grads.iter()).zip(moments) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
    Ok(())
}
