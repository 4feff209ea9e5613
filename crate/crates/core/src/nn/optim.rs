use serde::{Deserialize, Serialize};

use super::{Element, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
        }
    }
}

/// Nesterov SGD with coupled L2 weight decay.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Element = f32> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    /// One zeroed velocity buffer per parameter.
    pub fn new(config: SgdConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            velocity: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn velocity(&self, index: usize) -> &[T] {
        &self.velocity[index]
    }
}

/// Updates every parameter that carries a gradient:
///
/// ```text
/// g' = g + weight_decay * p
/// v  = momentum * v + g'
/// p  = p - lr * (g' + momentum * v)
/// ```
///
/// Arithmetic is done in f64 and rounded once into the parameter type.
pub fn sgd_step<T: Element>(params: &mut [Tensor<T>], state: &mut OptimizerState<T>) -> Result<(), NnError> {
    if params.len() != state.velocity.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} parameters but {} velocity buffers",
            params.len(),
            state.velocity.len()
        )));
    }
    let SgdConfig {
        learning_rate: lr,
        momentum,
        weight_decay: wd,
    } = state.config;
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if v.len() != p.numel() {
            return Err(NnError::ShapeMismatch("velocity buffer shape".into()));
        }
        let Some(g) = p.grad().map(<[T]>::to_vec) else { continue };
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(&g).zip(v.iter_mut()) {
            let w64 = w.as_f64();
            let gd = gi.as_f64() + wd * w64;
            let vel = momentum * vi.as_f64() + gd;
            *vi = T::of_f64(vel);
            *w = T::of_f64(w64 - lr * (gd + momentum * vel));
        }
    }
    Ok(())
}
