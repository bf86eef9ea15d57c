use crate::params::ModelParams;
use crate::tensor::{Tensor, TensorError};

/// Half-period cosine decay from `base_lr` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied so far, for bias correction.
    pub steps: u64,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Indexed like the parameters; `None` until a parameter first updates.
    pub moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig, param_count: usize) -> Self {
        Self {
            config,
            moments: vec![None; param_count],
        }
    }

    /// One update of `value` with gradient `grad`.
    pub fn update(&mut self, index: usize, value: &mut Tensor, grad: &Tensor, lr: f64) -> Result<(), TensorError> {
        if value.shape() != grad.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let c = self.config;
        let state = self.moments[index].get_or_insert_with(|| Moments {
            m: Tensor::zeros(grad.shape()),
            v: Tensor::zeros(grad.shape()),
            steps: 0,
        });
        state.steps += 1;
        let bc1 = 1.0 - c.beta1.powi(state.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(state.steps as i32);
        let (m, v) = (state.m.data_mut(), state.v.data_mut());
        for (i, p) in value.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *p);
        }
        Ok(())
    }

    /// Updates every parameter that has a gradient; `None` marks a frozen
    /// parameter, which keeps both its value and its moments.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>], lr: f64) -> Result<(), TensorError> {
        for (index, (id, param)) in params.iter_mut().enumerate() {
            debug_assert_eq!(id.index(), index);
            if let Some(g) = &grads[index] {
                self.update(index, &mut param.value, g, lr)?;
            }
        }
        Ok(())
    }
}
