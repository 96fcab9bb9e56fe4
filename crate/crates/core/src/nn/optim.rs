use super::graph::Grads;
use super::params::ParamStore;
use super::{Mat, NnError, OptimizerConfig};

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimizerConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Result<Self, NnError> {
        config.validate()?;
        let zeros = || {
            (0..params.len())
                .map(|id| Mat::zeros(params.value(id).dim()))
                .collect::<Vec<_>>()
        };
        Ok(Self {
            config,
            m: zeros(),
            v: zeros(),
            steps: vec![0; params.len()],
        })
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<(), NnError> {
        for (id, grad) in grads.0.iter().enumerate() {
            if let Some(g) = grad {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(NnError::NonFiniteGradient(params.name(id).to_string()));
                }
            }
        }
        let OptimizerConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        for (id, grad) in grads.0.iter().enumerate() {
            let Some(g) = grad else { continue };
            self.steps[id] += 1;
            let t = self.steps[id] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let p = params.value_mut(id);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *p *= 1.0 - lr * weight_decay;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
