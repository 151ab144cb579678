use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based), in place.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hp: &AdamConfig,
) {
    let c1 = 1.0 - hp.beta1.powf(t as f64);
    let c2 = 1.0 - hp.beta2.powf(t as f64);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Adam state for every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Advance the step counter and update every tensor. `None` gradients
    /// (parameters the loss did not reach) count as zero.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<&[f64]>]) {
        self.step += 1;
        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            let zero;
            let g = match grads[i] {
                Some(g) => g,
                None => {
                    zero = vec![0.0; t.numel()];
                    &zero
                }
            };
            adam_update(
                t.data_mut(),
                g,
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                &self.config,
            );
        }
    }
}
