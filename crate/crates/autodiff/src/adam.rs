use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

/// Adam with bias correction and a fixed learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        assert!(config.lr > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&config.beta1), "beta1 must be in [0, 1)");
        assert!((0.0..1.0).contains(&config.beta2), "beta2 must be in [0, 1)");
        let zeros = |p: &&Tensor| Tensor::zeros(p.shape());
        Self {
            state: AdamState {
                config,
                step: 0,
                first_moment: params.iter().map(zeros).collect(),
                second_moment: params.iter().map(zeros).collect(),
            },
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// Applies one update in place. `params` and `grads` must line up with the
    /// tensors this optimizer was created for.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        let st = &mut self.state;
        if params.len() != st.first_moment.len() || grads.len() != params.len() {
            return Err(AutodiffError::Contract(format!(
                "adam: {} moments, {} params, {} grads",
                st.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != st.first_moment[i].shape() || g.shape() != p.shape() {
                return Err(AutodiffError::Contract(format!(
                    "adam: parameter {i} shape {:?}, gradient {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    st.first_moment[i].shape()
                )));
            }
        }
        st.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = st.config;
        let t = st.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = st.first_moment[i].data_mut();
            let v = st.second_moment[i].data_mut();
            for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gv;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gv * gv;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
