use super::params::Params;
use super::scalar::Scalar;
use crate::error::Result;

/// Adam hyperparameters.
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Params<T>,
    v: Params<T>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Params<T>, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) -> Result<()> {
        params.check_layout(grads, "adam_step")?;
        params.check_layout(&self.m, "adam_step")?;
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let tensors = params.tensors_mut().iter_mut();
        let moments = self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut().iter_mut());
        for ((p, g), (m, v)) in tensors.zip(grads.tensors()).zip(moments) {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = gd[i].to_f64_lossless();
                let mi = beta1 * md[i].to_f64_lossless() + (1.0 - beta1) * gi;
                let vi = beta2 * vd[i].to_f64_lossless() + (1.0 - beta2) * gi * gi;
                md[i] = T::from_f64_lossy(mi);
                vd[i] = T::from_f64_lossy(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                pd[i] = T::from_f64_lossy(pd[i].to_f64_lossless() - update);
            }
        }
        Ok(())
    }
}
