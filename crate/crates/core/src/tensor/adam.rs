use serde::{Deserialize, Serialize};

use super::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one group of parameters, keyed by position.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub t: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<R>>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    /// One bias-corrected Adam update of every parameter in `params`.
    pub fn step(&mut self, params: &mut [&mut Tensor<R>], grads: &[&Tensor<R>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::InvalidArgument(format!(
                "adam: {} params / {} grads for {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (R::c(c.beta1), R::c(c.beta2));
        let (one_b1, one_b2) = (R::one() - b1, R::one() - b2);
        let corr1 = R::c(1.0 - c.beta1.powi(self.t as i32));
        let corr2 = R::c(1.0 - c.beta2.powi(self.t as i32));
        let (alpha, eps) = (R::c(c.alpha), R::c(c.epsilon));
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                *w = *w - alpha * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
