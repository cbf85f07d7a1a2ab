//! Rectified Adam.
//!
//! Tracks first/second moment estimates per parameter and rectifies the
//! adaptive step by the variance of the effective sample size. While the
//! rectification term is undefined (early steps, `rho_t <= 4`) the update
//! falls back to the bias-corrected momentum alone, without the adaptive
//! denominator.

use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct RAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moment1: Vec<Vec<f64>>,
    moment2: Vec<Vec<f64>>,
}

impl RAdam {
    pub fn new(lr: f64) -> Self {
        RAdam {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            moment1: Vec::new(),
            moment2: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. `params[k]` and `grads[k]` must stay the
    /// same length across calls; moment buffers are allocated on first use.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer slots",
                format!("{}", params.len()),
                format!("{}", grads.len()),
            ));
        }
        if self.moment1.is_empty() {
            self.moment1 = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.moment2 = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.moment1.len() != params.len() {
            return Err(Error::shape(
                "optimizer slots",
                format!("{}", self.moment1.len()),
                format!("{}", params.len()),
            ));
        }

        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bias2;
        let rectified = rho_t > 4.0;
        let r_t = if rectified {
            (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt()
        } else {
            0.0
        };

        for (k, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if param.len() != grad.len() || param.len() != self.moment1[k].len() {
                return Err(Error::shape(
                    "optimizer slot length",
                    format!("{}", self.moment1[k].len()),
                    format!("{} / {}", param.len(), grad.len()),
                ));
            }
            let m = &mut self.moment1[k];
            let v = &mut self.moment2[k];
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bias1;
                if rectified {
                    let v_hat = (v[i] / bias2).sqrt();
                    param[i] -= self.lr * r_t * m_hat / (v_hat + self.eps);
                } else {
                    param[i] -= self.lr * m_hat;
                }
            }
        }
        Ok(())
    }
}
