//! Per-coordinate optimizers used for pretraining (and Adam for outer loops).

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                found: grad.len().min(params.len()),
            });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FtrlConfig {
    pub alpha: f64,
    pub beta: f64,
    pub l1: f64,
    pub l2: f64,
}

impl Default for FtrlConfig {
    fn default() -> Self {
        FtrlConfig {
            alpha: 0.1,
            beta: 1.0,
            l1: 1e-5,
            l2: 1e-5,
        }
    }
}

/// FTRL-Proximal. Coordinates with a zero gradient are left untouched, so
/// features that never occur keep their initial values.
#[derive(Debug, Clone)]
pub struct Ftrl {
    pub config: FtrlConfig,
    z: Vec<f64>,
    n: Vec<f64>,
}

impl Ftrl {
    pub fn new(config: FtrlConfig, len: usize) -> Self {
        Ftrl {
            config,
            z: vec![0.0; len],
            n: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.z.len() || grad.len() != self.z.len() {
            return Err(Error::LengthMismatch {
                expected: self.z.len(),
                found: grad.len().min(params.len()),
            });
        }
        let FtrlConfig { alpha, beta, l1, l2 } = self.config;
        for i in 0..params.len() {
            let g = grad[i];
            if g == 0.0 {
                continue;
            }
            let n_new = self.n[i] + g * g;
            let sigma = (n_new.sqrt() - self.n[i].sqrt()) / alpha;
            self.z[i] += g - sigma * params[i];
            self.n[i] = n_new;
            let z = self.z[i];
            params[i] = if z.abs() <= l1 {
                0.0
            } else {
                -(z - z.signum() * l1) / ((beta + n_new.sqrt()) / alpha + l2)
            };
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut opt = Adam::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, 1.0, 1.0];
        opt.step(&mut p, &[0.5, -2.0, 0.0]).unwrap();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            2,
        );
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn ftrl_closed_form_first_step() {
        let cfg = FtrlConfig::default();
        let mut opt = Ftrl::new(cfg, 2);
        let mut p = vec![0.0, 0.3];
        opt.step(&mut p, &[-0.5, 0.0]).unwrap();
        // z = -0.5, n = 0.25
        let expected = (0.5 - 1e-5) / ((1.0 + 0.5) / 0.1 + 1e-5);
        assert!((p[0] - expected).abs() < 1e-15);
        assert_eq!(p[1], 0.3);
    }

    #[test]
    fn ftrl_l1_zeroes_small_accumulators() {
        let mut opt = Ftrl::new(
            FtrlConfig {
                l1: 1.0,
                ..Default::default()
            },
            1,
        );
        let mut p = vec![0.0];
        opt.step(&mut p, &[0.5]).unwrap();
        assert_eq!(p[0], 0.0);
    }
}
