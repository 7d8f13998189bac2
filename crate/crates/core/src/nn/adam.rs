use serde::{Deserialize, Serialize};

use super::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moment buffers mirror the parameter layout.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    step: u32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One descent step on `params` along `grads`.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let tensors = params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for ((p, g), (m, v)) in tensors {
            debug_assert_eq!(p.name, g.name);
            ndarray::Zip::from(&mut p.value)
                .and(&g.value)
                .and(&mut m.value)
                .and(&mut v.value)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut p = ParamSet::new();
        p.push("w", ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let mut g = p.zeros_like();
        g.get_mut("w")
            .unwrap()
            .assign(&ndarray::arr1(&[2.0, -0.5, 0.0]).into_dyn());
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.update(&mut p, &g);
        let w = p.get("w").unwrap();
        assert!((w[[0]] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[[1]] - (1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(w[[2]], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.push("x", ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &p,
        );
        for _ in 0..500 {
            let mut g = p.zeros_like();
            let x = p.get("x").unwrap()[[0]];
            g.get_mut("x").unwrap()[[0]] = 2.0 * (x - 1.0);
            opt.update(&mut p, &g);
        }
        assert!((p.get("x").unwrap()[[0]] - 1.0).abs() < 1e-2);
    }
}
