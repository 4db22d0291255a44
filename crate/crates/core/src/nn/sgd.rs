//! SGD with classical momentum.

use super::Params;
use ndarray::ArrayD;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- momentum*v + (g + wd*p); p <- p - lr*v`, per named parameter.
pub struct Sgd {
    cfg: SgdConfig,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    /// Apply one update. Parameters absent from `grads` are left alone.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, ArrayD<f64>>, lr: f64) {
        for (name, grad) in grads {
            let mut p = params.get(name).as_ref().clone();
            assert_eq!(
                p.shape(),
                grad.shape(),
                "gradient shape mismatch for {name:?}"
            );
            let mut g = grad.clone();
            if self.cfg.weight_decay != 0.0 {
                g.zip_mut_with(&p, |gv, pv| *gv += self.cfg.weight_decay * pv);
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            v.zip_mut_with(&g, |vv, gv| *vv = self.cfg.momentum * *vv + gv);
            p.zip_mut_with(v, |pv, vv| *pv -= lr * vv);
            params.set(name, p);
        }
    }
}
