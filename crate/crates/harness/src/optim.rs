//! Adam with decoupled weight decay.

use fractal_ir::{ParamStore, Scalar, Tensor};

use crate::config::OptimizerConfig;

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    step: u32,
    m: ParamStore<f64>,
    v: ParamStore<f64>,
}

impl AdamW {
    pub fn new<T: Scalar>(cfg: OptimizerConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, t) in params.iter() {
                s.insert(name.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One update at learning rate `lr`. Weight decay applies to tensors of
    /// rank ≥ 2 only, leaving biases, norms and temperatures alone.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        self.step += 1;
        let OptimizerConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Ok(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let decay = if p.ndim() >= 2 { weight_decay } else { 0.0 };
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv.as_f64();
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                let x = pv.as_f64();
                let upd = x - lr * (mhat / (vhat.sqrt() + eps) + decay * x);
                *pv = T::from_f64(upd);
            }
        }
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm<T: Scalar>(grads: &ParamStore<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::<f64>::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let mut g = ParamStore::new();
        g.insert("w", Tensor::<f64>::new(&[1, 2], vec![0.5, -3.0]).unwrap());
        let mut opt = AdamW::new(OptimizerConfig::default(), &p);
        opt.step(&mut p, &g, 0.1);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(global_norm(&g), (0.25f64 + 9.0).sqrt());
    }

    #[test]
    fn decay_skips_vectors() {
        let cfg = OptimizerConfig {
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        };
        let mut p = ParamStore::new();
        p.insert("b", Tensor::<f64>::new(&[1], vec![2.0]).unwrap());
        p.insert("w", Tensor::<f64>::new(&[1, 1], vec![2.0]).unwrap());
        let mut g = ParamStore::new();
        g.insert("b", Tensor::<f64>::zeros(&[1]));
        g.insert("w", Tensor::<f64>::zeros(&[1, 1]));
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &g, 0.1);
        assert_eq!(p.get("b").unwrap().data()[0], 2.0);
        assert!((p.get("w").unwrap().data()[0] - 1.9).abs() < 1e-12);
    }
}
