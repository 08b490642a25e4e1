use crate::params::{Grads, ParamStore};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Grads,
    pub v: Grads,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            weight_decay,
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let tensors = params.iter_mut().map(|(_, t)| t);
        for (((p, g), m), v) in tensors.zip(grads.iter()).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
            });
        }
    }
}

/// Rescales `grads` so the global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use ndarray::IxDyn;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_decays_weights_geometrically() {
        let mut p = store(&[1.0, -2.0, 0.5]);
        let g = p.zero_grads();
        let mut opt = AdamW::new(&p, [0.9, 0.98], 1e-6, 0.01);
        let lr = 1e-3;
        for _ in 0..10 {
            opt.step(&mut p, &g, lr);
        }
        let factor = (1.0 - lr * 0.01f64).powi(10);
        for (got, init) in p.iter().next().unwrap().1.iter().zip([1.0, -2.0, 0.5]) {
            assert!((got - init * factor).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(&[0.0, 0.0]);
        let mut g = p.zero_grads();
        g.iter_mut().next().unwrap().assign(&ndarray::arr1(&[3.0, -0.5]).into_dyn());
        let mut opt = AdamW::new(&p, [0.9, 0.98], 0.0, 0.0);
        opt.step(&mut p, &g, 0.1);
        let w = p.iter().next().unwrap().1;
        assert!((w[[0]] + 0.1).abs() < 1e-12 && (w[[1]] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let p = store(&[0.0; 4]);
        let mut g = p.zero_grads();
        g.iter_mut().next().unwrap().assign(&ndarray::arr1(&[3.0, 4.0, 0.0, 12.0]).into_dyn());
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 13.0);
        assert!(g.global_norm() <= 1.0 + 1e-6);
        let mut small = p.zero_grads();
        small.iter_mut().next().unwrap().fill(0.1);
        let copy = small.clone();
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, copy);
    }
}
