use crate::nn::{Gradients, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// untouched along with their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads.iter() {
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let g = grad.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        let unused = store.add("u", Tensor::vector(vec![3.0])).unwrap();
        let mut adam = Adam::new(&store, 0.1);
        let grads = {
            let mut g = Graph::new(&store);
            let p = g.param(w);
            let p = g.scale(p, -3.0).unwrap();
            let s = g.sum(p).unwrap();
            g.backward(s).unwrap()
        };
        adam.step(&mut store, &grads);
        let got = store.get(w).data().to_vec();
        for (x, y) in got.iter().zip([1.1, -1.9, 0.6]) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(store.get(unused).data(), &[3.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.0; 4])).unwrap();
        let mut g = Graph::new(&store);
        let p = g.param(w);
        let p = g.scale(p, 10.0).unwrap();
        let s = g.sum(p).unwrap();
        let mut grads = g.backward(s).unwrap();
        let before = clip_global_norm(&mut grads, 5.0);
        assert!((before - 20.0).abs() < 1e-12);
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);
        let before = clip_global_norm(&mut grads, 50.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);
    }
}
