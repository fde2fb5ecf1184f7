use super::param::ParamStore;
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Stochastic gradient descent with heavy-ball momentum and optional global
/// gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            clip_norm: None,
            velocity: Vec::new(),
        }
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    /// Global L2 norm of all gradients in `store`.
    pub fn grad_norm(store: &ParamStore<T>) -> f64 {
        store
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// `v <- momentum * v + g; p <- p - lr * v`, then clears gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        }
        let mut factor = 1.0;
        if let Some(max) = self.clip_norm {
            let norm = Self::grad_norm(store);
            if norm > max {
                factor = max / norm;
            }
        }
        let (mu, lr, f) = (T::of(self.momentum), T::of(self.lr), T::of(factor));
        let ids: Vec<_> = store.ids().collect();
        for (id, vel) in ids.into_iter().zip(&mut self.velocity) {
            let p = store.get_mut(id);
            for ((w, g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(vel.data_mut()) {
                *v = mu * *v + f * *g;
                *w -= lr * *v;
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::param::Init;

    #[test]
    fn momentum_update() {
        let mut s = ParamStore::<f64>::new(0);
        let w = s.add("w", &[1], Init::Values(vec![1.0])).unwrap();
        let mut opt = Sgd::new(0.1, 0.9);
        s.get_mut(w).grad.data_mut()[0] = 1.0;
        opt.step(&mut s);
        assert!((s.value(w).data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(s.grad(w).data()[0], 0.0);
        s.get_mut(w).grad.data_mut()[0] = 1.0;
        opt.step(&mut s);
        assert!((s.value(w).data()[0] - (0.9 - 0.1 * 1.9)).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut s = ParamStore::<f64>::new(0);
        let w = s.add("w", &[2], Init::Zeros).unwrap();
        s.get_mut(w).grad.data_mut().copy_from_slice(&[30.0, 40.0]);
        let mut opt = Sgd::new(1.0, 0.0).with_clip(5.0);
        opt.step(&mut s);
        assert!((s.value(w).data()[0] + 3.0).abs() < 1e-12);
        assert!((s.value(w).data()[1] + 4.0).abs() < 1e-12);
    }
}
