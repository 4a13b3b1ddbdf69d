use super::{ParamStore, Tensor};

/// Bias-corrected Adam over every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (values, grads) = store.values_and_grads();
        for (k, (value, grad)) in values.iter_mut().zip(grads).enumerate() {
            let (value, grad) = (value.data_mut(), grad.data());
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_noop() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, -2.0]));
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store);
        assert_eq!(store.value(w).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.0, 0.0, 0.0]));
        store.grad_mut(w).data_mut().copy_from_slice(&[3.0, -0.01, 250.0]);
        let mut adam = Adam::new(&store, 1e-3);
        adam.step(&mut store);
        for (v, g) in store.value(w).data().iter().zip([3.0f64, -0.01, 250.0]) {
            assert!((v + 1e-3 * g.signum()).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..200 {
            store.zero_grads();
            let x = store.value(w).data()[0];
            store.grad_mut(w).data_mut()[0] = 2.0 * x;
            adam.step(&mut store);
        }
        assert!(store.value(w).data()[0].abs() < 0.1);
    }
}
