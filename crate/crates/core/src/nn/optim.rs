use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- mu * v + g`, `p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum<F = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescales the full gradient to at most this L2 norm when positive.
    pub clip_norm: f64,
    velocity: Vec<Tensor<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay: 0.0,
            clip_norm: 0.0,
            velocity: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        }
        let mut scale = 1.0;
        if self.clip_norm > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|x| x.as_f64() * x.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > self.clip_norm {
                scale = self.clip_norm / norm;
            }
        }
        let scale = F::from_f64(scale);
        let (lr, mu, wd) = (
            F::from_f64(self.lr),
            F::from_f64(self.momentum),
            F::from_f64(self.weight_decay),
        );
        for ((p, g), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let gi = scale * gi + wd * *pi;
                *vi = mu * *vi + gi;
                *pi = *pi - lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_update_matches_hand_computation() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut opt = SgdMomentum::new(0.1, 0.9);
        let g = vec![Tensor::vector(vec![1.0, -1.0])];
        opt.step(&mut store, &g).unwrap();
        assert_eq!(store.get(id).data(), &[0.9, 2.1]);
        opt.step(&mut store, &g).unwrap();
        // v = 0.9 * 1 + 1 = 1.9
        let w = store.get(id).data();
        assert!((w[0] - (0.9 - 0.19)).abs() < 1e-12);
        assert!((w[1] - (2.1 + 0.19)).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::vector(vec![0.0, 0.0]));
        let mut opt = SgdMomentum::new(1.0, 0.0).with_clip_norm(1.0);
        opt.step(&mut store, &[Tensor::vector(vec![3.0, 4.0])]).unwrap();
        let w = store.get(id).data();
        assert!((w[0] + 0.6).abs() < 1e-12 && (w[1] + 0.8).abs() < 1e-12);
    }
}
