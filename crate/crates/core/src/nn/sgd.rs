//! SGD with classical momentum: `v <- momentum * v + grad; p <- p - lr * v`.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor2;
use crate::nn::{Gradients, NetParams};
use crate::scalar::Real;

pub struct SgdMomentum<T: Real> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Tensor2<T>>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(params: &NetParams<T>, learning_rate: T, momentum: T) -> Self {
        SgdMomentum {
            learning_rate,
            momentum,
            velocity: params
                .param_tensors()
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut NetParams<T>, grads: &Gradients<T>) -> Result<()> {
        let tensors = params.param_tensors_mut();
        if tensors.len() != grads.tensors.len() || tensors.len() != self.velocity.len() {
            return Err(Error::Shape(format!(
                "optimizer slot mismatch: {} params, {} grads, {} velocities",
                tensors.len(),
                grads.tensors.len(),
                self.velocity.len()
            )));
        }
        for ((param, grad), vel) in tensors.into_iter().zip(&grads.tensors).zip(&mut self.velocity)
        {
            if param.shape() != grad.shape() {
                return Err(Error::Shape("gradient shape mismatch".into()));
            }
            for ((p, &g), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(vel.data_mut())
            {
                *v = self.momentum * *v + g;
                *p -= self.learning_rate * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use crate::nn::NetConfig;

    /// Quadratic in the first weight entry: loss = 0.5 * w00^2.
    fn quadratic_grad(params: &NetParams<f64>) -> Gradients<f64> {
        let mut grads = Gradients::zeros_like(params);
        let w00 = params.param_tensors()[0].get(0, 0);
        grads.tensors[0].set(0, 0, w00);
        grads
    }

    #[test]
    fn single_step_without_momentum() {
        let cfg = NetConfig::default();
        let mut params = NetParams::<f64>::init(&cfg, 0).unwrap();
        params.param_tensors_mut()[0].set(0, 0, 1.0);
        let mut opt = SgdMomentum::new(&params, 0.1, 0.0);
        let grads = quadratic_grad(&params);
        opt.step(&mut params, &grads).unwrap();
        assert!((params.param_tensors()[0].get(0, 0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_defaults_converge_on_quadratic() {
        let cfg = NetConfig::default();
        let mut params = NetParams::<f64>::init(&cfg, 1).unwrap();
        params.param_tensors_mut()[0].set(0, 0, 1.0);
        // paper defaults: lr 0.001, momentum 0.9
        let mut opt = SgdMomentum::new(&params, 0.001, 0.9);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let w = params.param_tensors()[0].get(0, 0);
            losses.push(0.5 * w * w);
            let grads = quadratic_grad(&params);
            opt.step(&mut params, &grads).unwrap();
        }
        // monotone decreasing after burn-in
        for win in losses[5..].windows(2) {
            assert!(win[1] <= win[0] + 1e-15);
        }
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn tape_gradient_drives_scalar_to_minimum() {
        // minimize (x - 3)^2 over a 1x1 "parameter" via the tape
        let mut value = Tensor2::scalar(10.0f64);
        let mut velocity = 0.0f64;
        for _ in 0..200 {
            let env = vec![value.clone()];
            let mut tape = Tape::new(&env);
            let x = tape.var(0);
            let shifted = tape.add_scalar(x, -3.0);
            let sq = tape.mul(shifted, shifted);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss).unwrap();
            velocity = 0.9 * velocity + grads[0].item();
            let updated = value.item() - 0.05 * velocity;
            value = Tensor2::scalar(updated);
        }
        assert!((value.item() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_mismatched_slots() {
        let cfg = NetConfig::default();
        let mut params = NetParams::<f64>::init(&cfg, 2).unwrap();
        let mut opt = SgdMomentum::new(&params, 0.1, 0.0);
        let mut grads = Gradients::zeros_like(&params);
        grads.tensors.pop();
        assert!(opt.step(&mut params, &grads).is_err());
    }
}
