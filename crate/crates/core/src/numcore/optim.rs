use crate::error::{Error, Result};
use crate::numcore::{Grads, Network, Scalar, Tensor};

/// One momentum SGD update: `v <- momentum * v - lr * g; p <- p + v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    velocity: &mut Tensor<T>,
    grad: &Tensor<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::param(format!("invalid sgd settings lr={lr} momentum={momentum}")));
    }
    param.expect_shape(grad.shape())?;
    velocity.expect_shape(grad.shape())?;
    if let Some(pos) = grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!("non-finite gradient at element {pos}")));
    }
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for ((p, v), &g) in param.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad.data()) {
        *v = mu * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Momentum SGD over all parameters of a [`Network`].
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(net: &Network<T>, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::param(format!("invalid sgd settings lr={lr} momentum={momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: net.zero_grads().per_layer,
        })
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Grads<T>) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Training("non-finite gradient".into()));
        }
        for (idx, (vel, g)) in self.velocity.iter_mut().zip(&grads.per_layer).enumerate() {
            if vel.is_empty() {
                continue;
            }
            let params = net.layer_params_mut(idx);
            for ((p, v), gt) in params.iter_mut().zip(vel.iter_mut()).zip(g) {
                sgd_step(p, v, gt, self.lr, self.momentum)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut p = Tensor::vector(vec![1.0f64]);
        let mut v = Tensor::zeros(&[1]);
        sgd_step(&mut p, &mut v, &Tensor::vector(vec![2.0]), 0.1, 0.0).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Tensor::vector(vec![1.0f64, -2.0]);
        let mut v = Tensor::zeros(&[2]);
        sgd_step(&mut p, &mut v, &Tensor::zeros(&[2]), 0.1, 0.9).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn momentum_recurrence() {
        let (lr, mu, g) = (0.1, 0.9, 2.0);
        let mut p = Tensor::vector(vec![1.0f64]);
        let mut v = Tensor::zeros(&[1]);
        let grad = Tensor::vector(vec![g]);
        sgd_step(&mut p, &mut v, &grad, lr, mu).unwrap();
        sgd_step(&mut p, &mut v, &grad, lr, mu).unwrap();
        let v1 = -lr * g;
        let v2 = mu * v1 - lr * g;
        assert!((p.data()[0] - (1.0 + v1 + v2)).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_training_error() {
        let mut p = Tensor::vector(vec![1.0f32]);
        let mut v = Tensor::zeros(&[1]);
        let r = sgd_step(&mut p, &mut v, &Tensor::vector(vec![f32::NAN]), 0.1, 0.0);
        assert!(matches!(r, Err(Error::Training(_))));
    }
}
