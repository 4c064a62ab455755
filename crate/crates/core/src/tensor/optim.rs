use super::Tensor;
use crate::error::{Error, Result};

/// One SGD-with-momentum update in place:
/// `v <- momentum * v + (grad + weight_decay * param)`, `param <- param - lr * v`.
pub fn sgd_momentum_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape(format!(
            "sgd step: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut().iter_mut())
    {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    param.check_finite()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd() {
        let mut p = Tensor::scalar(1.0);
        let mut v = Tensor::scalar(0.0);
        sgd_momentum_step(&mut p, &Tensor::scalar(0.5), &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_keeps_params() {
        let mut p = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        sgd_momentum_step(&mut p, &Tensor::zeros(&[2]), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[0.3, -0.7]);
    }

    #[test]
    fn momentum_recurrence() {
        let g = 0.25;
        let mut p = Tensor::scalar(0.0);
        let mut v = Tensor::scalar(0.0);
        let grad = Tensor::scalar(g);
        sgd_momentum_step(&mut p, &grad, &mut v, 0.01, 0.9, 0.0).unwrap();
        sgd_momentum_step(&mut p, &grad, &mut v, 0.01, 0.9, 0.0).unwrap();
        assert!((v.data()[0] - 1.9 * g).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut v = Tensor::zeros(&[3]);
        assert!(sgd_momentum_step(&mut p, &Tensor::zeros(&[2]), &mut v, 0.1, 0.9, 0.0).is_err());
    }
}
