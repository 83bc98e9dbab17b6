use super::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor with its gradient and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    has_grad: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            grad: Tensor::zeros(shape.clone()),
            momentum: Tensor::zeros(shape),
            value,
            has_grad: false,
        }
    }

    pub fn has_grad(&self) -> bool {
        self.has_grad
    }

    pub fn set_grad(&mut self, grad: Tensor) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::contract(
                "set_grad",
                format!("{}: gradient {:?} vs value {:?}", self.name, grad.shape(), self.value.shape()),
            ));
        }
        self.grad = grad;
        self.has_grad = true;
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad.scale_assign(0.0);
        self.has_grad = false;
    }
}

/// SGD with momentum where weight decay is folded into the gradient before
/// the momentum accumulation:
///
/// ```text
/// v ← momentum·v + g + weight_decay·θ
/// θ ← θ − lr·v
/// ```
///
/// Gradients are cleared afterwards.
pub fn sgd_update(params: &mut [Parameter], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::contract("sgd_update", format!("learning rate must be positive, got {lr}")));
    }
    if let Some(p) = params.iter().find(|p| !p.has_grad) {
        return Err(Error::State(format!("sgd_update: no gradient for {}", p.name)));
    }
    for p in params.iter_mut() {
        let theta = p.value.data_mut();
        let v = p.momentum.data_mut();
        for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(p.grad.data()) {
            *v = momentum * *v + g + weight_decay * *t;
            *t -= lr * *v;
        }
        if !p.value.is_finite() {
            return Err(Error::NonFinite { op: "sgd_update" });
        }
        p.clear_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(theta: f64, grad: f64) -> Parameter {
        let mut p = Parameter::new("theta", Tensor::new([1], vec![theta]).unwrap());
        p.set_grad(Tensor::new([1], vec![grad]).unwrap()).unwrap();
        p
    }

    #[test]
    fn plain_step() {
        let mut ps = [scalar_param(1.0, 2.0)];
        sgd_update(&mut ps, 0.1, 0.0, 0.0).unwrap();
        assert!((ps[0].value.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps() {
        let mut ps = [scalar_param(0.0, 1.0)];
        sgd_update(&mut ps, 0.1, 0.9, 0.0).unwrap();
        assert!((ps[0].value.item() + 0.1).abs() < 1e-15);
        ps[0].set_grad(Tensor::new([1], vec![1.0]).unwrap()).unwrap();
        sgd_update(&mut ps, 0.1, 0.9, 0.0).unwrap();
        assert!((ps[0].momentum.item() - 1.9).abs() < 1e-15);
        assert!((ps[0].value.item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut ps = [scalar_param(0.7, 0.0)];
        sgd_update(&mut ps, 0.5, 0.9, 0.0).unwrap();
        assert_eq!(ps[0].value.item(), 0.7);
    }

    #[test]
    fn weight_decay_enters_the_velocity() {
        let mut ps = [scalar_param(2.0, 0.0)];
        sgd_update(&mut ps, 0.1, 0.0, 0.5).unwrap();
        assert!((ps[0].value.item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut ps = [scalar_param(1.0, 1.0)];
        assert!(matches!(sgd_update(&mut ps, 0.0, 0.0, 0.0), Err(Error::Contract { .. })));
        assert!(sgd_update(&mut ps, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn requires_gradients() {
        let mut ps = [Parameter::new("w", Tensor::zeros([2]))];
        assert!(matches!(sgd_update(&mut ps, 0.1, 0.0, 0.0), Err(Error::State(_))));
    }
}
