//! SGD with momentum and decoupled per-parameter L2.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use indexmap::IndexMap;

/// One momentum-SGD update on a single tensor:
/// `v <- momentum * v + (grad + l2 * param)`, `param <- param - lr * v`.
pub fn sgd_momentum_step<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    velocity: &mut [S],
    lr: S,
    momentum: S,
    l2: S,
) -> Result<()> {
    if lr <= S::zero() {
        return Err(Error::param("sgd_momentum_step", "lr must be > 0"));
    }
    if momentum < S::zero() || momentum >= S::one() {
        return Err(Error::param("sgd_momentum_step", "momentum must be in [0, 1)"));
    }
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::dim(
            "sgd_momentum_step",
            format!(
                "param/grad/velocity lengths {}/{}/{} differ",
                param.len(),
                grad.len(),
                velocity.len()
            ),
        ));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad.iter()).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + l2 * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum-SGD state over a named parameter collection. Velocities are
/// created lazily (zero) per parameter name and kept across steps.
#[derive(Debug, Clone)]
pub struct SgdMomentum<S: Scalar = f32> {
    pub lr: S,
    pub momentum: S,
    pub velocities: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(lr: S, momentum: S) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocities: IndexMap::new(),
        }
    }

    /// Applies one step to `param`; `l2` is the decoupled weight penalty for
    /// this specific tensor (zero for biases and batch-norm parameters).
    pub fn step(&mut self, name: &str, param: &mut Tensor<S>, grad: &[S], l2: S) -> Result<()> {
        let v = self
            .velocities
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(&param.shape));
        sgd_momentum_step(&mut param.data, grad, &mut v.data, self.lr, self.momentum, l2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_without_momentum() {
        let mut p = [1.0f32];
        let mut v = [0.0f32];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p[0], 0.9);
    }

    #[test]
    fn momentum_recurrence_by_hand() {
        // lr=1, momentum=0.9, constant grad 1 from param 0:
        // v1=1, p=-1; v2=1.9, p=-2.9
        let mut p = [0.0f32];
        let mut v = [0.0f32];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 1.0, 0.9, 0.0).unwrap();
        assert_eq!(p[0], -1.0);
        sgd_momentum_step(&mut p, &[1.0], &mut v, 1.0, 0.9, 0.0).unwrap();
        assert!((p[0] - (-2.9)).abs() < 1e-6);
    }

    #[test]
    fn l2_acts_as_gradient_contribution() {
        // l2=1e-4, grad=0, param=1, lr=0.01 -> param = 1 - 0.01*1e-4 = 0.999999
        let mut p = [1.0f32];
        let mut v = [0.0f32];
        sgd_momentum_step(&mut p, &[0.0], &mut v, 0.01, 0.0, 1e-4).unwrap();
        assert!((p[0] - 0.999_999).abs() < 1e-9);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        let mut p = [0.0f32];
        let mut v = [0.0f32];
        assert!(sgd_momentum_step(&mut p, &[0.0], &mut v, 0.0, 0.0, 0.0).is_err());
        assert!(sgd_momentum_step(&mut p, &[0.0], &mut v, 0.1, 1.0, 0.0).is_err());
    }
}
