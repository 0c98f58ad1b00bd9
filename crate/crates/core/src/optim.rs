//! Stochastic gradient descent with momentum.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Heavy-ball SGD: `v ← momentum·v − lr·g`, `p ← p + v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    lr: f64,
    momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Updates `params` in place. Velocities start at zero on the first call.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(shape_err("parameter count changed between steps"));
        }
        let lr = T::from_f64_lossy(self.lr);
        let mu = T::from_f64_lossy(self.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(shape_err(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv - lr * gv;
                *pv = *pv + *vv;
            }
        }
        Ok(())
    }
}

/// One momentum step on a single tensor with an explicit velocity.
pub fn sgd_momentum_step<T: Scalar>(
    param: &mut Tensor<T>,
    velocity: &mut Tensor<T>,
    grad: &Tensor<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut opt = SgdMomentum::new(lr, momentum)?;
    opt.velocity = vec![velocity.clone()];
    opt.step(&mut [param], &[grad])?;
    *velocity = opt.velocity.pop().expect("one velocity");
    Ok(())
}
