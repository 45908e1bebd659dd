use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::mlp::VelocityNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// First-order optimizer state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptState {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { n_params } else { 0 };
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
            step_count: 0,
        }
    }

    pub fn sgd(lr: f64, n_params: usize) -> Self {
        Self::new(OptimizerKind::Sgd, lr, n_params)
    }

    pub fn adam(lr: f64, n_params: usize) -> Self {
        Self::new(OptimizerKind::Adam, lr, n_params)
    }

    /// Updates `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { what: "gradient", index: i });
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    return Err(Error::shape("Adam state does not match the parameter count"));
                }
                let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
                for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps_adam);
                }
            }
        }
        Ok(())
    }
}

/// Applies one optimizer step to the net's parameters.
pub fn opt_step(state: &mut OptState, net: &mut VelocityNet, grads: &[f64]) -> Result<()> {
    let mut p = net.params();
    state.update(&mut p, grads)?;
    net.set_params(&p)?;
    debug_assert!(net.params_finite(), "non-finite parameters after optimizer step");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut s = OptState::sgd(0.1, 1);
        let mut p = [0.0];
        s.update(&mut p, &[1.0]).unwrap();
        assert_eq!(p, [-0.1]);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut s = OptState::adam(0.01, 1);
        let mut p = [0.0];
        s.update(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut s = OptState::new(kind, 0.5, 3);
            let mut p = [1.0, -2.0, 3.0];
            for _ in 0..5 {
                s.update(&mut p, &[0.0; 3]).unwrap();
            }
            assert_eq!(p, [1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut s = OptState::adam(0.1, 2);
        let mut p = [0.0, 0.0];
        assert!(s.update(&mut p, &[f64::NAN, 0.0]).is_err());
        assert!(s.update(&mut p, &[0.0]).is_err());
    }
}
