//! SGD and Adam on flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OptimizerState {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
        step_count: u64,
        first_moment: Vec<f64>,
        second_moment: Vec<f64>,
    },
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> Self {
        OptimizerState::Sgd { lr }
    }

    /// Adam with the configured betas; moments are sized lazily on the
    /// first step.
    pub fn adam(lr: f64, b1: f64, b2: f64) -> Self {
        OptimizerState::Adam {
            lr,
            b1,
            b2,
            eps: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "params len {} != grads len {}",
                params.len(),
                grads.len()
            )));
        }
        match self {
            OptimizerState::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= *lr * g;
                }
            }
            OptimizerState::Adam {
                lr,
                b1,
                b2,
                eps,
                step_count,
                first_moment,
                second_moment,
            } => {
                if first_moment.is_empty() {
                    first_moment.resize(params.len(), 0.0);
                    second_moment.resize(params.len(), 0.0);
                } else if first_moment.len() != params.len() {
                    return Err(Error::Shape("adam moments sized for different params".into()));
                }
                *step_count += 1;
                let t = *step_count as i32;
                let bc1 = 1.0 - b1.powi(t);
                let bc2 = 1.0 - b2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    first_moment[i] = *b1 * first_moment[i] + (1.0 - *b1) * g;
                    second_moment[i] = *b2 * second_moment[i] + (1.0 - *b2) * g * g;
                    let m_hat = first_moment[i] / bc1;
                    let v_hat = second_moment[i] / bc2;
                    params[i] -= *lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_exact_arithmetic() {
        let mut p = [1.0];
        OptimizerState::sgd(0.1).step(&mut p, &[2.0]).unwrap();
        assert_eq!(p, [0.8]);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = [1.5, -0.5];
        let orig = p;
        OptimizerState::sgd(0.1).step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, orig);
        let mut adam = OptimizerState::adam(0.01, 0.9, 0.999);
        adam.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn adam_first_step_hand_computed() {
        // First step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        let g = 3.0f64;
        let lr = 0.01;
        let mut p = [1.0];
        let mut adam = OptimizerState::adam(lr, 0.9, 0.999);
        adam.step(&mut p, &[g]).unwrap();
        let expect = 1.0 - lr * g / (g.abs() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
        // Update magnitude is ~lr in the sign(g) direction.
        assert!((1.0 - p[0] - lr).abs() < 1e-8);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut p = [0.0; 2];
        assert!(OptimizerState::sgd(0.1).step(&mut p, &[1.0]).is_err());
    }
}
