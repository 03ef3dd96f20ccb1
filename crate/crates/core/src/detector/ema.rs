use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// `beta * m + (1 - beta) * clean_mean`
pub fn ema_update(m: &[f64], clean_mean: &[f64], beta: f64) -> Result<Vec<f64>> {
    if m.len() != clean_mean.len() {
        return Err(Error::ShapeMismatch);
    }
    Ok(m.iter().zip(clean_mean).map(|(a, b)| beta * a + (1.0 - beta) * b).collect())
}

/// Per-stage activation and gradient references, zero-initialised.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub beta_h: f64,
    pub beta_g: f64,
    /// Indexed by zero-based stage.
    pub act: Vec<Vec<f64>>,
    pub grad: Vec<Vec<f64>>,
}

impl EmaState {
    /// `dims[s]` is the feature width of the signal leaving stage `s + 1`
    /// (activation) and entering it (gradient).
    pub fn new(act_dims: &[usize], grad_dims: &[usize], beta_h: f64, beta_g: f64) -> Self {
        Self {
            beta_h,
            beta_g,
            act: act_dims.iter().map(|&n| vec![0.0; n]).collect(),
            grad: grad_dims.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update_act(&mut self, stage: usize, clean_mean: &[f64]) -> Result<()> {
        self.act[stage - 1] = ema_update(&self.act[stage - 1], clean_mean, self.beta_h)?;
        Ok(())
    }

    pub fn update_grad(&mut self, stage: usize, clean_mean: &[f64]) -> Result<()> {
        self.grad[stage - 1] = ema_update(&self.grad[stage - 1], clean_mean, self.beta_g)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let out = ema_update(&[0.0, 0.0], &[1.0, 1.0], 0.9).unwrap();
        assert!((out[0] - 0.1).abs() < 1e-15 && (out[1] - 0.1).abs() < 1e-15);
        assert_eq!(ema_update(&[3.0, -1.0], &[0.5, 2.0], 0.0).unwrap(), vec![0.5, 2.0]);
        let fixed = ema_update(&[0.25, 4.0], &[0.25, 4.0], 0.8).unwrap();
        assert!((fixed[0] - 0.25).abs() < 1e-15 && (fixed[1] - 4.0).abs() < 1e-15);
        assert_eq!(ema_update(&[0.0], &[1.0, 2.0], 0.5), Err(Error::ShapeMismatch));
    }
}
