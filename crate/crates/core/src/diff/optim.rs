use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor in place and clears its gradient.
    ///
    /// The parameter list must keep the same order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], learning_rate: f64) -> Result<()> {
        if let Some(i) = params
            .iter()
            .position(|p| p.requires_grad() && p.grad().is_none())
        {
            return Err(Error::Invalid(format!(
                "parameter {i} (shape {:?}) has no gradient",
                params[i].shape()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::Invalid(
                "optimizer state does not match the parameter list".into(),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let g = p.take_grad().expect("checked above");
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, x) in p.values_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
