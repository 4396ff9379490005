//! RMSprop: `a ← ρa + (1−ρ)g²`, `p ← p − lr·g/(√a + ε)`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

pub const DEFAULT_LR: f64 = 3e-4;
pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rmsprop {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    acc: Vec<Vec<f64>>,
}

impl Default for Rmsprop {
    fn default() -> Self {
        Self::new(DEFAULT_LR, DEFAULT_DECAY, DEFAULT_EPS).unwrap()
    }
}

impl Rmsprop {
    pub fn new(lr: f64, decay: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && (0.0..1.0).contains(&decay) && eps >= 0.0) {
            return Err(Error::InvalidArgument(format!("rmsprop needs lr > 0, decay in [0, 1), eps >= 0; got {lr}, {decay}, {eps}")));
        }
        Ok(Self { lr, decay, eps, acc: Vec::new() })
    }

    /// Squared-gradient accumulators, one per parameter tensor (empty before
    /// the first step).
    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.acc
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
        }
        if self.acc.is_empty() {
            self.acc = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.acc.len() != params.len() || self.acc.iter().zip(params.iter()).any(|(a, p)| a.len() != p.len()) {
            return Err(Error::Shape("optimizer state belongs to different parameters".into()));
        }
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.acc) {
            for ((p, g), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.iter_mut()) {
                *a = self.decay * *a + (1.0 - self.decay) * g * g;
                *p -= self.lr * g / (a.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
