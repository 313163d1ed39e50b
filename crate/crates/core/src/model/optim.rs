use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plain SGD with optional heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl SgdConfig {
    pub fn plain(lr: f32) -> Self {
        SgdConfig {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    /// Applies one update at learning rate `lr`.
    ///
    /// Rejects a non-finite loss or gradient before touching `params`.
    pub fn step(&mut self, params: &mut [f32], loss: f32, grad: &[f32], lr: f32) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::numerical(format!("non-finite training loss {loss}")));
        }
        if grad.len() != params.len() {
            return Err(Error::input(format!(
                "gradient has {} entries for {} parameters",
                grad.len(),
                params.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::numerical(format!("non-finite gradient at parameter {i}")));
        }
        let SgdConfig {
            momentum, weight_decay, ..
        } = self.config;
        if momentum == 0.0 {
            for (p, &g) in params.iter_mut().zip(grad) {
                *p -= lr * (g + weight_decay * *p);
            }
            return Ok(());
        }
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(self.velocity.iter_mut()) {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
        Ok(())
    }

    pub fn velocity(&self) -> &[f32] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<f32>) {
        self.velocity = velocity;
    }
}
