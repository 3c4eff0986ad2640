use crate::detector::ParamStore;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v = m v + g; p -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Gradients with a larger global L2 norm are rescaled to it; 0 disables.
    pub clip: f64,
    velocity: Vec<(String, Vec<f64>)>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip: f64) -> Self {
        Self {
            lr,
            momentum,
            clip,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. `grads` holds entries for the trainable subset of
    /// `params`, by name.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Vec<f64>)]) -> Result<()> {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        for (name, grad) in grads {
            if !self.velocity.iter().any(|(n, _)| n == name) {
                self.velocity.push((name.clone(), vec![0.0; grad.len()]));
            }
        }
        for (name, t) in params.iter_mut() {
            let Some((_, grad)) = grads.iter().find(|(n, _)| n == name) else {
                continue;
            };
            if grad.len() != t.numel() {
                return Err(Error::ModelMismatch(format!(
                    "gradient for {name} has {} entries, parameter {}",
                    grad.len(),
                    t.numel()
                )));
            }
            let (_, v) = self
                .velocity
                .iter_mut()
                .find(|(n, _)| n == name)
                .expect("velocity slot created above");
            for ((p, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vi = self.momentum * *vi + gi * scale;
                *p -= self.lr * *vi;
            }
        }
        Ok(())
    }
}
