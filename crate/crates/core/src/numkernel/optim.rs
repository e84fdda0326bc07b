use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    state: AdamState,
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
            state: AdamState::default(),
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Applies one update. Parameters without a gradient entry are treated
    /// as having a zero gradient (they still decay).
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.state.first.is_empty() {
            self.state.first = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            self.state.second = self.state.first.clone();
        } else if self.state.first.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer state tracks {} tensors, store has {}",
                self.state.first.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in parameter {}", params.name(id))));
            }
        }

        self.state.step += 1;
        let (b1, b2) = self.betas;
        let t = self.state.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;

        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let m = &mut self.state.first[id.index()];
            let v = &mut self.state.second[id.index()];
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                p[i] *= decay;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
