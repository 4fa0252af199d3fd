use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};
use crate::numerics::Gradients;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let mut updates: Vec<(usize, &[f64])> = grads
            .params()
            .filter(|&(k, _)| store.is_trainable(ParamId(k)))
            .collect();
        updates.sort_unstable_by_key(|&(k, _)| k);
        if let Some((k, _)) = updates.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Degenerate(format!(
                "non-finite gradient for {}",
                store.name(ParamId(*k))
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, g) in updates {
            let (m, v) = self
                .moments
                .entry(k)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let w = store.get_mut(ParamId(k)).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
