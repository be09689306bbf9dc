use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

/// Adam with decoupled weight decay. Moments are kept in 64-bit.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    skipped: usize,
}

impl AdamW {
    pub fn new<F: Scalar>(store: &ParameterStore<F>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            skipped: 0,
        }
    }

    /// Applied updates so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates skipped because a gradient was not finite.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// One update with a learning rate per parameter. Missing gradients count
    /// as zero. Returns `false` (and leaves everything untouched) when any
    /// gradient is non-finite.
    pub fn step<F: Scalar>(
        &mut self,
        store: &mut ParameterStore<F>,
        grads: &[Option<Tensor<F>>],
        lrs: &[f64],
    ) -> Result<bool> {
        if grads.len() > store.len() || lrs.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::dim(
                "adamw_step",
                format!("{} params, {} grads, {} rates", store.len(), grads.len(), lrs.len()),
            ));
        }
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let grad = grads.get(k).and_then(Option::as_ref);
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g.data()[i].as_f64());
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let xv = x.as_f64();
                *x = F::from_f64(xv - lrs[k] * (update + self.weight_decay * xv));
            }
        }
        Ok(true)
    }
}
