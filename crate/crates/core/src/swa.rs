//! Stochastic weight averaging over snapshots taken every `c` steps from step `m`.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ParamSet;

/// True iff `step >= m` and `(step - m) % c == 0`.
pub fn should_sample(step: usize, m: usize, c: usize) -> bool {
    c > 0 && step >= m && (step - m) % c == 0
}

#[derive(Debug, Clone)]
pub struct SwaState {
    running_sum: ParamSet,
    snapshots: usize,
    m: usize,
    c: usize,
    n_total: usize,
}

impl SwaState {
    /// `template` fixes the parameter layout; its values are ignored.
    pub fn new(template: &ParamSet, m: usize, c: usize, n_total: usize) -> Result<Self> {
        if c == 0 {
            return Err(Error::config("swa.c", "cycle length must be >= 1"));
        }
        if m >= n_total {
            return Err(Error::config(
                "swa.m",
                format!("first sample step {m} is past the last step {}", n_total.saturating_sub(1)),
            ));
        }
        let zeros = template
            .iter()
            .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        Ok(Self {
            running_sum: ParamSet::new(zeros),
            snapshots: 0,
            m,
            c,
            n_total,
        })
    }

    /// One snapshot at the last step of every epoch.
    pub fn epoch_end(template: &ParamSet, steps_per_epoch: usize, epochs: usize) -> Result<Self> {
        if steps_per_epoch == 0 || epochs == 0 {
            return Err(Error::config("swa", "needs at least one step and one epoch"));
        }
        Self::new(template, steps_per_epoch - 1, steps_per_epoch, steps_per_epoch * epochs)
    }

    pub fn snapshot_count(&self) -> usize {
        self.snapshots
    }

    pub fn schedule(&self) -> (usize, usize, usize) {
        (self.m, self.c, self.n_total)
    }

    /// Adds `weights` if `step` is on the sampling grid; returns whether it did.
    pub fn observe(&mut self, step: usize, weights: &ParamSet) -> Result<bool> {
        if step < self.n_total && should_sample(step, self.m, self.c) {
            self.update(weights)?;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn update(&mut self, weights: &ParamSet) -> Result<()> {
        if !self.running_sum.same_layout(weights) {
            return Err(Error::dim("swa_update", "snapshot layout differs from the accumulator"));
        }
        for (acc, (_, w)) in self.running_sum.tensors_mut().zip(weights.iter()) {
            for (a, b) in acc.data_mut().iter_mut().zip(w.data()) {
                *a += b;
            }
        }
        self.snapshots += 1;
        Ok(())
    }

    /// `running_sum / snapshot_count`.
    pub fn weights(&self) -> Result<ParamSet> {
        if self.snapshots == 0 {
            return Err(Error::EmptySwa);
        }
        let k = self.snapshots as f64;
        let mut avg = self.running_sum.clone();
        for t in avg.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v /= k);
        }
        Ok(avg)
    }
}
