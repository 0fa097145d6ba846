//! Synchronous momentum SGD with weight decay.
//!
//! Every rank runs this update over the *aggregated* gradient, so as long
//! as the collective hands all ranks bitwise-identical aggregates, the model
//! replicas never drift. The update, per element:
//!
//! ```text
//! v ← µ·v + (g + λ·w)
//! w ← w − lr(k)·v
//! ```
//!
//! with momentum µ, weight decay λ, and a learning-rate schedule `lr(k)`
//! evaluated at the 0-based count of updates applied so far.

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrPolicy {
    /// `lr(k) = lr0` forever.
    Constant,
    /// Polynomial decay to zero: `lr(k) = lr0 · (1 − k/max)^power`.
    /// After `max` updates the rate stays at zero.
    Poly { power: f64, max_updates: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub policy: LrPolicy,
}

impl Default for SsgdConfig {
    fn default() -> Self {
        SsgdConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.001,
            policy: LrPolicy::Constant,
        }
    }
}

impl SsgdConfig {
    /// The rate used for the `k`-th update, 0-based.
    pub fn learning_rate(&self, k: u64) -> f64 {
        match self.policy {
            LrPolicy::Constant => self.lr0,
            LrPolicy::Poly { power, max_updates } => {
                if k >= max_updates {
                    0.0
                } else {
                    let frac = 1.0 - k as f64 / max_updates as f64;
                    self.lr0 * frac.powf(power)
                }
            }
        }
    }
}

/// Optimizer state: velocity per element plus the update counter.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    config: SsgdConfig,
    velocity: Vec<f64>,
    updates_applied: u64,
}

impl SgdOptimizer {
    pub fn new(config: SsgdConfig, elements: usize) -> Self {
        SgdOptimizer {
            config,
            velocity: vec![0.0; elements],
            updates_applied: 0,
        }
    }

    pub fn updates_applied(&self) -> u64 {
        self.updates_applied
    }

    /// The rate the *next* `step` call will use.
    pub fn next_learning_rate(&self) -> f64 {
        self.config.learning_rate(self.updates_applied)
    }

    /// Apply one update in place.
    pub fn step(&mut self, weights: &mut [f64], gradient: &[f64]) {
        assert_eq!(weights.len(), self.velocity.len());
        assert_eq!(gradient.len(), self.velocity.len());
        let lr = self.config.learning_rate(self.updates_applied);
        let mu = self.config.momentum;
        let lambda = self.config.weight_decay;
        for ((w, v), g) in weights.iter_mut().zip(&mut self.velocity).zip(gradient) {
            *v = mu * *v + (*g + lambda * *w);
            *w -= lr * *v;
        }
        self.updates_applied += 1;
    }
}
