//! Adam and the reduce-on-plateau learning-rate schedule.

use crate::error::{AutodiffError, Result};
use crate::param::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam optimizer state for one parameter store.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub learning_rate: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, learning_rate: f64) -> Self {
        Self::with_config(store, learning_rate, AdamConfig::default())
    }

    pub fn with_config(store: &ParamStore<T>, learning_rate: f64, config: AdamConfig) -> Self {
        let zeros = |s: &ParamStore<T>| s.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        Self { config, learning_rate, step: 0, m: zeros(store), v: zeros(store) }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's accumulated gradients and clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = T::lit(self.learning_rate / bc1);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(eps);
        {
            let (values, grads) = store.split_mut();
            for (((p, g), m), v) in values.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + one_b1 * g[i];
                    v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                    p[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
                }
            }
        }
        store.zero_grads();
    }

    /// Moment buffers as named tensors (`m.<name>`, `v.<name>`) plus the
    /// step counter and learning rate, for resumable checkpoints.
    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, name) in store.names().iter().enumerate() {
            out.push((format!("m.{name}"), self.m[i].clone()));
            out.push((format!("v.{name}"), self.v[i].clone()));
        }
        out.push(("step".into(), Tensor::scalar(T::lit(self.step as f64))));
        out.push(("lr".into(), Tensor::scalar(T::lit(self.learning_rate))));
        out
    }

    pub fn load_state_tensors<U: Real>(&mut self, store: &ParamStore<T>, tensors: &[(String, Tensor<U>)]) -> Result<()> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| AutodiffError::MissingTensor(vec![name.to_string()]))
        };
        for (i, name) in store.names().iter().enumerate() {
            self.m[i] = find(&format!("m.{name}"))?.cast();
            self.v[i] = find(&format!("v.{name}"))?.cast();
        }
        self.step = find("step")?.item().as_f64().round() as u64;
        self.learning_rate = find("lr")?.item().as_f64();
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` when the validation metric has
/// not improved for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: Option<f64>,
    best: f64,
    epochs_since_improvement: usize,
}

impl PlateauSchedule {
    pub fn new(factor: f64, patience: usize, min_lr: Option<f64>) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) || patience == 0 {
            return Err(AutodiffError::InvalidArgument(format!(
                "plateau schedule needs factor in (0,1) and patience >= 1, got {factor} / {patience}"
            )));
        }
        Ok(Self { factor, patience, min_lr, best: f64::INFINITY, epochs_since_improvement: 0 })
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.epochs_since_improvement
    }

    /// Reinstates state saved from `best` and `epochs_since_improvement`.
    pub fn restore(&mut self, best: f64, epochs_since_improvement: usize) {
        self.best = best;
        self.epochs_since_improvement = epochs_since_improvement;
    }

    /// Records one epoch's validation metric (lower is better). Returns
    /// `true` when the learning rate was reduced.
    pub fn observe(&mut self, metric: f64, learning_rate: &mut f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.epochs_since_improvement = 0;
            return false;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement < self.patience {
            return false;
        }
        self.epochs_since_improvement = 0;
        let mut lr = *learning_rate * self.factor;
        if let Some(min) = self.min_lr {
            lr = lr.max(min);
        }
        let changed = lr != *learning_rate;
        *learning_rate = lr;
        changed
    }
}
