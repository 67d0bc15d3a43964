use crate::autodiff::{Matrix, ParamStore};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients currently in `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            let name = params
                .iter()
                .nth(self.m.len().min(params.len().saturating_sub(1)))
                .map_or_else(String::new, |(_, p)| p.name.clone());
            return Err(Error::MissingGradient(name));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.grad.shape() != p.value.shape() || m.shape() != p.value.shape() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
            let values = p.value.data_mut();
            for (((theta, &g), m), v) in values.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.5,
            patience: 10,
            min_lr: 1e-5,
        }
    }
}

/// Minimum drop in validation loss that counts as an improvement.
pub const PLATEAU_THRESHOLD: f64 = 1e-4;

/// Multiplies the learning rate by `factor` once validation loss has failed
/// to improve for `patience` consecutive epochs, never going below `min_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    config: SchedulerConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: SchedulerConfig) -> Self {
        PlateauScheduler {
            config,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - PLATEAU_THRESHOLD {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
