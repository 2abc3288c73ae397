use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Minibatch SGD with step learning-rate decay.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Heavy-ball coefficient; 0 is plain SGD.
    pub momentum: f64,
}

impl Default for SgdConfig {
    /// Operating point for fine-tuning a pretrained backbone: 3e-5 decayed
    /// by 0.1 every 20 epochs, batch 4, 40 epochs.
    fn default() -> Self {
        SgdConfig {
            initial_lr: 3e-5,
            decay_factor: 0.1,
            decay_every_epochs: 20,
            batch_size: 4,
            epochs: 40,
            momentum: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::invalid(format!("initial_lr must be > 0, got {}", self.initial_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_every_epochs == 0 {
            return Err(Error::invalid("decay_every_epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// `initial_lr * decay_factor ^ floor(epoch / decay_every_epochs)`
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.decay_every_epochs.max(1)) as i32;
        self.initial_lr * libm::pow(self.decay_factor, f64::from(steps))
    }
}

/// `value -= lr(epoch) * grad` for every parameter. Gradients are left in
/// place.
pub fn sgd_step(store: &mut ParamStore, epoch: usize, config: &SgdConfig) -> Result<()> {
    if let Some(bad) = store.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFiniteValue {
            what: format!("gradient of {}", bad.name()),
        });
    }
    let lr = config.learning_rate(epoch);
    for p in store.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
    }
    Ok(())
}

/// SGD with optional momentum: `v = momentum * v + grad`, then
/// `value -= lr(epoch) * v`. With zero momentum a step equals [`sgd_step`].
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Sgd::default()
    }

    pub fn step(&mut self, store: &mut ParamStore, epoch: usize, config: &SgdConfig) -> Result<()> {
        if config.momentum == 0.0 {
            return sgd_step(store, epoch, config);
        }
        if let Some(bad) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteValue {
                what: format!("gradient of {}", bad.name()),
            });
        }
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        let lr = config.learning_rate(epoch);
        for (p, vel) in store.iter_mut().zip(&mut self.velocity) {
            for ((w, g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(vel.iter_mut()) {
                *v = config.momentum * *v + g;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn single_step() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(alloc::vec![1.0])).unwrap();
        store.get_mut(w).grad = Tensor::from_vec(alloc::vec![0.5]);
        let cfg = SgdConfig {
            initial_lr: 0.1,
            ..SgdConfig::default()
        };
        sgd_step(&mut store, 0, &cfg).unwrap();
        assert!((store.value(w).data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.learning_rate(0), 3e-5);
        assert_eq!(cfg.learning_rate(19), 3e-5);
        assert!((cfg.learning_rate(20) - 3e-6).abs() < 1e-20);
        assert!((cfg.learning_rate(39) - 3e-6).abs() < 1e-20);
        assert!((cfg.learning_rate(40) - 3e-7).abs() < 1e-21);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            SgdConfig { initial_lr: 0.0, ..SgdConfig::default() },
            SgdConfig { decay_factor: 0.0, ..SgdConfig::default() },
            SgdConfig { decay_factor: 1.5, ..SgdConfig::default() },
            SgdConfig { decay_every_epochs: 0, ..SgdConfig::default() },
            SgdConfig { momentum: 1.0, ..SgdConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(SgdConfig::default().validate().is_ok());
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(alloc::vec![1.0])).unwrap();
        store.get_mut(w).grad = Tensor::from_vec(alloc::vec![f64::NAN]);
        assert!(sgd_step(&mut store, 0, &SgdConfig::default()).is_err());
        assert_eq!(store.value(w).data(), &[1.0]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(alloc::vec![1.0])).unwrap();
        let cfg = SgdConfig {
            initial_lr: 0.1,
            momentum: 0.5,
            ..SgdConfig::default()
        };
        let mut sgd = Sgd::new();
        store.get_mut(w).grad = Tensor::from_vec(alloc::vec![1.0]);
        sgd.step(&mut store, 0, &cfg).unwrap();
        sgd.step(&mut store, 0, &cfg).unwrap();
        // steps 0.1 * 1 and 0.1 * 1.5
        assert!((store.value(w).data()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_matches_plain_step() {
        let mut a = ParamStore::new();
        let w = a.add("w", Tensor::from_vec(alloc::vec![1.0, -2.0])).unwrap();
        a.get_mut(w).grad = Tensor::from_vec(alloc::vec![0.3, 0.7]);
        let mut b = a.clone();
        let cfg = SgdConfig { initial_lr: 0.2, ..SgdConfig::default() };
        sgd_step(&mut a, 0, &cfg).unwrap();
        Sgd::new().step(&mut b, 0, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
