use crate::error::{Error, Result};

/// A new loss must beat the best so far by more than this to count as progress.
pub const IMPROVEMENT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-5,
        }
    }
}

/// Online reduce-on-plateau controller.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig) -> Result<Self> {
        if !(config.factor > 0.0 && config.factor < 1.0) || config.patience == 0 || config.min_lr <= 0.0 {
            return Err(Error::Config(format!("bad plateau settings {config:?}")));
        }
        Ok(PlateauScheduler {
            config,
            best: f64::INFINITY,
            wait: 0,
        })
    }

    /// Feed one validation loss, returning the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - IMPROVEMENT || (self.best.is_infinite() && loss.is_finite()) {
            self.best = loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.config.patience {
            self.wait = 0;
            return (lr * self.config.factor).max(self.config.min_lr);
        }
        lr
    }
}

/// Replay a whole validation history from `lr`.
pub fn plateau_schedule(history: &[f64], lr: f64, config: PlateauConfig) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Contract("plateau schedule needs a nonempty history".into()));
    }
    let mut s = PlateauScheduler::new(config)?;
    Ok(history.iter().fold(lr, |lr, &l| s.observe(l, lr)))
}

/// Index of the last epoch that improved on everything before it.
pub fn last_improvement(history: &[f64]) -> Option<usize> {
    let mut best = f64::INFINITY;
    let mut at = None;
    for (i, &l) in history.iter().enumerate() {
        if l < best - IMPROVEMENT || (at.is_none() && l.is_finite()) {
            best = l;
            at = Some(i);
        }
    }
    at
}

/// True once the last `patience` epochs all failed to improve on the best so far.
pub fn early_stop(history: &[f64], patience: usize) -> Result<bool> {
    if patience == 0 {
        return Err(Error::Contract("patience must be at least 1".into()));
    }
    if history.len() <= patience {
        return Ok(false);
    }
    Ok(match last_improvement(history) {
        Some(i) => history.len() - 1 - i >= patience,
        None => true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plateau_examples() {
        let c = PlateauConfig::default();
        assert_eq!(plateau_schedule(&[1.0, 0.9, 0.8, 0.7, 0.6], 1e-3, c).unwrap(), 1e-3);
        assert_eq!(plateau_schedule(&[1.0; 4], 1e-3, c).unwrap(), 5e-4);
        assert_eq!(plateau_schedule(&[1.0; 3], 1e-3, c).unwrap(), 1e-3);
        assert_eq!(plateau_schedule(&[1.0; 7], 1e-3, c).unwrap(), 2.5e-4);
        assert_eq!(plateau_schedule(&[1.0; 400], 1e-3, c).unwrap(), 1e-5);
        assert!(plateau_schedule(&[], 1e-3, c).is_err());
        // Sub-threshold jitter is not progress.
        assert_eq!(
            plateau_schedule(&[1.0, 0.99995, 0.99993, 0.99991], 1e-3, c).unwrap(),
            5e-4
        );
    }

    #[test]
    fn early_stop_examples() {
        assert!(!early_stop(&[5.0, 4.0, 3.0, 2.0, 1.0], 2).unwrap());
        assert!(early_stop(&[5.0, 4.0, 1.0, 2.0, 3.0], 2).unwrap());
        assert!(!early_stop(&[5.0, 4.0, 1.0, 2.0], 2).unwrap());
        assert!(!early_stop(&[1.0, 1.0], 3).unwrap());
        assert!(early_stop(&[1.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn early_stop_is_monotone(
            base in prop::collection::vec(0.0f64..10.0, 1..30),
            tail in prop::collection::vec(0.0f64..1.0, 0..10),
            p in 1usize..6,
        ) {
            if early_stop(&base, p).unwrap() {
                let best = base.iter().cloned().fold(f64::INFINITY, f64::min);
                let mut h = base.clone();
                // Extensions that never beat the best.
                h.extend(tail.iter().map(|t| best + t));
                prop_assert!(early_stop(&h, p).unwrap());
            }
        }

        #[test]
        fn plateau_never_below_floor(h in prop::collection::vec(0.0f64..1.0, 1..60)) {
            let c = PlateauConfig::default();
            let lr = plateau_schedule(&h, 1e-3, c).unwrap();
            prop_assert!(lr >= c.min_lr && lr <= 1e-3);
        }
    }
}
