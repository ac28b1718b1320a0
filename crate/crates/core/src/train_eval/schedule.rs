//! Reduce-on-plateau learning rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Starts at `initial` and multiplies by `factor` (clamped at `floor`) every
/// time the watched loss fails to improve for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub floor: f64,
    pub factor: f64,
    pub patience: usize,
    #[serde(skip)]
    state: State,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct State {
    current: Option<f64>,
    best: Option<f64>,
    stale_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 1e-3,
            floor: 1e-4,
            factor: 0.1,
            patience: 10,
            state: State::default(),
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.floor > 0.0 && self.floor <= self.initial) {
            return Err(Error::Parameter(format!(
                "learning rate bounds invalid: initial {} floor {}",
                self.initial, self.floor
            )));
        }
        if !(0.0 < self.factor && self.factor < 1.0) {
            return Err(Error::Parameter(format!("lr factor {} outside (0, 1)", self.factor)));
        }
        if self.patience == 0 {
            return Err(Error::Parameter("lr patience must be >= 1".into()));
        }
        Ok(())
    }

    /// The rate to use for the next epoch.
    pub fn current(&self) -> f64 {
        self.state.current.unwrap_or(self.initial)
    }

    /// Feeds one epoch's watched loss; returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        let current = self.current();
        let improved = self.state.best.map_or(true, |b| loss < b);
        if improved {
            self.state.best = Some(loss);
            self.state.stale_epochs = 0;
        } else {
            self.state.stale_epochs += 1;
            if self.state.stale_epochs >= self.patience {
                self.state.current = Some((current * self.factor).max(self.floor));
                self.state.stale_epochs = 0;
            }
        }
        self.current()
    }
}
