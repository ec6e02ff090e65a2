use serde::{Deserialize, Serialize};

/// Learning-rate schedule, evaluated per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear warm-up from `max_lr / start_div` to `max_lr` over the first
    /// `warm_fraction` of each cycle, then cosine annealing down to
    /// `max_lr / end_div`. The cycle repeats every `cycle_epochs` epochs.
    OneCycle {
        max_lr: f64,
        cycle_epochs: usize,
        warm_fraction: f64,
        start_div: f64,
        end_div: f64,
    },
}

impl LrSchedule {
    pub fn one_cycle(max_lr: f64, cycle_epochs: usize) -> Self {
        LrSchedule::OneCycle {
            max_lr,
            cycle_epochs,
            warm_fraction: 0.3,
            start_div: 25.0,
            end_div: 2500.0,
        }
    }

    pub fn max_lr(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::OneCycle { max_lr, .. } => max_lr,
        }
    }

    /// Learning rate for zero-based `step` counted from the start of the stage.
    pub fn lr_at(&self, step: u64, steps_per_epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::OneCycle {
                max_lr,
                cycle_epochs,
                warm_fraction,
                start_div,
                end_div,
            } => {
                let cycle = (cycle_epochs.max(1) * steps_per_epoch.max(1)) as u64;
                let pos = (step % cycle) as f64 / cycle as f64;
                let start = max_lr / start_div;
                let end = max_lr / end_div;
                if pos <= warm_fraction {
                    start + (max_lr - start) * (pos / warm_fraction)
                } else {
                    let frac = (pos - warm_fraction) / (1.0 - warm_fraction);
                    end + (max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStoppingConfig {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStoppingConfig {
    fn default() -> Self {
        Self {
            patience: 3,
            min_delta: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best validation loss; an evaluation counts as an improvement
/// only if it beats the best by more than `min_delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub config: EarlyStoppingConfig,
    pub best: Option<f64>,
    pub best_index: Option<usize>,
    pub bad_evals: usize,
    evals: usize,
}

impl EarlyStopping {
    pub fn new(config: EarlyStoppingConfig) -> Self {
        Self {
            config,
            best: None,
            best_index: None,
            bad_evals: 0,
            evals: 0,
        }
    }

    /// Returns whether this evaluation became the new best, and the decision.
    pub fn update(&mut self, val_loss: f64) -> (bool, StopDecision) {
        let index = self.evals;
        self.evals += 1;
        let improved = match self.best {
            None => val_loss.is_finite(),
            Some(b) => val_loss < b - self.config.min_delta,
        };
        if improved {
            self.best = Some(val_loss);
            self.best_index = Some(index);
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
        }
        let stop = if self.bad_evals >= self.config.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        (improved, stop)
    }
}
