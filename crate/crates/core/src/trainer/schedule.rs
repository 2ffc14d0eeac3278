use serde::{Deserialize, Serialize};

/// Outcome of feeding one epoch's validation loss to the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    pub improved: bool,
    pub lr_reduced: bool,
    pub stop: bool,
}

/// Reduce-on-plateau learning-rate rule combined with early stopping.
///
/// Improvement is strict (`loss < best`). Any improvement resets both
/// counters; a reduction also resets the reduction counter. NaN losses never
/// count as improvements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    stop_patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    since_improvement: usize,
    since_reduction: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64, stop_patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_lr,
            stop_patience,
            best: f64::INFINITY,
            best_epoch: None,
            since_improvement: 0,
            since_reduction: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.since_improvement
    }

    pub fn step(&mut self, epoch: usize, val_loss: f64) -> Step {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
            self.since_reduction = 0;
            return Step {
                improved: true,
                lr_reduced: false,
                stop: false,
            };
        }
        self.since_improvement += 1;
        self.since_reduction += 1;
        let mut lr_reduced = false;
        if self.since_reduction >= self.patience {
            self.since_reduction = 0;
            let mut next = self.lr * self.factor;
            // snap to the floor instead of landing a rounding error above it
            if next <= self.min_lr * (1.0 + 1e-9) {
                next = self.min_lr;
            }
            if next < self.lr {
                self.lr = next;
                lr_reduced = true;
            }
        }
        Step {
            improved: false,
            lr_reduced,
            stop: self.since_improvement >= self.stop_patience,
        }
    }
}
