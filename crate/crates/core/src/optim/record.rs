use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    EarlyStopped,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Completed => "completed",
            RunStatus::EarlyStopped => "early-stopped",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

/// Per-epoch history of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    epochs: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    pub status: RunStatus,
}

impl Default for TrainRecord {
    fn default() -> Self {
        TrainRecord::new()
    }
}

impl TrainRecord {
    pub fn new() -> Self {
        TrainRecord {
            epochs: Vec::new(),
            best_epoch: None,
            status: RunStatus::Completed,
        }
    }

    /// Append an epoch; returns true if it is the new best.
    pub fn push(&mut self, epoch: EpochRecord) -> bool {
        let better = match self.best_epoch {
            None => epoch.val_loss.is_finite(),
            Some(b) => epoch.val_loss < self.epochs[b].val_loss,
        };
        self.epochs.push(epoch);
        if better {
            self.best_epoch = Some(self.epochs.len() - 1);
        }
        better
    }

    pub fn epochs(&self) -> &[EpochRecord] {
        &self.epochs
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    /// Best validation loss, or NaN when nothing finite was recorded.
    pub fn best_val_loss(&self) -> f64 {
        self.best_epoch.map_or(f64::NAN, |b| self.epochs[b].val_loss)
    }

    pub fn val_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    pub fn wall_secs(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_secs).sum()
    }
}
