//! Evolving-loss schedule: learning rate and loss depth advance together when
//! the validation loss plateaus.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub lr: f64,
    pub depth: u32,
}

impl Stage {
    pub const fn new(lr: f64, depth: u32) -> Self {
        Self { lr, depth }
    }
}

pub const DEFAULT_STAGES: [Stage; 3] = [Stage::new(1e-3, 0), Stage::new(1e-4, 10), Stage::new(1e-5, 20)];
pub const FOURTH_STAGE: Stage = Stage::new(1e-6, 30);
pub const DEFAULT_PATIENCE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolveSchedule {
    pub stages: Vec<Stage>,
    /// Epochs without validation improvement before advancing.
    pub patience: usize,
    /// Relative decrease below the best loss that counts as improvement.
    #[serde(default)]
    pub min_delta: f64,
}

impl Default for EvolveSchedule {
    fn default() -> Self {
        Self {
            stages: DEFAULT_STAGES.to_vec(),
            patience: DEFAULT_PATIENCE,
            min_delta: 0.0,
        }
    }
}

impl EvolveSchedule {
    pub fn new(stages: Vec<Stage>, patience: usize) -> Result<Self> {
        let s = Self {
            stages,
            patience,
            min_delta: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    /// The default stages followed by `(1e-6, 30)`.
    pub fn four_stage() -> Self {
        let mut s = Self::default();
        s.stages.push(FOURTH_STAGE);
        s
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.stages.is_empty(),
            Error::InvalidArgument("schedule needs at least one stage".into())
        );
        ensure!(
            self.patience >= 1,
            Error::InvalidArgument("plateau patience must be at least 1".into())
        );
        ensure!(
            (0.0..1.0).contains(&self.min_delta),
            Error::InvalidArgument(format!("min_delta {} outside [0, 1)", self.min_delta))
        );
        ensure!(
            self.stages.iter().all(|s| s.lr.is_finite() && s.lr > 0.0),
            Error::InvalidArgument("learning rates must be positive".into())
        );
        for w in self.stages.windows(2) {
            ensure!(
                w[1].lr < w[0].lr,
                Error::InvalidArgument(format!("learning rate {} does not decrease to {}", w[0].lr, w[1].lr))
            );
            ensure!(
                w[1].depth >= w[0].depth,
                Error::InvalidArgument(format!("depth {} decreases to {}", w[0].depth, w[1].depth))
            );
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transition {
    Stay,
    /// Moved to the stage with this index.
    Advanced(usize),
    /// Plateaued in the final stage.
    Exhausted,
}

/// Plateau detector and stage cursor.
#[derive(Clone, Debug)]
pub struct ScheduleState {
    schedule: EvolveSchedule,
    stage: usize,
    best: f64,
    since_best: usize,
}

impl ScheduleState {
    pub fn new(schedule: EvolveSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            schedule,
            stage: 0,
            best: f64::INFINITY,
            since_best: 0,
        })
    }

    pub fn stage_index(&self) -> usize {
        self.stage
    }

    pub fn current(&self) -> Stage {
        self.schedule.stages[self.stage]
    }

    pub fn is_final(&self) -> bool {
        self.stage + 1 == self.schedule.stages.len()
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Restarts plateau tracking from `loss`, used after a depth change since
    /// losses at different depths are not comparable.
    pub fn set_baseline(&mut self, loss: f64) {
        self.best = loss;
        self.since_best = 0;
    }

    /// Feeds one epoch's validation loss.
    pub fn observe(&mut self, val_loss: f64) -> Transition {
        if val_loss < self.best * (1.0 - self.schedule.min_delta) {
            self.best = val_loss;
            self.since_best = 0;
            return Transition::Stay;
        }
        self.since_best += 1;
        if self.since_best < self.schedule.patience {
            return Transition::Stay;
        }
        if self.is_final() {
            self.since_best = 0;
            return Transition::Exhausted;
        }
        self.stage += 1;
        self.best = f64::INFINITY;
        self.since_best = 0;
        Transition::Advanced(self.stage)
    }
}
