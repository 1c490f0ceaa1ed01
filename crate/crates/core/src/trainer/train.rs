//! The training driver: augmentation, Adam steps, per-epoch validation,
//! plateau-driven stage changes, logging and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::error::{ensure, Error, Result};
use crate::ftnmt::values;
use crate::mantis::Mantis;
use crate::pipeline::{augment, AugmentConfig, Batch, ChipPair};
use crate::substrate::autograd::{backward, no_grad, Var};
use crate::substrate::checkpoint::save_checkpoint;
use crate::trainer::loss::mantis_loss;
use crate::trainer::metrics::Confusion;
use crate::trainer::optim::{Adam, AdamConfig};
use crate::trainer::pareto::{pareto_front, CheckpointRecord};
use crate::trainer::schedule::{EvolveSchedule, ScheduleState, Stage, Transition, DEFAULT_PATIENCE, DEFAULT_STAGES};

pub const LOG_HEADER: &str = "epoch,stage,lr,depth,train_loss,val_loss,val_mcc,val_ftnmt,train_f1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stages: Vec<Stage>,
    pub patience: usize,
    /// Relative decrease that counts as validation improvement.
    pub min_delta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub threshold: f64,
    /// Depth of the validation ⟨FT⟩ recorded for Pareto selection; the current
    /// stage depth when unset.
    pub eval_depth: Option<u32>,
    /// Stop once a clean pass over the training set reaches this F1.
    pub target_train_f1: Option<f64>,
    /// Early stopping is not considered before this many epochs.
    pub min_epochs: usize,
    /// Early stopping is only considered in the final stage, once its
    /// validation loss has dropped below the level measured at the switch.
    pub stop_in_final_stage: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Delete dominated checkpoints when training ends.
    pub keep_pareto_only: bool,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: DEFAULT_STAGES.to_vec(),
            patience: DEFAULT_PATIENCE,
            min_delta: 0.0,
            epochs: 200,
            batch_size: 4,
            seed: 0,
            adam: AdamConfig::default(),
            threshold: 0.5,
            eval_depth: None,
            target_train_f1: None,
            min_epochs: 0,
            stop_in_final_stage: false,
            checkpoint_dir: None,
            keep_pareto_only: true,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> EvolveSchedule {
        EvolveSchedule {
            stages: self.stages.clone(),
            patience: self.patience,
            min_delta: self.min_delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        ensure!(
            self.epochs >= 1 && self.batch_size >= 1,
            Error::InvalidArgument("epochs and batch size must be at least 1".into())
        );
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            Error::InvalidArgument(format!("threshold {} outside (0, 1)", self.threshold))
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub depth: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mcc: f64,
    pub val_ftnmt: f64,
    /// F1 accumulated over the epoch's training batches.
    pub train_f1: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{},{:.8},{:.8},{:.6},{:.8},{:.6}",
            self.epoch,
            self.stage,
            self.lr,
            self.depth,
            self.train_loss,
            self.val_loss,
            self.val_mcc,
            self.val_ftnmt,
            self.train_f1
        )
    }
}

/// A stage change and the validation loss at the new depth right after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSwitch {
    pub epoch: usize,
    pub stage: usize,
    pub depth: u32,
    pub baseline_val_loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub records: Vec<CheckpointRecord>,
    pub switches: Vec<StageSwitch>,
    /// F1 of the clean training-set pass that ended training early.
    pub stopped_at_f1: Option<f64>,
}

impl TrainReport {
    pub fn pareto(&self) -> Result<Vec<CheckpointRecord>> {
        pareto_front(&self.records)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    /// Multitask loss at the stage depth.
    pub loss: f64,
    pub confusion: Confusion,
    /// Mean segmentation ⟨FT⟩ at the evaluation depth.
    pub ftnmt: f64,
}

/// Forward-only pass over `chips` in batches.
pub fn evaluate(
    model: &Mantis,
    chips: &[ChipPair],
    depth: u32,
    ft_depth: u32,
    threshold: f64,
    batch_size: usize,
) -> Result<EvalSummary> {
    ensure!(!chips.is_empty(), Error::Data("nothing to evaluate".into()));
    let parts: Vec<(f64, Confusion, f64)> = chips
        .par_chunks(batch_size.max(1))
        .map(|group| {
            let _g = no_grad();
            let refs: Vec<&ChipPair> = group.iter().collect();
            let batch = Batch::from_chips(&refs)?;
            let out = model.forward(&Var::constant(batch.img1.clone()), &Var::constant(batch.img2.clone()))?;
            let loss = mantis_loss(&out, &batch, depth)?.value().item();
            let prob = out.change_probability()?.to_tensor();
            let confusion = Confusion::from_probabilities(&prob, &batch.mask, threshold)?;
            let ft = 1.0 - values::ftnmt_loss(out.segmentation.value(), &batch.segmentation, ft_depth)?;
            let n = group.len() as f64;
            Ok((loss * n, confusion, ft * n))
        })
        .collect::<Result<_>>()?;
    let n = chips.len() as f64;
    let mut confusion = Confusion::default();
    let (mut loss, mut ft) = (0.0, 0.0);
    for (l, c, f) in &parts {
        loss += l;
        ft += f;
        confusion.merge(c);
    }
    let summary = EvalSummary {
        loss: loss / n,
        confusion,
        ftnmt: ft / n,
    };
    ensure!(
        summary.loss.is_finite() && summary.ftnmt.is_finite(),
        Error::NonFinite(format!("evaluation loss {} at depth {depth}", summary.loss))
    );
    Ok(summary)
}

fn append_log(path: &Path, row: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{row}").map_err(|e| Error::io(path, e))
}

fn chip_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains `model` in place and returns the per-epoch history and checkpoint records.
pub fn train(
    model: &mut Mantis,
    train_set: &[ChipPair],
    val_set: &[ChipPair],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    aug.validate()?;
    ensure!(
        !train_set.is_empty() && !val_set.is_empty(),
        Error::Data("training needs nonempty train and validation sets".into())
    );
    let mut state = ScheduleState::new(cfg.schedule())?;
    let mut opt = Adam::new(&model.params, state.current().lr, cfg.adam);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = chip_rng(cfg.seed, u64::MAX);
    let mut report = TrainReport::default();
    let mut final_baseline = if state.is_final() { Some(f64::INFINITY) } else { None };
    let mut final_progress = false;

    for epoch in 0..cfg.epochs {
        let stage = state.current();
        opt.lr = stage.lr;
        order.shuffle(&mut shuffle_rng);
        let mut running = Confusion::default();
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let chips: Vec<ChipPair> = idx
                .par_iter()
                .map(|&i| {
                    let stream = (epoch * train_set.len() + i) as u64;
                    augment(&train_set[i], aug, &mut chip_rng(cfg.seed, stream))
                })
                .collect();
            let batch = Batch::from_chips(&chips.iter().collect::<Vec<_>>())?;
            let out = model.forward_with(
                &model.params,
                &Var::constant(batch.img1.clone()),
                &Var::constant(batch.img2.clone()),
                AttentionMode::Enabled,
            )?;
            let loss = mantis_loss(&out, &batch, stage.depth)?;
            let value = loss.value().item();
            ensure!(
                value.is_finite(),
                Error::NonFinite(format!(
                    "training loss {value} at epoch {epoch}, batch {b}, stage {} (lr {:e}, depth {})",
                    state.stage_index(),
                    stage.lr,
                    stage.depth
                ))
            );
            running.merge(&Confusion::from_probabilities(
                &out.change_probability()?.to_tensor(),
                &batch.mask,
                cfg.threshold,
            )?);
            let grads = backward(&loss)?;
            drop(out);
            model.params.zero_grad();
            model.params.accumulate(&grads);
            let gn = model.params.grad_norm();
            ensure!(
                gn.is_finite(),
                Error::NonFinite(format!("gradient norm {gn} at epoch {epoch}, batch {b}"))
            );
            opt.step(&mut model.params);
            loss_sum += value * idx.len() as f64;
        }

        let ft_depth = cfg.eval_depth.unwrap_or(stage.depth);
        let val = evaluate(model, val_set, stage.depth, ft_depth, cfg.threshold, cfg.batch_size)?;
        let log = EpochLog {
            epoch,
            stage: state.stage_index(),
            lr: stage.lr,
            depth: stage.depth,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: val.loss,
            val_mcc: val.confusion.metrics().mcc,
            val_ftnmt: val.ftnmt,
            train_f1: running.metrics().f1,
        };
        if let Some(path) = &cfg.log_path {
            append_log(path, &log.csv_row())?;
        }
        let path = match &cfg.checkpoint_dir {
            Some(dir) => {
                let p = dir.join(format!("epoch_{epoch:04}"));
                save_checkpoint(&p, &model.params, &model.config_json())?;
                Some(p)
            }
            None => None,
        };
        let record = CheckpointRecord {
            epoch,
            mcc: log.val_mcc,
            ftnmt: log.val_ftnmt,
            path,
        };
        record.validate()?;
        report.records.push(record);
        on_epoch(&log);
        report.history.push(log.clone());

        if state.is_final() && final_baseline.is_some_and(|b| val.loss < b) {
            final_progress = true;
        }
        if let Transition::Advanced(next) = state.observe(val.loss) {
            let s = state.current();
            let baseline = evaluate(model, val_set, s.depth, s.depth, cfg.threshold, cfg.batch_size)?;
            state.set_baseline(baseline.loss);
            if state.is_final() {
                final_baseline = Some(baseline.loss);
            }
            report.switches.push(StageSwitch {
                epoch,
                stage: next,
                depth: s.depth,
                baseline_val_loss: baseline.loss,
            });
        }

        if let Some(target) = cfg.target_train_f1 {
            let stage_ok = !cfg.stop_in_final_stage || final_progress;
            if stage_ok && epoch + 1 >= cfg.min_epochs && log.train_f1 >= target {
                let depth = state.current().depth;
                let clean = evaluate(model, train_set, depth, depth, cfg.threshold, cfg.batch_size)?;
                let f1 = clean.confusion.metrics().f1;
                if f1 >= target {
                    report.stopped_at_f1 = Some(f1);
                    break;
                }
            }
        }
    }

    if cfg.keep_pareto_only && cfg.checkpoint_dir.is_some() {
        let keep = report.pareto()?;
        for r in &report.records {
            if let Some(p) = &r.path {
                if !keep.iter().any(|k| k.epoch == r.epoch) {
                    fs::remove_dir_all(p).map_err(|e| Error::io(p, e))?;
                }
            }
        }
        for r in report.records.iter_mut() {
            if !keep.iter().any(|k| k.epoch == r.epoch) {
                r.path = None;
            }
        }
    }
    Ok(report)
}
