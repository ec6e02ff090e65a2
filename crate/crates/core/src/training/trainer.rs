use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::data::Encoded;
use crate::error::{Error, Result};
use crate::nn::{transfer_plan, Model, ModelKind, Session};
use crate::seed::sub_seed;

use super::optim::{clip_global_norm, Optimizer, OptimizerKind};
use super::schedule::{EarlyStopping, EarlyStoppingConfig, LrSchedule, StopDecision};

/// One phase of training with its own trainable set and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    /// Module prefixes held fixed (and run in evaluation mode) in this stage.
    pub frozen: Vec<String>,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stopping: Option<EarlyStoppingConfig>,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stages: Vec<Stage>,
}

/// Knobs of the training protocol. Defaults follow the reference setup:
/// minibatches of 128, Adam throughout, constant 1e-4 for time-series
/// models, 3-epoch one-cycle at 1e-3 for the embedding network, and for
/// hybrids a frozen head stage of 2×2-epoch cycles at 3e-4 followed by a
/// 10-epoch fine-tune at 1e-5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub batch_size: usize,
    pub clip_norm: f64,
    pub ts_lr: f64,
    pub ts_epochs: usize,
    pub s2v_max_lr: f64,
    pub s2v_cycle_epochs: usize,
    pub s2v_cycles: usize,
    pub head_max_lr: f64,
    pub head_cycle_epochs: usize,
    pub head_cycles: usize,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub early_stopping: EarlyStoppingConfig,
    /// Write real elapsed seconds to the epoch log (off by default so logs
    /// are byte-reproducible).
    pub record_wall_clock: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            clip_norm: 10.0,
            ts_lr: 1e-4,
            ts_epochs: 20,
            s2v_max_lr: 1e-3,
            s2v_cycle_epochs: 3,
            s2v_cycles: 3,
            head_max_lr: 3e-4,
            head_cycle_epochs: 2,
            head_cycles: 2,
            finetune_lr: 1e-5,
            finetune_epochs: 10,
            early_stopping: EarlyStoppingConfig::default(),
            record_wall_clock: false,
        }
    }
}

impl ProtocolConfig {
    fn stage(&self, name: &str, frozen: Vec<String>, schedule: LrSchedule, epochs: usize) -> Stage {
        Stage {
            name: name.to_string(),
            frozen,
            optimizer: OptimizerKind::Adam,
            schedule,
            epochs,
            batch_size: self.batch_size,
            early_stopping: Some(self.early_stopping),
            clip_norm: Some(self.clip_norm),
        }
    }

    pub fn plan(&self, kind: ModelKind) -> TrainPlan {
        let stages = match kind {
            ModelKind::TsTcn | ModelKind::TsLstm => vec![self.stage(
                "train",
                vec![],
                LrSchedule::Constant { lr: self.ts_lr },
                self.ts_epochs,
            )],
            ModelKind::Stock2Vec => vec![self.stage(
                "train",
                vec![],
                LrSchedule::one_cycle(self.s2v_max_lr, self.s2v_cycle_epochs),
                self.s2v_cycle_epochs * self.s2v_cycles,
            )],
            ModelKind::TcnStock2Vec | ModelKind::LstmStock2Vec => {
                let frozen = transfer_plan(kind).into_iter().flat_map(|(_, p)| p).collect();
                vec![
                    self.stage(
                        "head",
                        frozen,
                        LrSchedule::one_cycle(self.head_max_lr, self.head_cycle_epochs),
                        self.head_cycle_epochs * self.head_cycles,
                    ),
                    self.stage(
                        "finetune",
                        vec![],
                        LrSchedule::Constant { lr: self.finetune_lr },
                        self.finetune_epochs,
                    ),
                ]
            }
        };
        TrainPlan { stages }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: String,
    pub lr: f64,
    pub train_mse: f64,
    pub valid_mse: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub epochs: Vec<EpochRecord>,
    pub best_valid: f64,
    /// 1-based epoch within the stage whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: ModelKind,
    pub stages: Vec<StageReport>,
}

impl TrainReport {
    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.stages.iter().flat_map(|s| s.epochs.iter())
    }

    pub fn best_valid(&self) -> Option<f64> {
        self.stages.last().map(|s| s.best_valid)
    }
}

/// Mean squared error (in scaled units) of evaluation-mode predictions.
pub fn evaluate_mse<T: Scalar>(model: &Model<T>, data: &Encoded<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let preds = predict_scaled(model, data)?;
    let sse: f64 = preds
        .iter()
        .zip(&data.targets)
        .map(|(p, t)| (p - t.to_f64()).powi(2))
        .sum();
    Ok(sse / data.len() as f64)
}

/// Evaluation-mode predictions in scaled units, in sample order.
pub fn predict_scaled<T: Scalar>(model: &Model<T>, data: &Encoded<T>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for batch in data.batches(512) {
        out.extend(model.predict(&batch)?.into_iter().map(|v| v.to_f64()));
    }
    Ok(out)
}

/// Runs one stage: seeded shuffled minibatches, forward → MSE → backward →
/// clipped optimizer step on the trainable parameters, validation once per
/// epoch, optional early stopping that restores the best parameters.
///
/// On a non-finite loss or gradient the best parameters seen so far (or the
/// stage's starting parameters) are restored before the error is returned.
pub fn train_stage<T: Scalar>(
    model: &mut Model<T>,
    stage: &Stage,
    train: &Encoded<T>,
    valid: &Encoded<T>,
    seed: u64,
    epoch_offset: usize,
    record_wall_clock: bool,
) -> Result<(StageReport, Optimizer<T>)> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data(format!("stage `{}` needs non-empty train and valid sets", stage.name)));
    }
    if stage.batch_size == 0 || stage.epochs == 0 {
        return Err(Error::Protocol(format!("stage `{}` needs batch_size and epochs >= 1", stage.name)));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("shuffle/{}", stage.name)));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("dropout/{}", stage.name)));
    let mut opt = Optimizer::new(stage.optimizer, model.params.len());
    let mut early = stage.early_stopping.map(EarlyStopping::new);
    let mut best_snapshot = model.params.snapshot();
    let mut best_valid = f64::INFINITY;
    let mut best_epoch = 0;
    let mut records = Vec::with_capacity(stage.epochs);
    let mut stopped_early = false;
    let steps_per_epoch = train.len().div_ceil(stage.batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step: u64 = 0;
    let started = Instant::now();

    for epoch in 1..=stage.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sse = 0.0;
        let mut lr = stage.schedule.lr_at(step, steps_per_epoch);
        for chunk in order.chunks(stage.batch_size) {
            lr = stage.schedule.lr_at(step, steps_per_epoch);
            let batch = train.batch(chunk);
            let (loss, mut grads, updates) = {
                let mut s = Session::train(&model.params, dropout_rng.gen()).with_frozen(&stage.frozen);
                let y = model.forward(&mut s, &batch)?;
                let t = s.tape.constant(Tensor::new(vec![batch.len(), 1], batch.targets.clone())?);
                let loss = s.tape.mse_loss(y, t)?;
                let value = s.tape.value(loss).item()?.to_f64();
                let updates = s.take_buffer_updates();
                (value, s.gradients(loss)?, updates)
            };
            let diverged = |model: &mut Model<T>, snapshot: &[Vec<T>]| {
                model.params.restore(snapshot);
            };
            if !loss.is_finite() {
                diverged(model, &best_snapshot);
                return Err(Error::Divergence {
                    stage: stage.name.clone(),
                    epoch,
                    step: opt.step + 1,
                });
            }
            if let Some(c) = stage.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            if let Err(e) = opt.step(&mut model.params, &grads, lr) {
                diverged(model, &best_snapshot);
                return Err(e);
            }
            for (id, data) in updates {
                model.params.tensor_mut(id).data_mut().copy_from_slice(&data);
            }
            sse += loss * chunk.len() as f64;
            step += 1;
        }
        let train_mse = sse / train.len() as f64;
        let valid_mse = evaluate_mse(model, valid)?;
        if !valid_mse.is_finite() {
            model.params.restore(&best_snapshot);
            return Err(Error::Divergence {
                stage: stage.name.clone(),
                epoch,
                step: opt.step,
            });
        }
        records.push(EpochRecord {
            epoch: epoch_offset + epoch,
            stage: stage.name.clone(),
            lr,
            train_mse,
            valid_mse,
            wall_seconds: if record_wall_clock {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        log::info!(
            "{} epoch {epoch}: lr {lr:.3e} train {train_mse:.6} valid {valid_mse:.6}",
            stage.name
        );
        match early.as_mut() {
            Some(es) => {
                let (improved, decision) = es.update(valid_mse);
                if improved {
                    best_snapshot = model.params.snapshot();
                    best_valid = valid_mse;
                    best_epoch = epoch;
                }
                if decision == StopDecision::Stop {
                    stopped_early = epoch < stage.epochs;
                    break;
                }
            }
            None => {
                best_snapshot = model.params.snapshot();
                best_valid = valid_mse;
                best_epoch = epoch;
            }
        }
    }
    if early.is_some() {
        model.params.restore(&best_snapshot);
    }
    Ok((
        StageReport {
            name: stage.name.clone(),
            epochs: records,
            best_valid,
            best_epoch,
            stopped_early,
        },
        opt,
    ))
}

/// Pretrained models a hybrid borrows its modules from.
#[derive(Debug, Clone, Copy)]
pub struct Pretrained<'a, T> {
    pub stock2vec: Option<&'a Model<T>>,
    pub temporal: Option<&'a Model<T>>,
}

impl<T> Default for Pretrained<'_, T> {
    fn default() -> Self {
        Self {
            stock2vec: None,
            temporal: None,
        }
    }
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub report: TrainReport,
    pub optimizer: Optimizer<T>,
}

/// Copies the pretrained modules a hybrid needs into `model`.
pub fn load_pretrained<T: Scalar>(model: &mut Model<T>, pretrained: &Pretrained<'_, T>) -> Result<()> {
    for (source_kind, prefixes) in transfer_plan(model.kind()) {
        let source = if source_kind == ModelKind::Stock2Vec {
            pretrained.stock2vec
        } else {
            pretrained.temporal
        };
        let source = source.ok_or_else(|| {
            Error::Protocol(format!(
                "{} needs a pretrained {source_kind} model for {prefixes:?}",
                model.kind()
            ))
        })?;
        if source.kind() != source_kind {
            return Err(Error::Protocol(format!(
                "expected a pretrained {source_kind} model, got {}",
                source.kind()
            )));
        }
        model.transfer_from(source, &prefixes)?;
    }
    Ok(())
}

/// Builds the model, loads pretrained modules for hybrids and runs every
/// stage of the plan in order.
pub fn run_protocol<T: Scalar>(
    model: Model<T>,
    plan: &TrainPlan,
    train: &Encoded<T>,
    valid: &Encoded<T>,
    pretrained: &Pretrained<'_, T>,
    seed: u64,
    record_wall_clock: bool,
) -> Result<TrainOutcome<T>> {
    let mut model = model;
    load_pretrained(&mut model, pretrained)?;
    let mut stages = Vec::with_capacity(plan.stages.len());
    let mut optimizer = Optimizer::adam(model.params.len());
    let mut offset = 0;
    for stage in &plan.stages {
        let (report, opt) = train_stage(&mut model, stage, train, valid, seed, offset, record_wall_clock)?;
        offset += report.epochs.len();
        stages.push(report);
        optimizer = opt;
    }
    let report = TrainReport {
        kind: model.kind(),
        stages,
    };
    Ok(TrainOutcome {
        model,
        report,
        optimizer,
    })
}

pub fn write_epoch_log(report: &TrainReport, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["epoch", "stage", "lr", "train_mse", "valid_mse", "wall_seconds"])?;
    for r in report.epochs() {
        w.write_record([
            r.epoch.to_string(),
            r.stage.clone(),
            r.lr.to_string(),
            r.train_mse.to_string(),
            r.valid_mse.to_string(),
            r.wall_seconds.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
