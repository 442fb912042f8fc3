//! The per-stage training loop.
//!
//! Each sample of a minibatch gets its own graph, evaluated in parallel;
//! gradients are reduced in sample order so results do not depend on the
//! thread count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::{config_hash, ct_loss, pet_loss, poly_lr, swa_average, Checkpoint, Sgd, Stage, TrainConfig};
use crate::net::MirrorNet;
use crate::sampler::{
    augment, balance_epoch, enumerate_patches, extract_patch, AugmentConfig, Patch, PatchIndex, Study,
};
use crate::tensor::{Dims, Graph, ParamId, Tensor};
use crate::volumes::LabelSemantics;
use crate::{seed, Error, Result};

const VALIDATION_STREAM: u64 = 0x7661_6c;

/// Training and validation studies, prepared at the stage's patch size.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [Study],
    pub val: &'a [Study],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    /// Completed epochs, starting at 1.
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        let val = self.val_loss.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.epoch, self.stage, self.train_loss, val, self.lr)
    }
}

pub const LOSS_CSV_HEADER: &str = "epoch,stage,train_loss,val_loss,lr";

pub fn write_loss_csv(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut text = String::from(LOSS_CSV_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Observer of training progress. Errors abort the stage.
pub trait Monitor {
    fn epoch(&mut self, _record: &LossRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl Monitor for () {}

/// Appends loss rows to a CSV and writes every checkpoint into a directory.
#[derive(Debug)]
pub struct DirMonitor {
    dir: PathBuf,
    csv: PathBuf,
    pub verbose: bool,
}

impl DirMonitor {
    /// Creates `dir` and starts `csv` with a header unless it already exists.
    pub fn new(dir: &Path, csv: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if !csv.exists() {
            fs::write(csv, format!("{LOSS_CSV_HEADER}\n")).map_err(|e| Error::io(csv, e))?;
        }
        Ok(Self { dir: dir.to_path_buf(), csv: csv.to_path_buf(), verbose: false })
    }
}

impl Monitor for DirMonitor {
    fn epoch(&mut self, r: &LossRecord) -> Result<()> {
        let mut f = fs::OpenOptions::new().append(true).open(&self.csv).map_err(|e| Error::io(&self.csv, e))?;
        writeln!(f, "{}", r.csv_row()).map_err(|e| Error::io(&self.csv, e))?;
        if self.verbose {
            eprintln!(
                "{} epoch {:>3}  train {:.4}  val {}  lr {:.3e}",
                r.stage,
                r.epoch,
                r.train_loss,
                r.val_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                r.lr
            );
        }
        Ok(())
    }

    fn checkpoint(&mut self, c: &Checkpoint) -> Result<()> {
        c.save(&self.dir).map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub records: Vec<LossRecord>,
    /// Kept checkpoints plus the final epoch when it is off the keep grid.
    pub checkpoints: Vec<Checkpoint>,
    /// Epochs averaged into the final weights (empty for the CT stage).
    pub swa_epochs: Vec<usize>,
}

fn check_preconditions(net: &MirrorNet, data: &TrainData, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Stage("no training studies".into()));
    }
    let classes = net.config().ct.out_channels as u32;
    for s in data.train.iter().chain(data.val) {
        if s.shape().iter().any(|&n| n < cfg.patch_size) {
            return Err(Error::Stage(format!("study {} is smaller than the patch", s.id)));
        }
        match cfg.stage {
            Stage::Ct => {
                if let Some(&v) = s.tissues.data().iter().find(|&&v| v >= classes) {
                    return Err(Error::Stage(format!(
                        "study {}: tissue label {v} but the CT head has {classes} channels",
                        s.id
                    )));
                }
            }
            Stage::Pet => {
                if s.lesions.semantics() != LabelSemantics::BinaryMask {
                    return Err(Error::Stage(format!("study {}: lesions are not a binary mask", s.id)));
                }
            }
        }
    }
    match cfg.stage {
        Stage::Ct if net.is_ct_frozen() => Err(Error::Stage("CT stage on a frozen CT branch".into())),
        Stage::Pet if !net.is_ct_frozen() => Err(Error::Stage("PET stage needs the CT branch frozen".into())),
        _ => Ok(()),
    }
}

fn all_patches(studies: &[Study], cfg: &TrainConfig) -> Result<Vec<PatchIndex>> {
    let mut out = Vec::new();
    for (i, s) in studies.iter().enumerate() {
        out.extend(enumerate_patches(s, i, cfg.patch_size, cfg.stride())?);
    }
    Ok(out)
}

fn to_input(values: &[f32], p: usize) -> Result<Tensor> {
    Tensor::new(Dims::cube(1, 1, p), values.to_vec())
}

fn one_hot(labels: &[u32], classes: usize) -> Vec<f32> {
    let m = labels.len();
    let mut out = vec![0f32; classes * m];
    for (i, &l) in labels.iter().enumerate() {
        out[l as usize * m + i] = 1.0;
    }
    out
}

struct SampleResult {
    loss: f64,
    grads: Vec<Vec<f32>>,
}

/// Loss of one patch, with gradients for `trainable` when requested.
fn evaluate(
    net: &MirrorNet,
    stage: Stage,
    patch: &Patch,
    smooth: f64,
    trainable: Option<&[ParamId]>,
) -> Result<SampleResult> {
    let p = patch.size;
    let mut g = Graph::<f32>::new();
    let params = match trainable {
        Some(_) => g.bind(net.store(), |n| net.is_trainable(n) && stage_owns(stage, n))?,
        None => g.bind(net.store(), |_| false)?,
    };
    let ct = g.input(&to_input(&patch.ct, p)?)?;
    let ct_out = net.ct_graph(&mut g, &params, ct)?;
    let loss = match stage {
        Stage::Ct => {
            let target = one_hot(&patch.tissues, net.config().ct.out_channels);
            ct_loss(&mut g, ct_out.logits, &target, smooth)?
        }
        Stage::Pet => {
            let pet = g.input(&to_input(&patch.pet, p)?)?;
            let logits = net.pet_graph(&mut g, &params, pet, ct_out.bottleneck)?;
            let target: Vec<f32> = patch.lesions.iter().map(|&v| v as f32).collect();
            pet_loss(&mut g, logits, &target, smooth)?
        }
    };
    let value = g.value(loss)[0] as f64;
    let grads = match trainable {
        Some(ids) if value.is_finite() => {
            let mut gr = g.backward(loss)?;
            ids.iter()
                .map(|id| {
                    let var = params[id.index()];
                    gr.take(var).unwrap_or_else(|| vec![0.0; net.store().get(*id).data().len()])
                })
                .collect()
        }
        _ => Vec::new(),
    };
    Ok(SampleResult { loss: value, grads })
}

fn stage_owns(stage: Stage, name: &str) -> bool {
    match stage {
        Stage::Ct => name.starts_with(crate::net::CT_PREFIX),
        Stage::Pet => name.starts_with(crate::net::PET_PREFIX),
    }
}

fn validation_loss(
    net: &MirrorNet,
    studies: &[Study],
    patches: &[PatchIndex],
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    if patches.is_empty() {
        return Ok(None);
    }
    let losses = patches
        .par_iter()
        .map(|idx| {
            let patch = extract_patch(&studies[idx.study], idx)?;
            evaluate(net, cfg.stage, &patch, cfg.dice_smooth, None).map(|r| r.loss)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
}

/// Trains one branch. For the PET stage the final weights are the average of
/// the last kept checkpoints.
pub fn train_stage(
    net: &mut MirrorNet,
    data: TrainData,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    monitor: &mut dyn Monitor,
) -> Result<StageOutcome> {
    check_preconditions(net, &data, cfg)?;
    aug.validate()?;
    let hash = config_hash(&(net.config(), cfg, aug))?;
    let stage = cfg.stage;
    let train_patches = all_patches(data.train, cfg)?;
    let val_patches = if data.val.is_empty() {
        Vec::new()
    } else {
        let all = all_patches(data.val, cfg)?;
        balance_epoch(&all, seed::derive(cfg.seed, &[stage.id(), VALIDATION_STREAM]))?
    };
    let trainable: Vec<ParamId> = net
        .store()
        .ids()
        .filter(|&id| {
            let n = net.store().name(id);
            net.is_trainable(n) && stage_owns(stage, n)
        })
        .collect();
    let mut sgd = Sgd::new(cfg.momentum);
    let kept = cfg.kept_epochs();
    let mut outcome = StageOutcome { records: Vec::new(), checkpoints: Vec::new(), swa_epochs: Vec::new() };

    for ep in 0..cfg.epochs {
        let lr = poly_lr(ep, cfg.epochs, cfg.lr0, cfg.poly_power)?;
        let order = balance_epoch(&train_patches, seed::derive(cfg.seed, &[stage.id(), ep as u64]))?;
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let first = b * cfg.batch_size;
            let net_ref = &*net;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(j, idx)| {
                    let draw = seed::derive(cfg.seed, &[stage.id(), ep as u64, (first + j) as u64]);
                    let patch = augment(extract_patch(&data.train[idx.study], idx)?, aug, draw)?;
                    evaluate(net_ref, stage, &patch, cfg.dice_smooth, Some(&trainable))
                })
                .collect::<Result<Vec<_>>>()?;
            let non_finite = Error::NonFiniteLoss { epoch: ep + 1, batch: b };
            if results.iter().any(|r| !r.loss.is_finite()) {
                return Err(non_finite);
            }
            let scale = 1.0 / results.len() as f32;
            let mut grads = results[0].grads.clone();
            for r in &results[1..] {
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(non_finite);
            }
            sgd.step(net.store_mut(), &trainable, &grads, lr as f32)?;
            loss_sum += results.iter().map(|r| r.loss).sum::<f64>();
        }
        let record = LossRecord {
            epoch: ep + 1,
            stage,
            train_loss: loss_sum / order.len() as f64,
            val_loss: validation_loss(net, data.val, &val_patches, cfg)?,
            lr,
        };
        monitor.epoch(&record)?;
        outcome.records.push(record);
        if kept.contains(&(ep + 1)) || ep + 1 == cfg.epochs {
            let ckpt = Checkpoint { stage, epoch: ep + 1, config_hash: hash.clone(), params: net.store().clone() };
            monitor.checkpoint(&ckpt)?;
            outcome.checkpoints.push(ckpt);
        }
    }

    if stage == Stage::Pet {
        let epochs = cfg.swa_epochs();
        let chosen: Vec<Checkpoint> =
            outcome.checkpoints.iter().filter(|c| epochs.contains(&c.epoch)).cloned().collect();
        let averaged = swa_average(&chosen)?;
        net.load_store(&averaged)?;
        outcome.swa_epochs = epochs;
    }
    Ok(outcome)
}
