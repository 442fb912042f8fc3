//! Losses, the polynomial learning-rate decay, momentum SGD, checkpoint
//! averaging and the two-stage training driver.

mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use train::{train_stage, write_loss_csv, DirMonitor, LossRecord, Monitor, StageOutcome, TrainData};

use crate::tensor::{read_params, write_params, Element, Graph, ParamStore, Tensor, Var};
use crate::{Error, Result};

pub const POLY_POWER: f64 = 0.9;
pub const DEFAULT_SMOOTH: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "PET")]
    Pet,
}

impl Stage {
    /// Lower-case tag used in file names and logs.
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Ct => "ct",
            Stage::Pet => "pet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ct" => Ok(Stage::Ct),
            "pet" => Ok(Stage::Pet),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }

    fn id(self) -> u64 {
        match self {
            Stage::Ct => 1,
            Stage::Pet => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// `lr0 · (1 − ep/n)^power`, with `ep` the number of completed epochs.
pub fn poly_lr(ep: usize, n_epochs: usize, lr0: f64, power: f64) -> Result<f64> {
    if n_epochs == 0 || ep > n_epochs {
        return Err(Error::EpochRange { ep, total: n_epochs });
    }
    Ok(lr0 * (1.0 - ep as f64 / n_epochs as f64).powf(power))
}

pub fn lr_schedule(ep: usize, n_epochs: usize, lr0: f64) -> Result<f64> {
    poly_lr(ep, n_epochs, lr0, POLY_POWER)
}

/// Multi-class loss on raw logits: softmax Dice averaged over channels plus
/// per-channel BCE against one-hot targets.
pub fn ct_loss<T: Element>(g: &mut Graph<T>, logits: Var, one_hot: &[T], smooth: f64) -> Result<Var> {
    let probs = g.softmax_channels(logits)?;
    let dice = g.dice_loss(probs, one_hot, smooth)?;
    let bce = g.bce_with_logits(logits, one_hot)?;
    g.add(dice, bce)
}

/// Binary loss on raw logits: sigmoid Dice plus BCE.
pub fn pet_loss<T: Element>(g: &mut Graph<T>, logits: Var, mask: &[T], smooth: f64) -> Result<Var> {
    let probs = g.sigmoid(logits)?;
    let dice = g.dice_loss(probs, mask, smooth)?;
    let bce = g.bce_with_logits(logits, mask)?;
    g.add(dice, bce)
}

fn check_pair<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {} vs {}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Soft Dice loss of `probs` against `target`, averaged over samples and
/// channels.
pub fn dice_loss<T: Element>(probs: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<f64> {
    check_pair(probs, target, "dice_loss")?;
    let mut g = Graph::new();
    let p = g.input(probs)?;
    let l = g.dice_loss(p, target.data(), smooth)?;
    Ok(g.value(l)[0].as_f64())
}

/// Mean binary cross-entropy from logits.
pub fn bce_loss<T: Element>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_pair(logits, target, "bce_loss")?;
    let mut g = Graph::new();
    let x = g.input(logits)?;
    let l = g.bce_with_logits(x, target.data())?;
    Ok(g.value(l)[0].as_f64())
}

/// One momentum step: `v ← m·v + g; p ← p − lr·v`.
pub fn sgd_step(params: &mut [f32], grads: &[f32], lr: f32, momentum: f32, velocity: &mut [f32]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} params, {} grads, {} velocity",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over a fixed list of parameters of a store.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32) -> Self {
        Self { momentum, velocity: Vec::new() }
    }

    /// `grads[i]` belongs to `ids[i]`; velocities are keyed by list position.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        ids: &[crate::tensor::ParamId],
        grads: &[Vec<f32>],
        lr: f32,
    ) -> Result<()> {
        if ids.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters but {} gradients", ids.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = ids.iter().map(|&id| vec![0.0; store.get(id).data().len()]).collect();
        }
        if self.velocity.len() != ids.len() {
            return Err(Error::Shape("optimizer state built for another parameter list".into()));
        }
        for ((&id, g), v) in ids.iter().zip(grads).zip(self.velocity.iter_mut()) {
            sgd_step(store.get_mut(id).data_mut(), g, lr, self.momentum, v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub epoch: usize,
    pub config_hash: String,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    /// `<stage>_ep<NNN>`
    pub fn file_stem(&self) -> String {
        format!("{}_ep{:03}", self.stage, self.epoch)
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("stage".to_string(), self.stage.tag().to_string()),
            ("epoch".to_string(), self.epoch.to_string()),
            ("config_hash".to_string(), self.config_hash.clone()),
        ])
    }

    /// Writes `dir/<stem>.json` and `.raw`; returns the base path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let base = dir.join(self.file_stem());
        write_params(&self.params, &self.meta(), &base)?;
        Ok(base)
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (params, meta) = read_params(base)?;
        let field =
            |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("{} lacks {k}", base.display())));
        let epoch = field("epoch")?.parse().map_err(|_| Error::Checkpoint(format!("{}: bad epoch", base.display())))?;
        Ok(Self { stage: Stage::parse(&field("stage")?)?, epoch, config_hash: field("config_hash")?, params })
    }
}

/// Elementwise mean of same-named parameters. Values are summed in sorted
/// order in f64, so the result does not depend on the checkpoint order.
pub fn swa_average(checkpoints: &[Checkpoint]) -> Result<ParamStore<f32>> {
    let first = checkpoints.first().ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    let names: Vec<&str> = first.params.iter().map(|(n, _)| n).collect();
    for c in &checkpoints[1..] {
        if c.params.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "epoch {} has {} tensors, epoch {} has {}",
                c.epoch,
                c.params.len(),
                first.epoch,
                names.len()
            )));
        }
    }
    let k = checkpoints.len();
    let mut out = ParamStore::new();
    let mut column = vec![0f32; k];
    for (name, t0) in first.params.iter() {
        let sources = checkpoints
            .iter()
            .map(|c| {
                let id =
                    c.params.find(name).ok_or_else(|| Error::Checkpoint(format!("epoch {} lacks {name}", c.epoch)))?;
                let t = c.params.get(id);
                if t.dims() != t0.dims() {
                    return Err(Error::Checkpoint(format!("{name}: shape {} vs {}", t.dims(), t0.dims())));
                }
                Ok(t.data())
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = (0..t0.data().len())
            .map(|i| {
                for (slot, s) in column.iter_mut().zip(&sources) {
                    *slot = s[i];
                }
                column.sort_by(f32::total_cmp);
                (column.iter().map(|&v| v as f64).sum::<f64>() / k as f64) as f32
            })
            .collect();
        out.push(name, Tensor::new(t0.dims(), mean)?);
    }
    Ok(out)
}

/// Lower-case hex SHA-256 of the JSON rendering of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let text = serde_json::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr0: f64,
    #[serde(default = "default_poly")]
    pub poly_power: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    pub batch_size: usize,
    pub patch_size: usize,
    /// Grid stride for training patches; `None` means the patch size.
    #[serde(default)]
    pub patch_stride: Option<usize>,
    pub swa_keep_every: usize,
    pub swa_average_last: usize,
    #[serde(default = "default_smooth")]
    pub dice_smooth: f64,
    pub seed: u64,
}

fn default_poly() -> f64 {
    POLY_POWER
}

fn default_momentum() -> f32 {
    0.9
}

fn default_smooth() -> f64 {
    DEFAULT_SMOOTH
}

impl TrainConfig {
    fn base(stage: Stage, epochs: usize, lr0: f64) -> Self {
        Self {
            stage,
            epochs,
            lr0,
            poly_power: POLY_POWER,
            momentum: 0.9,
            batch_size: 2,
            patch_size: 64,
            patch_stride: None,
            swa_keep_every: 10,
            swa_average_last: 6,
            dice_smooth: DEFAULT_SMOOTH,
            seed: 0,
        }
    }

    /// 100 epochs from 0.01.
    pub fn ct() -> Self {
        Self::base(Stage::Ct, 100, 0.01)
    }

    /// 200 epochs from 0.004.
    pub fn pet() -> Self {
        Self::base(Stage::Pet, 200, 0.004)
    }

    pub fn stride(&self) -> usize {
        self.patch_stride.unwrap_or(self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("{} training: {m}", self.stage)));
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.poly_power.is_finite() && self.poly_power > 0.0) {
            return fail("poly_power must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.stride() == 0 {
            return fail("batch size, patch size and stride must be positive".into());
        }
        if self.swa_keep_every == 0 || self.swa_average_last == 0 {
            return fail("checkpoint spacing and averaging count must be positive".into());
        }
        if self.swa_average_last * self.swa_keep_every > self.epochs {
            return fail(format!(
                "averaging {} checkpoints kept every {} epochs needs more than {} epochs",
                self.swa_average_last, self.swa_keep_every, self.epochs
            ));
        }
        if !(self.dice_smooth.is_finite() && self.dice_smooth >= 0.0) {
            return fail("dice_smooth must be non-negative".into());
        }
        Ok(())
    }

    /// Epochs whose weights are kept, in increasing order.
    pub fn kept_epochs(&self) -> Vec<usize> {
        (1..=self.epochs / self.swa_keep_every).map(|k| k * self.swa_keep_every).collect()
    }

    /// The kept epochs that enter the final average.
    pub fn swa_epochs(&self) -> Vec<usize> {
        let kept = self.kept_epochs();
        kept[kept.len().saturating_sub(self.swa_average_last)..].to_vec()
    }
}
