//! The run configuration: one JSON document plus `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use mirrorseg::sampler::PrepareConfig;
use mirrorseg::{
    AugmentConfig, BranchConfig, Connectivity, InferenceConfig, MirrorConfig, PhantomConfig, Stage, TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Study counts per split. `normal` studies carry no lesions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub normal: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train: 4, val: 1, test: 1, normal: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Mixed into phantom, initialization and training seeds.
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub splits: SplitCounts,
    pub prepare: PrepareConfig,
    pub network: MirrorConfig,
    pub ct_train: TrainConfig,
    pub pet_train: TrainConfig,
    pub augment: AugmentConfig,
    pub inference: InferenceConfig,
    pub connectivity: Connectivity,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            phantom: PhantomConfig::default(),
            splits: SplitCounts::default(),
            prepare: PrepareConfig::default(),
            network: MirrorConfig::default(),
            ct_train: TrainConfig::ct(),
            pet_train: TrainConfig::pet(),
            augment: AugmentConfig::default(),
            inference: InferenceConfig::default(),
            connectivity: Connectivity::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                let v: Value =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                // fill absent sections from the defaults so overrides can reach them
                let mut base = serde_json::to_value(Self::default()).expect("defaults serialize");
                merge(&mut base, v);
                base
            }
            None => serde_json::to_value(Self::default()).expect("defaults serialize"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of everything that shapes the trained model; the data and output
    /// locations are left out so a moved or repeated run keeps its identity.
    pub fn model_hash(&self) -> Result<String, CliError> {
        let located = Self { data_dir: PathBuf::new(), output_dir: PathBuf::new(), ..self.clone() };
        mirrorseg::optimize::config_hash(&located).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: mirrorseg::Error| CliError::Config(e.to_string());
        self.phantom.validate().map_err(wrap)?;
        self.network.validate().map_err(wrap)?;
        self.ct_train.validate().map_err(wrap)?;
        self.pet_train.validate().map_err(wrap)?;
        self.augment.validate().map_err(wrap)?;
        self.inference.validate().map_err(wrap)?;
        if self.ct_train.stage != Stage::Ct || self.pet_train.stage != Stage::Pet {
            return Err(CliError::Config("ct_train and pet_train must name the CT and PET stages".into()));
        }
        if self.ct_train.patch_size != self.pet_train.patch_size {
            return Err(CliError::Config("both stages must use one patch size".into()));
        }
        let div = self.network.ct.divisor();
        for (what, p) in [("training", self.ct_train.patch_size), ("inference", self.inference.patch)] {
            if p % div != 0 {
                return Err(CliError::Config(format!("{what} patch {p} is not a multiple of {div}")));
            }
        }
        if self.phantom.tissue_class_count as usize > self.network.ct.out_channels {
            return Err(CliError::Config(format!(
                "phantom has {} tissue classes but the CT head has {} channels",
                self.phantom.tissue_class_count, self.network.ct.out_channels
            )));
        }
        Ok(())
    }

    /// The desk-scale setup used by the acceptance run.
    pub fn desk_scale() -> Self {
        let branch = |out| BranchConfig { levels: 3, base_channels: 8, in_channels: 1, out_channels: out };
        let phantom = PhantomConfig { shape: [64, 64, 64], ..PhantomConfig::default() };
        let classes = phantom.tissue_class_count as usize;
        let stage = |base: TrainConfig, epochs, keep, last| TrainConfig {
            epochs,
            patch_size: 32,
            swa_keep_every: keep,
            swa_average_last: last,
            ..base
        };
        Self {
            splits: SplitCounts { train: 40, val: 10, test: 0, normal: 10 },
            network: MirrorConfig { ct: branch(classes), pet: branch(1), ..MirrorConfig::default() },
            ct_train: stage(TrainConfig::ct(), 20, 10, 2),
            pet_train: stage(TrainConfig::pet(), 40, 10, 3),
            inference: InferenceConfig { patch: 32, ..InferenceConfig::default() },
            phantom,
            ..Self::default()
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Sets a dotted key (`pet_train.epochs=40`). The value is parsed as JSON,
/// falling back to a plain string. The key must already exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(move |i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::desk_scale()] {
            cfg.validate().unwrap();
            let json = cfg.to_json();
            let back: RunConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_json(), json);
        }
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::load(
            None,
            &[
                "pet_train.epochs=40".into(),
                "pet_train.swa_average_last=3".into(),
                "inference.tta=false".into(),
                "data_dir=/tmp/x".into(),
                "phantom.shape.0=32".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pet_train.epochs, 40);
        assert!(!cfg.inference.tta);
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.phantom.shape, [32, 64, 64]);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        for o in ["pet_train.epoch=3", "nokey", "pet_train.epochs=-1", "ct_train.lr0=0"] {
            assert!(matches!(RunConfig::load(None, &[o.into()]), Err(CliError::Config(_))), "{o}");
        }
    }

    #[test]
    fn partial_file_is_completed_from_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 9, "ct_train": {"epochs": 70}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.ct_train.epochs, 70);
        assert_eq!(cfg.ct_train.lr0, 0.01);
        fs::write(&p, r#"{"sed": 9}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(CliError::Config(_))));
    }

    #[test]
    fn shipped_desk_config_is_desk_scale() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
        let shipped = RunConfig::load(Some(&path), &[]).unwrap();
        let mut want = RunConfig::desk_scale();
        want.data_dir = "data/desk".into();
        want.output_dir = "runs/desk".into();
        assert_eq!(shipped.to_json(), want.to_json());
    }

    #[test]
    fn model_hash_ignores_locations() {
        let a = RunConfig::default();
        let b = RunConfig { data_dir: "elsewhere".into(), output_dir: "runs/other".into(), ..a.clone() };
        assert_eq!(a.model_hash().unwrap(), b.model_hash().unwrap());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.model_hash().unwrap(), c.model_hash().unwrap());
    }
}
