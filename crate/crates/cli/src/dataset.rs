//! On-disk study layout: `<id>_ct`, `<id>_pet`, `<id>_tissues`, `<id>_lesions`
//! sidecar pairs plus a `manifest.json` naming the splits.

use std::fs;
use std::path::{Path, PathBuf};

use mirrorseg::volumes::{generate_phantom, read_labels, read_volume, write_labels, write_volume};
use mirrorseg::{seed, LabelMap, LabelSemantics, Modality, PhantomConfig, Volume};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
const PHANTOM_STREAM: u64 = 0x5048_414e;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Lesion-free studies, scored by false-positive volume only.
    pub normal: Vec<String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        m.check()?;
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test).chain(&self.normal)
    }

    pub fn split(&self, name: &str) -> Result<&[String], CliError> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            "normal" => Ok(&self.normal),
            _ => Err(CliError::Usage(format!("unknown split {name:?}"))),
        }
    }

    /// No study may appear twice, within or across splits.
    pub fn check(&self) -> Result<(), CliError> {
        let mut seen = std::collections::BTreeSet::new();
        for id in self.all() {
            if !seen.insert(id) {
                return Err(CliError::Data(format!("study {id} is listed more than once")));
            }
        }
        Ok(())
    }
}

pub fn study_path(dir: &Path, id: &str, kind: &str) -> PathBuf {
    dir.join(format!("{id}_{kind}"))
}

/// Writes the configured number of phantoms per split. Study `i` (counted
/// across splits) uses a seed derived from the run seed, the phantom seed and `i`.
pub fn write_phantoms(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let dir = &cfg.data_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let s = &cfg.splits;
    let plan = [("train", s.train, false), ("val", s.val, false), ("test", s.test, false), ("normal", s.normal, true)];
    let mut manifest = Manifest::default();
    let mut index = 0u64;
    for (split, count, lesion_free) in plan {
        for _ in 0..count {
            let id = format!("phantom_{index:04}");
            let pcfg = PhantomConfig {
                seed: seed::derive(cfg.seed, &[PHANTOM_STREAM, cfg.phantom.seed, index]),
                lesion_count_range: if lesion_free { [0, 0] } else { cfg.phantom.lesion_count_range },
                ..cfg.phantom.clone()
            };
            let ph = generate_phantom(&pcfg)?;
            write_volume(&ph.ct, &study_path(dir, &id, "ct"))?;
            write_volume(&ph.pet, &study_path(dir, &id, "pet"))?;
            write_labels(&ph.tissues, &study_path(dir, &id, "tissues"))?;
            write_labels(&ph.lesions, &study_path(dir, &id, "lesions"))?;
            match split {
                "train" => manifest.train.push(id),
                "val" => manifest.val.push(id),
                "test" => manifest.test.push(id),
                _ => manifest.normal.push(id),
            }
            index += 1;
        }
    }
    manifest.write(dir)?;
    Ok(manifest)
}

/// A study as stored on disk, before cropping.
#[derive(Clone, Debug)]
pub struct RawStudy {
    pub id: String,
    pub ct: Volume,
    pub pet: Volume,
    pub tissues: Option<LabelMap>,
    pub lesions: Option<LabelMap>,
}

fn expect_modality(v: Volume, m: Modality, path: &Path) -> Result<Volume, CliError> {
    if v.modality() != m {
        return Err(CliError::Data(format!("{} has modality {:?}, expected {m:?}", path.display(), v.modality())));
    }
    Ok(v)
}

fn optional_labels(path: &Path, semantics: LabelSemantics) -> Result<Option<LabelMap>, CliError> {
    let (json, _) = mirrorseg::volumes::sidecar_paths(path);
    if json.exists() {
        Ok(Some(read_labels(path, semantics)?))
    } else {
        Ok(None)
    }
}

/// Loads the images of `id` and whichever label maps exist.
pub fn load_study(dir: &Path, id: &str, tissue_classes: u32) -> Result<RawStudy, CliError> {
    let ct_path = study_path(dir, id, "ct");
    let pet_path = study_path(dir, id, "pet");
    let ct = expect_modality(read_volume(&ct_path)?, Modality::CtHu, &ct_path)?;
    let pet = expect_modality(read_volume(&pet_path)?, Modality::PetSuv, &pet_path)?;
    if !ct.same_grid(pet.shape(), pet.spacing()) {
        return Err(CliError::Data(format!("study {id}: CT and PET grids differ")));
    }
    Ok(RawStudy {
        id: id.to_string(),
        tissues: optional_labels(
            &study_path(dir, id, "tissues"),
            LabelSemantics::TissueGroups { classes: tissue_classes },
        )?,
        lesions: optional_labels(&study_path(dir, id, "lesions"), LabelSemantics::BinaryMask)?,
        ct,
        pet,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data_dir = dir.to_path_buf();
        cfg.phantom.shape = [20, 20, 20];
        cfg.splits = crate::config::SplitCounts { train: 4, val: 1, test: 1, normal: 2 };
        cfg
    }

    #[test]
    fn phantoms_follow_the_split_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let m = write_phantoms(&cfg).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len(), m.normal.len()), (4, 1, 1, 2));
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
        for id in &m.normal {
            let s = load_study(dir.path(), id, 4).unwrap();
            assert_eq!(s.lesions.unwrap().count_nonzero(), 0);
        }
        for id in &m.train {
            let s = load_study(dir.path(), id, 4).unwrap();
            assert!(s.lesions.unwrap().count_nonzero() > 0);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_phantoms(&small(a.path())).unwrap();
        write_phantoms(&small(b.path())).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 8 * 8 + 1);
        for n in names {
            assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let m = Manifest { train: vec!["a".into()], val: vec!["a".into()], ..Manifest::default() };
        assert!(matches!(m.check(), Err(CliError::Data(_))));
    }
}
