//! The `train`, `infer` and `eval` pipelines.

use std::fs;
use std::path::{Path, PathBuf};

use mirrorseg::inference::{binarize, sliding_window_predict, tta_predict};
use mirrorseg::metrics::{evaluate_cohort, CohortItem};
use mirrorseg::optimize::{train_stage, DirMonitor, StageOutcome, TrainData};
use mirrorseg::sampler::Study;
use mirrorseg::volumes::{body_mask, crop_to_mask, paste_back, read_labels, write_labels, write_volume};
use mirrorseg::{
    seed, CohortReport, LabelMap, LabelSemantics, LesionModel, MirrorNet, Modality, Stage, TrainConfig, Volume,
};

use crate::config::RunConfig;
use crate::dataset::{load_study, Manifest, RawStudy};
use crate::CliError;

pub const MODEL_NAME: &str = "mirror_final";
const INIT_STREAM: u64 = 0x494e_4954;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Studies with both label maps, cropped and padded for training.
pub fn prepare_for_training(raw: &[RawStudy], cfg: &RunConfig) -> Result<Vec<Study>, CliError> {
    raw.iter()
        .map(|s| {
            let (Some(t), Some(l)) = (&s.tissues, &s.lesions) else {
                return Err(CliError::Data(format!("study {} lacks tissue or lesion labels", s.id)));
            };
            Study::prepare(&s.id, &s.ct, &s.pet, t, l, &cfg.prepare, cfg.ct_train.patch_size)
                .map_err(|e| CliError::Data(format!("study {}: {e}", s.id)))
        })
        .collect()
}

pub fn load_split(cfg: &RunConfig, ids: &[String]) -> Result<Vec<RawStudy>, CliError> {
    let classes = cfg.network.ct.out_channels as u32;
    ids.iter().map(|id| load_study(&cfg.data_dir, id, classes)).collect()
}

/// Stage seeds mix the run seed with the stage's own seed.
pub fn stage_config(cfg: &RunConfig, stage: Stage) -> TrainConfig {
    let base = match stage {
        Stage::Ct => &cfg.ct_train,
        Stage::Pet => &cfg.pet_train,
    };
    TrainConfig { seed: seed::derive(cfg.seed, &[stage as u64 + 1, base.seed]), ..base.clone() }
}

pub fn fresh_network(cfg: &RunConfig) -> Result<MirrorNet, CliError> {
    Ok(MirrorNet::new(cfg.network, seed::derive(cfg.seed, &[INIT_STREAM]))?)
}

/// Lesion probabilities over the full grid. The model sees the body-cropped
/// region; voxels outside it get probability 0.
pub fn predict(model: &dyn LesionModel, ct: &Volume, pet: &Volume, cfg: &RunConfig) -> Result<Volume, CliError> {
    let body = body_mask(ct, cfg.prepare.hu_threshold)?;
    let (ct_c, bbox) = crop_to_mask(ct, &body, cfg.prepare.margin_vox)?;
    let (pet_c, _) = crop_to_mask(pet, &body, cfg.prepare.margin_vox)?;
    let inf = &cfg.inference;
    let prob = if inf.tta {
        tta_predict(model, &ct_c, &pet_c, inf.patch, inf.sigma_scale)?
    } else {
        sliding_window_predict(model, &ct_c, &pet_c, inf.patch, inf.sigma_scale)?
    };
    let mut full = vec![0f32; ct.data().len()];
    paste_back(&mut full, ct.shape(), prob.data(), &bbox)?;
    Ok(Volume::new(ct.shape(), ct.spacing(), Modality::Prob, full)?)
}

/// Predicted masks scored against each study's lesion labels.
pub fn evaluate_split(
    model: &dyn LesionModel,
    studies: &[RawStudy],
    cfg: &RunConfig,
) -> Result<CohortReport, CliError> {
    let preds = studies
        .iter()
        .map(|s| Ok(binarize(&predict(model, &s.ct, &s.pet, cfg)?, cfg.inference.threshold)))
        .collect::<Result<Vec<LabelMap>, CliError>>()?;
    let items = studies
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            let gt =
                s.lesions.as_ref().ok_or_else(|| CliError::Data(format!("study {} has no lesion labels", s.id)))?;
            Ok((s.id.as_str(), p, gt))
        })
        .collect::<Result<Vec<CohortItem>, CliError>>()?;
    Ok(evaluate_cohort(&items, cfg.connectivity)?)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub ct: StageOutcome,
    pub pet: StageOutcome,
    pub model: PathBuf,
    pub val: Option<CohortReport>,
    pub normal: Option<CohortReport>,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// CT stage, freeze, PET stage with averaging, then validation reports.
pub fn run_train(cfg: &RunConfig, verbose: bool) -> Result<(MirrorNet, TrainSummary), CliError> {
    let manifest = Manifest::read(&cfg.data_dir)?;
    let train_raw = load_split(cfg, &manifest.train)?;
    let val_raw = load_split(cfg, &manifest.val)?;
    let normal_raw = load_split(cfg, &manifest.normal)?;
    let train = prepare_for_training(&train_raw, cfg)?;
    let val = prepare_for_training(&val_raw, cfg)?;
    let data = TrainData { train: &train, val: &val };

    let out = &cfg.output_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;
    write_text(&out.join("run_config.json"), &(cfg.to_json() + "\n"))?;

    let mut net = fresh_network(cfg)?;
    let mut outcomes = Vec::new();
    for stage in [Stage::Ct, Stage::Pet] {
        let csv = out.join(format!("loss_{stage}.csv"));
        if csv.exists() {
            fs::remove_file(&csv).map_err(|e| io_err(&csv, e))?;
        }
        let mut monitor = DirMonitor::new(&ckpt_dir, &csv)?;
        monitor.verbose = verbose;
        if stage == Stage::Pet {
            net.freeze_ct();
        }
        let scfg = stage_config(cfg, stage);
        let outcome = train_stage(&mut net, data, &scfg, &cfg.augment, &mut monitor)
            .map_err(|e| CliError::Training(format!("{stage} stage: {e}")))?;
        outcomes.push(outcome);
    }
    let pet = outcomes.pop().expect("two stages");
    let ct = outcomes.pop().expect("two stages");

    let model = out.join(MODEL_NAME);
    let meta =
        [("config_hash".to_string(), cfg.model_hash()?), ("swa_epochs".to_string(), format!("{:?}", pet.swa_epochs))]
            .into_iter()
            .collect();
    net.save(&model, &meta)?;

    let report = |studies: &[RawStudy], name: &str| -> Result<Option<CohortReport>, CliError> {
        if studies.is_empty() {
            return Ok(None);
        }
        let r = evaluate_split(&net, studies, cfg)?;
        write_text(&out.join(name), &r.to_csv())?;
        Ok(Some(r))
    };
    let val_report = report(&val_raw, "val_report.csv")?;
    let normal_report = report(&normal_raw, "normal_report.csv")?;
    Ok((net, TrainSummary { ct, pet, model, val: val_report, normal: normal_report }))
}

/// Writes `<id>_prob` and `<id>_mask` for each study into `out_dir`.
pub fn run_infer(cfg: &RunConfig, model: &Path, ids: &[String], out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (net, _) = MirrorNet::load(cfg.network, model)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut written = Vec::new();
    for id in ids {
        let s = load_study(&cfg.data_dir, id, cfg.network.ct.out_channels as u32)?;
        let prob = predict(&net, &s.ct, &s.pet, cfg)?;
        let mask = binarize(&prob, cfg.inference.threshold);
        let prob_path = out_dir.join(format!("{id}_prob"));
        let mask_path = out_dir.join(format!("{id}_mask"));
        write_volume(&prob, &prob_path)?;
        write_labels(&mask, &mask_path)?;
        written.push(prob_path);
        written.push(mask_path);
    }
    Ok(written)
}

/// Ids of `<id><suffix>.json` files in `dir`, sorted.
fn ids_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<String>, CliError> {
    let wanted = format!("{suffix}.json");
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let name = entry.map_err(|e| io_err(dir, e))?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(&wanted)) {
            if !id.is_empty() {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Scores every `<id><pred_suffix>` mask against `<id><gt_suffix>`. Ground
/// truth without a prediction is ignored.
pub fn run_eval(
    pred_dir: &Path,
    gt_dir: &Path,
    pred_suffix: &str,
    gt_suffix: &str,
    cfg: &RunConfig,
) -> Result<CohortReport, CliError> {
    let pred_ids = ids_with_suffix(pred_dir, pred_suffix)?;
    let gt_ids = ids_with_suffix(gt_dir, gt_suffix)?;
    if pred_ids.is_empty() {
        return Err(CliError::Data(format!("no *{pred_suffix} masks in {}", pred_dir.display())));
    }
    let missing: Vec<&String> = pred_ids.iter().filter(|id| !gt_ids.contains(id)).collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!("no ground truth in {} for {missing:?}", gt_dir.display())));
    }
    let load = |dir: &Path, id: &str, suffix: &str| {
        read_labels(&dir.join(format!("{id}{suffix}")), LabelSemantics::BinaryMask)
    };
    let pairs = pred_ids
        .iter()
        .map(|id| Ok((load(pred_dir, id, pred_suffix)?, load(gt_dir, id, gt_suffix)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let items: Vec<CohortItem> = pred_ids.iter().zip(&pairs).map(|(id, (p, g))| (id.as_str(), p, g)).collect();
    Ok(evaluate_cohort(&items, cfg.connectivity)?)
}
