use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dice, false_negative_volume, false_positive_volume, Connectivity};
use crate::volumes::LabelMap;
use crate::{Error, Result};

const HEADER: &str = "study_id,dice,fnv_ml,fpv_ml";
const MEAN_ROW: &str = "MEAN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyMetrics {
    pub study_id: String,
    pub dice: f64,
    pub fnv_ml: f64,
    pub fpv_ml: f64,
}

impl StudyMetrics {
    pub fn compute(study_id: &str, pred: &LabelMap, gt: &LabelMap, connectivity: Connectivity) -> Result<Self> {
        Ok(Self {
            study_id: study_id.to_string(),
            dice: dice(pred, gt)?,
            fnv_ml: false_negative_volume(pred, gt, connectivity)?,
            fpv_ml: false_positive_volume(pred, gt, connectivity)?,
        })
    }
}

/// Per-study metrics with their arithmetic means (zero-valued studies count).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub studies: Vec<StudyMetrics>,
    pub mean_dice: f64,
    pub mean_fnv_ml: f64,
    pub mean_fpv_ml: f64,
}

impl CohortReport {
    pub fn from_studies(studies: Vec<StudyMetrics>) -> Result<Self> {
        if studies.is_empty() {
            return Err(Error::Config("cohort report needs at least one study".to_string()));
        }
        let n = studies.len() as f64;
        let mean = |f: fn(&StudyMetrics) -> f64| studies.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mean_dice: mean(|s| s.dice),
            mean_fnv_ml: mean(|s| s.fnv_ml),
            mean_fpv_ml: mean(|s| s.fpv_ml),
            studies,
        })
    }

    /// CSV with a header, one row per study and a trailing `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for s in &self.studies {
            out.push_str(&format!("{},{},{},{}\n", s.study_id, s.dice, s.fnv_ml, s.fpv_ml));
        }
        out.push_str(&format!("{MEAN_ROW},{},{},{}\n", self.mean_dice, self.mean_fnv_ml, self.mean_fpv_ml));
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("metrics csv: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing header".to_string()));
        }
        let mut studies = Vec::new();
        let mut mean = None;
        for line in lines.filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad(format!("expected 4 columns in {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            let row = (num(cols[1])?, num(cols[2])?, num(cols[3])?);
            if cols[0] == MEAN_ROW {
                mean = Some(row);
            } else {
                studies.push(StudyMetrics { study_id: cols[0].to_string(), dice: row.0, fnv_ml: row.1, fpv_ml: row.2 });
            }
        }
        let report = Self::from_studies(studies)?;
        match mean {
            Some((d, fnv, fpv)) if (d, fnv, fpv) == (report.mean_dice, report.mean_fnv_ml, report.mean_fpv_ml) => {
                Ok(report)
            }
            Some(_) => Err(bad("MEAN row disagrees with the study rows".to_string())),
            None => Err(bad("missing MEAN row".to_string())),
        }
    }
}

/// One study to score: `(study_id, prediction, ground truth)`.
pub type CohortItem<'a> = (&'a str, &'a LabelMap, &'a LabelMap);

/// Scores every study (in parallel) and reports in input order.
pub fn evaluate_cohort(items: &[CohortItem<'_>], connectivity: Connectivity) -> Result<CohortReport> {
    for (id, _, _) in items {
        if id.is_empty() || id.contains([',', '\n', '\r', '"']) || *id == MEAN_ROW {
            return Err(Error::Config(format!("study id {id:?} is not CSV-safe")));
        }
    }
    let studies = items
        .par_iter()
        .map(|(id, pred, gt)| {
            StudyMetrics::compute(id, pred, gt, connectivity).map_err(|e| Error::Config(format!("study {id}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    CohortReport::from_studies(studies)
}
