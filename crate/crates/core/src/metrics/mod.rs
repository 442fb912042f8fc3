//! Lesion-segmentation metrics: Dice, false-positive volume and
//! false-negative volume, the latter two defined over 3D connected components.

mod components;
mod report;

pub use components::{connected_components, label_components, Connectivity};
pub use report::{evaluate_cohort, CohortItem, CohortReport, StudyMetrics};

use crate::volumes::LabelMap;
use crate::{Error, Result};

fn check_aligned(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if !pred.matches(gt.shape(), gt.spacing()) {
        return Err(Error::Shape(format!(
            "prediction {:?}@{:?} vs ground truth {:?}@{:?}",
            pred.shape(),
            pred.spacing(),
            gt.shape(),
            gt.spacing()
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`, and 0 when both masks are empty.
pub fn dice(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    check_aligned(pred, gt)?;
    let (mut inter, mut p, mut g) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as u64;
        p += a as u64;
        g += b as u64;
    }
    if p + g == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Total volume (ml) of the components of `a` that touch no voxel of `b`.
fn untouched_component_volume(a: &LabelMap, b: &LabelMap, connectivity: Connectivity) -> Result<f64> {
    check_aligned(a, b)?;
    let fg: Vec<bool> = a.data().iter().map(|&v| v != 0).collect();
    let (labels, count) = label_components(a.shape(), &fg, connectivity);
    let mut size = vec![0u64; count + 1];
    let mut touched = vec![false; count + 1];
    for (&l, &other) in labels.iter().zip(b.data()) {
        if l != 0 {
            size[l as usize] += 1;
            touched[l as usize] |= other != 0;
        }
    }
    let voxels: u64 = (1..=count).filter(|&l| !touched[l]).map(|l| size[l]).sum();
    Ok(voxels as f64 * a.voxel_ml())
}

/// Volume (ml) of predicted components with zero ground-truth overlap.
pub fn false_positive_volume(pred: &LabelMap, gt: &LabelMap, connectivity: Connectivity) -> Result<f64> {
    untouched_component_volume(pred, gt, connectivity)
}

/// Volume (ml) of ground-truth components with zero predicted overlap.
pub fn false_negative_volume(pred: &LabelMap, gt: &LabelMap, connectivity: Connectivity) -> Result<f64> {
    untouched_component_volume(gt, pred, connectivity)
}
