//! Training patches: study preparation, grid enumeration, lesion/background
//! balancing per epoch, and augmentation.

mod augment;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, blur, rotate_scale, AugmentConfig, Patch};

use crate::volumes::{
    body_mask, crop_labels, crop_to_mask, linear_index, pad_labels_to, pad_volume_to, BoundingBox, LabelMap, Modality,
    Shape3, Volume,
};
use crate::{seed, Error, Result};

/// Body-crop parameters used when preparing a study for training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub hu_threshold: f32,
    pub margin_vox: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self { hu_threshold: -500.0, margin_vox: 0 }
    }
}

/// One co-registered study cropped to its body contour and padded to at
/// least the patch size.
#[derive(Clone, Debug)]
pub struct Study {
    pub id: String,
    pub ct: Volume,
    pub pet: Volume,
    pub tissues: LabelMap,
    pub lesions: LabelMap,
    pub body: LabelMap,
    /// Crop box in the original grid.
    pub bbox: BoundingBox,
}

impl Study {
    pub fn prepare(
        id: impl Into<String>,
        ct: &Volume,
        pet: &Volume,
        tissues: &LabelMap,
        lesions: &LabelMap,
        cfg: &PrepareConfig,
        patch: usize,
    ) -> Result<Self> {
        if ct.modality() != Modality::CtHu || pet.modality() != Modality::PetSuv {
            return Err(Error::Shape("study needs a CT_HU and a PET_SUV volume".into()));
        }
        let (shape, spacing) = (ct.shape(), ct.spacing());
        if !pet.same_grid(shape, spacing) || !tissues.matches(shape, spacing) || !lesions.matches(shape, spacing) {
            return Err(Error::Shape("study volumes are not on one grid".into()));
        }
        let body = body_mask(ct, cfg.hu_threshold)?;
        let (ct_c, bbox) = crop_to_mask(ct, &body, cfg.margin_vox)?;
        let (pet_c, _) = crop_to_mask(pet, &body, cfg.margin_vox)?;
        Ok(Self {
            id: id.into(),
            ct: pad_volume_to(&ct_c, patch)?,
            pet: pad_volume_to(&pet_c, patch)?,
            tissues: pad_labels_to(&crop_labels(tissues, &bbox)?, patch)?,
            lesions: pad_labels_to(&crop_labels(lesions, &bbox)?, patch)?,
            body: pad_labels_to(&crop_labels(&body, &bbox)?, patch)?,
            bbox,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.ct.shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchIndex {
    /// Position of the study in the caller's study list.
    pub study: usize,
    pub corner: [usize; 3],
    pub size: usize,
    pub has_lesion: bool,
}

/// Grid positions along one axis: multiples of `stride`, with the last
/// window clamped to end at the edge.
pub fn axis_positions(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&p| p + patch <= len).collect();
    if *out.last().unwrap() + patch < len {
        out.push(len - patch);
    }
    out
}

fn box_any(labels: &LabelMap, corner: [usize; 3], p: usize) -> bool {
    let shape = labels.shape();
    let data = labels.data();
    (0..p).any(|d| {
        (0..p).any(|h| {
            let row = linear_index(shape, corner[0] + d, corner[1] + h, corner[2]);
            data[row..row + p].iter().any(|&v| v != 0)
        })
    })
}

/// Patches on a regular grid, keeping those touching the body mask.
pub fn enumerate_patches(study: &Study, study_index: usize, patch: usize, stride: usize) -> Result<Vec<PatchIndex>> {
    let shape = study.shape();
    if patch == 0 || stride == 0 {
        return Err(Error::Config("patch size and stride must be positive".into()));
    }
    if shape.iter().any(|&n| n < patch) {
        return Err(Error::Shape(format!("study {} of shape {shape:?} is smaller than patch {patch}", study.id)));
    }
    let axes: Vec<Vec<usize>> = shape.iter().map(|&n| axis_positions(n, patch, stride)).collect();
    let mut out = Vec::new();
    for &d in &axes[0] {
        for &h in &axes[1] {
            for &w in &axes[2] {
                let corner = [d, h, w];
                if box_any(&study.body, corner, patch) {
                    out.push(PatchIndex {
                        study: study_index,
                        corner,
                        size: patch,
                        has_lesion: box_any(&study.lesions, corner, patch),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Every lesion patch plus an equally sized uniform draw of lesion-free
/// patches, shuffled.
pub fn balance_epoch(patches: &[PatchIndex], epoch_seed: u64) -> Result<Vec<PatchIndex>> {
    let (lesion, background): (Vec<PatchIndex>, Vec<PatchIndex>) = patches.iter().partition(|p| p.has_lesion);
    if lesion.is_empty() {
        return Err(Error::NoLesionPatches);
    }
    let mut rng = seed::rng(epoch_seed);
    let n = lesion.len();
    let mut out = lesion;
    if background.len() >= n {
        out.extend(index::sample(&mut rng, background.len(), n).into_iter().map(|i| background[i]));
    } else if !background.is_empty() {
        out.extend((0..n).map(|_| background[rng.random_range(0..background.len())]));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

fn crop_cube<T: Copy>(data: &[T], shape: Shape3, corner: [usize; 3], p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(p * p * p);
    for d in 0..p {
        for h in 0..p {
            let row = linear_index(shape, corner[0] + d, corner[1] + h, corner[2]);
            out.extend_from_slice(&data[row..row + p]);
        }
    }
    out
}

pub fn extract_patch(study: &Study, idx: &PatchIndex) -> Result<Patch> {
    let shape = study.shape();
    let p = idx.size;
    if (0..3).any(|a| idx.corner[a] + p > shape[a]) {
        return Err(Error::Shape(format!("patch at {:?} exceeds study {shape:?}", idx.corner)));
    }
    Ok(Patch {
        size: p,
        ct: crop_cube(study.ct.data(), shape, idx.corner, p),
        pet: crop_cube(study.pet.data(), shape, idx.corner, p),
        tissues: crop_cube(study.tissues.data(), shape, idx.corner, p),
        lesions: crop_cube(study.lesions.data(), shape, idx.corner, p),
    })
}
