//! Volumes, label maps and the geometric preprocessing that feeds the network.
//!
//! All grids are stored `D,H,W` row-major: the linear index of voxel
//! `(d, h, w)` is `(d * H + h) * W + w`.

mod io;
mod phantom;
mod preprocess;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{read_labels, read_volume, sidecar_paths, write_labels, write_volume, Dtype, Sidecar};
pub use phantom::{generate_phantom, Phantom, PhantomConfig};
pub use preprocess::{
    body_mask, crop_labels, crop_to_mask, flip_labels, flip_volume, pad_labels_to, pad_volume_to, paste_back,
    resample_trilinear, unpad,
};

pub type Shape3 = [usize; 3];
pub type Spacing3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "PET_SUV")]
    PetSuv,
    #[serde(rename = "CT_HU")]
    CtHu,
    /// Per-voxel lesion probability written by inference.
    #[serde(rename = "PROB")]
    Prob,
}

#[inline]
pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn linear_index(shape: Shape3, d: usize, h: usize, w: usize) -> usize {
    (d * shape[1] + h) * shape[2] + w
}

#[inline]
pub fn unravel(shape: Shape3, i: usize) -> [usize; 3] {
    let w = i % shape[2];
    let h = (i / shape[2]) % shape[1];
    let d = i / (shape[1] * shape[2]);
    [d, h, w]
}

fn check_geometry(shape: Shape3, spacing: Spacing3, len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero-sized shape {shape:?}")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Shape(format!("spacing must be positive, got {spacing:?}")));
    }
    if len != voxel_count(shape) {
        return Err(Error::Shape(format!("data length {len} does not match shape {shape:?}")));
    }
    Ok(())
}

/// A scalar 3D image: SUV for PET, HU for CT.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape3,
    spacing: Spacing3,
    modality: Modality,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, spacing: Spacing3, modality: Modality, data: Vec<f32>) -> Result<Self> {
        check_geometry(shape, spacing, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: unravel(shape, i) });
        }
        Ok(Self { shape, spacing, modality, data })
    }

    pub fn filled(shape: Shape3, spacing: Spacing3, modality: Modality, value: f32) -> Result<Self> {
        Self::new(shape, spacing, modality, vec![value; voxel_count(shape)])
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[linear_index(self.shape, d, h, w)]
    }

    pub fn voxel_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn same_grid(&self, other_shape: Shape3, other_spacing: Spacing3) -> bool {
        self.shape == other_shape && self.spacing == other_spacing
    }
}

/// What the integers of a [`LabelMap`] mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSemantics {
    /// Values in `{0, 1}`.
    BinaryMask,
    /// Values in `[0, classes)`.
    TissueGroups { classes: u32 },
    /// `0` for background, `1..=count` for components.
    ComponentLabels,
}

impl std::fmt::Display for LabelSemantics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelSemantics::BinaryMask => write!(f, "binary mask"),
            LabelSemantics::TissueGroups { classes } => write!(f, "tissue groups ({classes} classes)"),
            LabelSemantics::ComponentLabels => write!(f, "component labels"),
        }
    }
}

/// An integer map sharing a [`Volume`]'s geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    shape: Shape3,
    spacing: Spacing3,
    semantics: LabelSemantics,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(shape: Shape3, spacing: Spacing3, semantics: LabelSemantics, data: Vec<u32>) -> Result<Self> {
        check_geometry(shape, spacing, data.len())?;
        let bad = match semantics {
            LabelSemantics::BinaryMask => data.iter().find(|&&v| v > 1),
            LabelSemantics::TissueGroups { classes } => data.iter().find(|&&v| v >= classes),
            LabelSemantics::ComponentLabels => None,
        };
        if let Some(&value) = bad {
            return Err(Error::LabelValue { value, semantics: semantics.to_string() });
        }
        Ok(Self { shape, spacing, semantics, data })
    }

    pub fn zeros(shape: Shape3, spacing: Spacing3, semantics: LabelSemantics) -> Result<Self> {
        Self::new(shape, spacing, semantics, vec![0; voxel_count(shape)])
    }

    /// Binary mask from a predicate over linear indices.
    pub fn binary_from_fn(shape: Shape3, spacing: Spacing3, f: impl Fn(usize) -> bool) -> Result<Self> {
        let data = (0..voxel_count(shape)).map(|i| f(i) as u32).collect();
        Self::new(shape, spacing, LabelSemantics::BinaryMask, data)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn semantics(&self) -> LabelSemantics {
        self.semantics
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u32> {
        self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> u32 {
        self.data[linear_index(self.shape, d, h, w)]
    }

    /// Number of voxels with a nonzero label.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn voxel_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    pub fn matches(&self, shape: Shape3, spacing: Spacing3) -> bool {
        self.shape == shape && self.spacing == spacing
    }

    /// Re-tags the map after checking the values fit the new semantics.
    pub fn with_semantics(self, semantics: LabelSemantics) -> Result<Self> {
        Self::new(self.shape, self.spacing, semantics, self.data)
    }
}

/// Voxel box with inclusive `lo` and exclusive `hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn full(shape: Shape3) -> Self {
        Self { lo: [0; 3], hi: shape }
    }

    pub fn shape(&self) -> Shape3 {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]]
    }

    pub fn is_valid_in(&self, parent: Shape3) -> bool {
        (0..3).all(|a| self.lo[a] < self.hi[a] && self.hi[a] <= parent[a])
    }
}

/// Copies the sub-box `bbox` out of a row-major grid.
pub(crate) fn extract_box<T: Copy>(src: &[T], shape: Shape3, bbox: &BoundingBox) -> Vec<T> {
    let out_shape = bbox.shape();
    let mut out = Vec::with_capacity(voxel_count(out_shape));
    for d in bbox.lo[0]..bbox.hi[0] {
        for h in bbox.lo[1]..bbox.hi[1] {
            let start = linear_index(shape, d, h, bbox.lo[2]);
            out.extend_from_slice(&src[start..start + out_shape[2]]);
        }
    }
    out
}
