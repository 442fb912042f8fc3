//! Synthetic PET/CT studies: an ellipsoidal body with organ ellipsoids of
//! distinct HU, per-tissue background uptake and hot spherical lesions.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{linear_index, voxel_count, LabelMap, LabelSemantics, Modality, Shape3, Spacing3, Volume};
use crate::{seed, Error, Result};

const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub shape: Shape3,
    pub spacing_mm: Spacing3,
    /// Class 0 is outside the body, class 1 generic body tissue, the rest organs.
    pub tissue_class_count: u32,
    pub lesion_count_range: [usize; 2],
    pub lesion_radius_range_mm: [f64; 2],
    pub lesion_suv_range: [f32; 2],
    pub background_suv_range: [f32; 2],
    pub hu_per_tissue: Vec<f32>,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [64, 64, 64],
            spacing_mm: [2.0; 3],
            tissue_class_count: 4,
            lesion_count_range: [1, 3],
            lesion_radius_range_mm: [5.0, 10.0],
            lesion_suv_range: [4.0, 8.0],
            background_suv_range: [0.5, 1.5],
            hu_per_tissue: vec![
                -1000.0, 40.0, -750.0, 60.0, 700.0, -100.0, 20.0, 300.0, 80.0, -500.0, 10.0, 150.0, 45.0, 1000.0,
                -300.0, 30.0,
            ],
            noise_std: 0.2,
            seed: 0,
        }
    }
}

fn range_ok<T: PartialOrd>(r: &[T; 2]) -> bool {
    r[0] <= r[1]
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        if self.shape.iter().any(|&n| n < 4) {
            return fail("every axis needs at least 4 voxels");
        }
        if self.spacing_mm.iter().any(|s| !(*s > 0.0)) {
            return fail("spacing must be positive");
        }
        if !(2..=16).contains(&self.tissue_class_count) {
            return fail("tissue_class_count must be in [2, 16]");
        }
        if self.hu_per_tissue.len() < self.tissue_class_count as usize {
            return fail("hu_per_tissue shorter than tissue_class_count");
        }
        let used = &self.hu_per_tissue[..self.tissue_class_count as usize];
        for (i, a) in used.iter().enumerate() {
            if used[i + 1..].contains(a) {
                return fail("tissue HU values must be distinct");
            }
        }
        if !range_ok(&self.lesion_count_range)
            || !range_ok(&self.lesion_radius_range_mm)
            || !range_ok(&self.lesion_suv_range)
            || !range_ok(&self.background_suv_range)
        {
            return fail("ranges must be nonempty");
        }
        if !(self.lesion_radius_range_mm[0] > 0.0) {
            return fail("lesion radius must be positive");
        }
        if !(self.lesion_suv_range[0] > self.background_suv_range[1]) {
            return fail("lesion SUV range must lie strictly above background SUV range");
        }
        if !(self.noise_std >= 0.0) {
            return fail("noise_std must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub ct: Volume,
    pub pet: Volume,
    pub tissues: LabelMap,
    pub lesions: LabelMap,
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let shape = cfg.shape;
    let n = voxel_count(shape);
    let mut rng = seed::rng(cfg.seed);

    let body = Ellipsoid {
        center: std::array::from_fn(|a| (shape[a] as f64 - 1.0) / 2.0 + rng.random_range(-1.0..=1.0)),
        axes: std::array::from_fn(|a| shape[a] as f64 * rng.random_range(0.40..=0.46)),
    };
    let organs: Vec<Ellipsoid> = (2..cfg.tissue_class_count)
        .map(|_| {
            let axes = std::array::from_fn(|a| body.axes[a] * rng.random_range(0.18..=0.32));
            let center = std::array::from_fn(|a| body.center[a] + body.axes[a] * rng.random_range(-0.45..=0.45));
            Ellipsoid { center, axes }
        })
        .collect();

    let mut tissues = vec![0u32; n];
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let p = [d as f64, h as f64, w as f64];
                if !body.contains(p) {
                    continue;
                }
                let mut class = 1;
                for (k, organ) in organs.iter().enumerate() {
                    if organ.contains(p) {
                        class = k as u32 + 2;
                    }
                }
                tissues[linear_index(shape, d, h, w)] = class;
            }
        }
    }

    let ct: Vec<f32> = tissues.iter().map(|&c| cfg.hu_per_tissue[c as usize]).collect();
    let uptake: Vec<f32> = (0..cfg.tissue_class_count)
        .map(|c| if c == 0 { 0.0 } else { rng.random_range(cfg.background_suv_range[0]..=cfg.background_suv_range[1]) })
        .collect();
    let mut pet: Vec<f32> = tissues.iter().map(|&c| uptake[c as usize]).collect();

    let lesion_count = rng.random_range(cfg.lesion_count_range[0]..=cfg.lesion_count_range[1]);
    let mut lesions = vec![0u32; n];
    for lesion in 0..lesion_count {
        let voxels =
            place_lesion(cfg, &tissues, &mut rng).ok_or(Error::Placement { lesion, attempts: PLACEMENT_ATTEMPTS })?;
        let suv = rng.random_range(cfg.lesion_suv_range[0]..=cfg.lesion_suv_range[1]);
        for i in voxels {
            lesions[i] = 1;
            pet[i] = suv;
        }
    }

    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0f32, cfg.noise_std).expect("validated std");
        for v in pet.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let spacing = cfg.spacing_mm;
    Ok(Phantom {
        ct: Volume::new(shape, spacing, Modality::CtHu, ct)?,
        pet: Volume::new(shape, spacing, Modality::PetSuv, pet)?,
        tissues: LabelMap::new(
            shape,
            spacing,
            LabelSemantics::TissueGroups { classes: cfg.tissue_class_count },
            tissues,
        )?,
        lesions: LabelMap::new(shape, spacing, LabelSemantics::BinaryMask, lesions)?,
    })
}

/// Draws spheres until one lies entirely inside the body; returns its voxels.
fn place_lesion(cfg: &PhantomConfig, tissues: &[u32], rng: &mut impl Rng) -> Option<Vec<usize>> {
    let shape = cfg.shape;
    let sp = cfg.spacing_mm;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let r = rng.random_range(cfg.lesion_radius_range_mm[0]..=cfg.lesion_radius_range_mm[1]);
        let center: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.0..(shape[a] - 1) as f64));
        let lo: [usize; 3] = std::array::from_fn(|a| (center[a] - r / sp[a]).floor().max(0.0) as usize);
        let hi: [usize; 3] = std::array::from_fn(|a| ((center[a] + r / sp[a]).ceil() as usize).min(shape[a] - 1));
        let mut voxels = Vec::new();
        let mut inside = true;
        'scan: for d in lo[0]..=hi[0] {
            for h in lo[1]..=hi[1] {
                for w in lo[2]..=hi[2] {
                    let dist2: f64 =
                        [d, h, w].iter().enumerate().map(|(a, &x)| ((x as f64 - center[a]) * sp[a]).powi(2)).sum();
                    if dist2 > r * r {
                        continue;
                    }
                    let i = linear_index(shape, d, h, w);
                    if tissues[i] == 0 {
                        inside = false;
                        break 'scan;
                    }
                    voxels.push(i);
                }
            }
        }
        if inside && !voxels.is_empty() {
            return Some(voxels);
        }
    }
    None
}
