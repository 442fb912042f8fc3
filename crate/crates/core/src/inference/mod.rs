//! Whole-volume lesion probabilities from half-overlapping windows blended
//! with a Gaussian importance map, optionally averaged over all eight axis
//! mirrorings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volumes::{
    extract_box, flip_volume, linear_index, pad_volume_to, unpad, voxel_count, BoundingBox, LabelMap, Shape3,
};
use crate::{Dims, Error, Modality, Result, Tensor, Volume};

/// Anything mapping co-registered CT/PET patches `[1, 1, P, P, P]` to lesion
/// logits of the same shape.
pub trait LesionModel: Sync {
    fn lesion_logits(&self, ct: &Tensor, pet: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub patch: usize,
    pub sigma_scale: f64,
    pub threshold: f32,
    pub tta: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { patch: 32, sigma_scale: 0.125, threshold: 0.5, tta: true }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch < 2 {
            return Err(Error::Config(format!("inference patch {} below 2", self.patch)));
        }
        if !(self.sigma_scale > 0.0 && self.sigma_scale.is_finite()) {
            return Err(Error::Config(format!("sigma_scale must be positive, got {}", self.sigma_scale)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Window corners over a (padded) volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub patch: usize,
    pub stride: usize,
    /// Extent the corners refer to: the input shape raised to at least `patch`.
    pub shape: Shape3,
    pub corners: Vec<[usize; 3]>,
}

fn axis_positions(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&p| p + patch <= dim).collect();
    let last = dim - patch;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

pub fn plan_windows(shape: Shape3, patch: usize) -> Result<WindowPlan> {
    if patch == 0 {
        return Err(Error::Config("window size must be positive".into()));
    }
    let stride = (patch / 2).max(1);
    let padded = shape.map(|d| d.max(patch));
    let axes = padded.map(|d| axis_positions(d, patch, stride));
    let mut corners = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &d in &axes[0] {
        for &h in &axes[1] {
            for &w in &axes[2] {
                corners.push([d, h, w]);
            }
        }
    }
    Ok(WindowPlan { patch, stride, shape: padded, corners })
}

/// Gaussian importance weights over a `P³` window, peak 1 at the centre.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub patch: usize,
    pub data: Vec<f32>,
}

pub fn gaussian_weights(patch: usize, sigma_scale: f64) -> Result<WeightMap> {
    if patch < 2 || !(sigma_scale > 0.0 && sigma_scale.is_finite()) {
        return Err(Error::Config(format!("invalid weight map (P={patch}, sigma_scale={sigma_scale})")));
    }
    let sigma = sigma_scale * patch as f64;
    let c = (patch / 2) as f64;
    let g: Vec<f64> = (0..patch).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let mut data = Vec::with_capacity(patch.pow(3));
    for &a in &g {
        for &b in &g {
            for &e in &g {
                data.push((a * b * e) as f32);
            }
        }
    }
    // keep far corners strictly positive when the tails underflow
    let floor = data.iter().copied().filter(|&v| v > 0.0).fold(f32::INFINITY, f32::min);
    for v in &mut data {
        *v = v.max(floor);
    }
    Ok(WeightMap { patch, data })
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn patch_tensor(vol: &Volume, corner: [usize; 3], p: usize) -> Tensor {
    let bbox = BoundingBox { lo: corner, hi: [corner[0] + p, corner[1] + p, corner[2] + p] };
    Tensor::new(Dims::cube(1, 1, p), extract_box(vol.data(), vol.shape(), &bbox)).expect("window inside volume")
}

/// Windows evaluated per parallel batch; bounds memory on large volumes.
const WINDOW_CHUNK: usize = 32;

pub fn sliding_window_predict(
    model: &dyn LesionModel,
    ct: &Volume,
    pet: &Volume,
    patch: usize,
    sigma_scale: f64,
) -> Result<Volume> {
    if !ct.same_grid(pet.shape(), pet.spacing()) {
        return Err(Error::Shape(format!(
            "ct {:?} @ {:?} and pet {:?} @ {:?} are not aligned",
            ct.shape(),
            ct.spacing(),
            pet.shape(),
            pet.spacing()
        )));
    }
    let plan = plan_windows(ct.shape(), patch)?;
    let weights = gaussian_weights(patch, sigma_scale)?;
    let ct_p = pad_volume_to(ct, patch)?;
    let pet_p = pad_volume_to(pet, patch)?;
    let shape = plan.shape;
    let n = voxel_count(shape);
    let mut num = vec![0.0f64; n];
    let mut den = vec![0.0f64; n];
    for chunk in plan.corners.chunks(WINDOW_CHUNK) {
        let preds: Vec<Tensor> = chunk
            .par_iter()
            .map(|&c| {
                let out = model.lesion_logits(&patch_tensor(&ct_p, c, patch), &patch_tensor(&pet_p, c, patch))?;
                if out.dims() != Dims::cube(1, 1, patch) {
                    return Err(Error::Shape(format!("model returned {} for a {patch}^3 window", out.dims())));
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        for (&[d0, h0, w0], logits) in chunk.iter().zip(&preds) {
            let mut k = 0;
            for d in d0..d0 + patch {
                for h in h0..h0 + patch {
                    let row = linear_index(shape, d, h, w0);
                    for i in row..row + patch {
                        let w = weights.data[k] as f64;
                        num[i] += w * stable_sigmoid(logits.data()[k] as f64);
                        den[i] += w;
                        k += 1;
                    }
                }
            }
        }
    }
    let prob: Vec<f32> = num.iter().zip(&den).map(|(a, b)| (a / b).clamp(0.0, 1.0) as f32).collect();
    Volume::new(ct.shape(), ct.spacing(), Modality::Prob, unpad(&prob, shape, ct.shape()))
}

/// The eight axis-flip combinations, identity first.
pub fn flip_combinations() -> [[bool; 3]; 8] {
    std::array::from_fn(|i| [i & 4 != 0, i & 2 != 0, i & 1 != 0])
}

pub fn tta_predict(
    model: &dyn LesionModel,
    ct: &Volume,
    pet: &Volume,
    patch: usize,
    sigma_scale: f64,
) -> Result<Volume> {
    let mut acc = vec![0.0f64; voxel_count(ct.shape())];
    let combos = flip_combinations();
    for axes in combos {
        let p = sliding_window_predict(model, &flip_volume(ct, axes), &flip_volume(pet, axes), patch, sigma_scale)?;
        let back = flip_volume(&p, axes);
        acc.iter_mut().zip(back.data()).for_each(|(a, &v)| *a += v as f64);
    }
    let data = acc.iter().map(|v| (v / combos.len() as f64) as f32).collect();
    Volume::new(ct.shape(), ct.spacing(), Modality::Prob, data)
}

/// Strict `prob > threshold`.
pub fn binarize(prob: &Volume, threshold: f32) -> LabelMap {
    LabelMap::binary_from_fn(prob.shape(), prob.spacing(), |i| prob.data()[i] > threshold)
        .expect("volume geometry is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct Constant(f32);

    impl LesionModel for Constant {
        fn lesion_logits(&self, _ct: &Tensor, pet: &Tensor) -> Result<Tensor> {
            Ok(Tensor::filled(pet.dims(), self.0))
        }
    }

    /// Logit is a fixed function of the PET value at the same voxel.
    struct Pointwise;

    impl LesionModel for Pointwise {
        fn lesion_logits(&self, _ct: &Tensor, pet: &Tensor) -> Result<Tensor> {
            Ok(Tensor::from_fn(pet.dims(), |i| 2.0 * pet.data()[i] - 3.0))
        }
    }

    /// Depends on position within the window, so blending is visible.
    struct Positional;

    impl LesionModel for Positional {
        fn lesion_logits(&self, ct: &Tensor, pet: &Tensor) -> Result<Tensor> {
            let n = pet.data().len() as f32;
            Ok(Tensor::from_fn(pet.dims(), |i| pet.data()[i] - 0.2 * ct.data()[i] + 4.0 * i as f32 / n - 2.0))
        }
    }

    fn random_volume(shape: Shape3, modality: Modality, seed: u64) -> Volume {
        let mut rng = crate::seed::rng(seed);
        let data = (0..voxel_count(shape)).map(|_| rng.random::<f32>() * 3.0).collect();
        Volume::new(shape, [2.0; 3], modality, data).unwrap()
    }

    #[test]
    fn plan_examples() {
        assert_eq!(plan_windows([64; 3], 64).unwrap().corners, vec![[0, 0, 0]]);
        let p = plan_windows([96; 3], 64).unwrap();
        assert_eq!(p.corners.len(), 8);
        assert_eq!(axis_positions(96, 64, 32), vec![0, 32]);
        assert_eq!(axis_positions(100, 64, 32), vec![0, 32, 36]);
        let small = plan_windows([20, 64, 70], 32).unwrap();
        assert_eq!(small.shape, [32, 64, 70]);
    }

    #[test]
    fn plan_covers_every_voxel() {
        for shape in [[33, 40, 97], [32, 32, 32], [5, 70, 64]] {
            let plan = plan_windows(shape, 32).unwrap();
            let mut hit = vec![false; voxel_count(plan.shape)];
            for c in &plan.corners {
                for d in c[0]..c[0] + 32 {
                    for h in c[1]..c[1] + 32 {
                        for w in c[2]..c[2] + 32 {
                            hit[linear_index(plan.shape, d, h, w)] = true;
                        }
                    }
                }
            }
            assert!(hit.iter().all(|&h| h));
            for a in 0..3 {
                assert_eq!(plan.corners.iter().map(|c| c[a]).max().unwrap() + 32, plan.shape[a]);
            }
        }
    }

    #[test]
    fn weight_examples() {
        let w = gaussian_weights(64, 0.125).unwrap();
        let at = |d: usize, h: usize, x: usize| w.data[(d * 64 + h) * 64 + x];
        assert_eq!(at(32, 32, 32), 1.0);
        assert!(at(0, 0, 0) < 1.0 && at(0, 0, 0) > 0.0);
        assert!((at(40, 32, 32) as f64 - (-0.5f64).exp()).abs() < 1e-6);
        assert!(w.data.iter().all(|&v| v > 0.0 && v <= 1.0));
        let tiny = gaussian_weights(64, 0.01).unwrap();
        assert!(tiny.data.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn constant_model_gives_constant_map() {
        let expected = 1.0 / (1.0 + (-0.7f64).exp());
        for shape in [[40, 48, 36], [32, 32, 32], [20, 33, 50]] {
            let ct = random_volume(shape, Modality::CtHu, 1);
            let pet = random_volume(shape, Modality::PetSuv, 2);
            let p = sliding_window_predict(&Constant(0.7), &ct, &pet, 16, 0.125).unwrap();
            assert_eq!(p.shape(), shape);
            assert!(p.data().iter().all(|&v| (v as f64 - expected).abs() < 1e-6));
        }
    }

    #[test]
    fn single_window_equals_direct_pass() {
        let ct = random_volume([16; 3], Modality::CtHu, 3);
        let pet = random_volume([16; 3], Modality::PetSuv, 4);
        let p = sliding_window_predict(&Positional, &ct, &pet, 16, 0.125).unwrap();
        let direct = Positional.lesion_logits(&patch_tensor(&ct, [0; 3], 16), &patch_tensor(&pet, [0; 3], 16)).unwrap();
        for (a, l) in p.data().iter().zip(direct.data()) {
            assert!((*a as f64 - stable_sigmoid(*l as f64)).abs() < 1e-6);
        }
    }

    #[test]
    fn blending_matches_brute_force() {
        let shape = [24, 24, 24];
        let (p, s) = (16, 0.125);
        let ct = random_volume(shape, Modality::CtHu, 5);
        let pet = random_volume(shape, Modality::PetSuv, 6);
        let out = sliding_window_predict(&Positional, &ct, &pet, p, s).unwrap();
        let plan = plan_windows(shape, p).unwrap();
        let w = gaussian_weights(p, s).unwrap();
        let preds: Vec<Tensor> = plan
            .corners
            .iter()
            .map(|&c| Positional.lesion_logits(&patch_tensor(&ct, c, p), &patch_tensor(&pet, c, p)).unwrap())
            .collect();
        for i in (0..voxel_count(shape)).step_by(13) {
            let [d, h, x] = crate::volumes::unravel(shape, i);
            let (mut num, mut den) = (0.0, 0.0);
            for (c, pr) in plan.corners.iter().zip(&preds) {
                let inside = (0..3).all(|a| [d, h, x][a] >= c[a] && [d, h, x][a] < c[a] + p);
                if inside {
                    let k = ((d - c[0]) * p + (h - c[1])) * p + (x - c[2]);
                    num += w.data[k] as f64 * stable_sigmoid(pr.data()[k] as f64);
                    den += w.data[k] as f64;
                }
            }
            assert!((out.data()[i] as f64 - num / den).abs() < 1e-5);
        }
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let ct = random_volume([16; 3], Modality::CtHu, 1);
        let pet = random_volume([16, 16, 17], Modality::PetSuv, 1);
        assert!(matches!(sliding_window_predict(&Constant(0.0), &ct, &pet, 16, 0.125), Err(Error::Shape(_))));
    }

    #[test]
    fn tta_of_pointwise_model_is_single_pass() {
        let shape = [20, 24, 18];
        let ct = random_volume(shape, Modality::CtHu, 7);
        let pet = random_volume(shape, Modality::PetSuv, 8);
        let single = sliding_window_predict(&Pointwise, &ct, &pet, 16, 0.125).unwrap();
        let tta = tta_predict(&Pointwise, &ct, &pet, 16, 0.125).unwrap();
        for (a, b) in single.data().iter().zip(tta.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tta_changes_positional_model() {
        let shape = [20, 24, 18];
        let ct = random_volume(shape, Modality::CtHu, 9);
        let pet = random_volume(shape, Modality::PetSuv, 10);
        let single = sliding_window_predict(&Positional, &ct, &pet, 16, 0.125).unwrap();
        let tta = tta_predict(&Positional, &ct, &pet, 16, 0.125).unwrap();
        let diff: f32 = single.data().iter().zip(tta.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0);
        assert!(tta.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn binarize_is_strict() {
        let mut data = vec![0.0f32; 8];
        data[3] = 0.5;
        data[4] = 0.500_001;
        let prob = Volume::new([2, 2, 2], [1.0; 3], Modality::Prob, data).unwrap();
        let m = binarize(&prob, 0.5);
        assert_eq!(m.data(), &[0, 0, 0, 0, 1, 0, 0, 0]);
        let zero = Volume::filled([2, 2, 2], [1.0; 3], Modality::Prob, 0.0).unwrap();
        assert_eq!(binarize(&zero, 0.5).count_nonzero(), 0);
    }

    #[test]
    fn flip_combinations_are_distinct() {
        let c = flip_combinations();
        assert_eq!(c[0], [false; 3]);
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(c[i], c[j]);
            }
        }
    }
}
