//! Spatial and intensity augmentation of a PET/CT/label patch.
//!
//! Draws come from one ChaCha stream per patch in a fixed order: rotation,
//! scaling, then per modality (PET, CT) noise, blur, contrast, gamma, and
//! finally mirroring.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volumes::{linear_index, Shape3};
use crate::{seed, Error, Result};

/// A cubic training patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub ct: Vec<f32>,
    pub pet: Vec<f32>,
    pub tissues: Vec<u32>,
    pub lesions: Vec<u32>,
}

impl Patch {
    pub fn shape(&self) -> Shape3 {
        [self.size; 3]
    }

    fn check(&self) -> Result<()> {
        let n = self.size.pow(3);
        if [self.ct.len(), self.pet.len(), self.tissues.len(), self.lesions.len()] != [n; 4] {
            return Err(Error::Shape(format!("patch arrays do not match size {}", self.size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transform {
    pub p: f64,
    pub range: [f64; 2],
}

impl Transform {
    const fn new(p: f64, lo: f64, hi: f64) -> Self {
        Self { p, range: [lo, hi] }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Option<f64> {
        (rng.random::<f64>() < self.p).then(|| self.sample(rng))
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let [lo, hi] = self.range;
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Sigma in voxels.
    pub blur: Transform,
    /// Sigma as a fraction of the patch's channel standard deviation.
    pub noise: Transform,
    pub contrast: Transform,
    /// Angle in degrees, drawn independently about each axis.
    pub rotation: Transform,
    pub scaling: Transform,
    pub gamma: Transform,
    /// Per-axis flip probability.
    pub mirror_p: [f64; 3],
    /// Base seed mixed into every per-patch draw seed.
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            blur: Transform::new(0.2, 0.5, 1.0),
            noise: Transform::new(0.1, 0.0, 0.1),
            contrast: Transform::new(0.15, 0.75, 1.25),
            rotation: Transform::new(0.2, -30.0, 30.0),
            scaling: Transform::new(0.2, 0.7, 1.4),
            gamma: Transform::new(0.3, 0.7, 1.5),
            mirror_p: [0.5; 3],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every probability zero: augmentation is the identity.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        for t in [&mut c.blur, &mut c.noise, &mut c.contrast, &mut c.rotation, &mut c.scaling, &mut c.gamma] {
            t.p = 0.0;
        }
        c.mirror_p = [0.0; 3];
        c
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("blur", self.blur),
            ("noise", self.noise),
            ("contrast", self.contrast),
            ("rotation", self.rotation),
            ("scaling", self.scaling),
            ("gamma", self.gamma),
        ];
        for (name, t) in named {
            if !(0.0..=1.0).contains(&t.p) {
                return Err(Error::Config(format!("augment {name}: probability {} outside [0, 1]", t.p)));
            }
            if !(t.range[0].is_finite() && t.range[1].is_finite() && t.range[0] <= t.range[1]) {
                return Err(Error::Config(format!("augment {name}: empty range {:?}", t.range)));
            }
        }
        if self.mirror_p.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augment mirror: probability outside [0, 1]".into()));
        }
        if self.blur.range[0] <= 0.0 || self.scaling.range[0] <= 0.0 || self.gamma.range[0] <= 0.0 {
            return Err(Error::Config("augment blur, scaling and gamma ranges must be positive".into()));
        }
        if self.noise.range[0] < 0.0 {
            return Err(Error::Config("augment noise range must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn augment(mut patch: Patch, cfg: &AugmentConfig, draw_seed: u64) -> Result<Patch> {
    patch.check()?;
    let mut rng = seed::rng(seed::derive(cfg.seed, &[draw_seed]));

    let rotate = rng.random::<f64>() < cfg.rotation.p;
    let angles = if rotate { [0; 3].map(|_| cfg.rotation.sample(&mut rng)) } else { [0.0; 3] };
    let zoom = cfg.scaling.draw(&mut rng);
    if rotate || zoom.is_some() {
        patch = rotate_scale(&patch, angles, zoom.unwrap_or(1.0));
    }

    let shape = patch.shape();
    for channel in [&mut patch.pet, &mut patch.ct] {
        if let Some(frac) = cfg.noise.draw(&mut rng) {
            let sd = stats(channel).2 * frac;
            if sd > 0.0 {
                let normal = Normal::new(0.0, sd).expect("positive sigma");
                for v in channel.iter_mut() {
                    *v = (*v as f64 + normal.sample(&mut rng)) as f32;
                }
            }
        }
        if let Some(sigma) = cfg.blur.draw(&mut rng) {
            *channel = blur(channel, shape, sigma);
        }
        if let Some(factor) = cfg.contrast.draw(&mut rng) {
            let (lo, hi, _, mean) = range_stats(channel);
            for v in channel.iter_mut() {
                *v = ((*v as f64 - mean) * factor + mean).clamp(lo, hi) as f32;
            }
        }
        if let Some(g) = cfg.gamma.draw(&mut rng) {
            let (lo, hi, _, _) = range_stats(channel);
            if hi > lo {
                let span = hi - lo;
                for v in channel.iter_mut() {
                    *v = (((*v as f64 - lo) / span).clamp(0.0, 1.0).powf(g) * span + lo) as f32;
                }
            }
        }
    }

    let axes = cfg.mirror_p.map(|p| rng.random::<f64>() < p);
    if axes.iter().any(|&a| a) {
        patch = mirror(&patch, axes);
    }
    Ok(patch)
}

fn stats(x: &[f32]) -> (f64, f64, f64) {
    let (lo, hi, sd, _) = range_stats(x);
    (lo, hi, sd)
}

/// (min, max, population std, mean)
fn range_stats(x: &[f32]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let lo = x.iter().fold(f32::INFINITY, |a, &b| a.min(b)) as f64;
    let hi = x.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    (lo, hi, var.sqrt(), mean)
}

fn mirror(p: &Patch, axes: [bool; 3]) -> Patch {
    let n = p.size;
    let src = |d: usize, h: usize, w: usize| {
        let f = |flip: bool, i: usize| if flip { n - 1 - i } else { i };
        linear_index([n; 3], f(axes[0], d), f(axes[1], h), f(axes[2], w))
    };
    let mut order = Vec::with_capacity(n * n * n);
    for d in 0..n {
        for h in 0..n {
            for w in 0..n {
                order.push(src(d, h, w));
            }
        }
    }
    Patch {
        size: n,
        ct: order.iter().map(|&i| p.ct[i]).collect(),
        pet: order.iter().map(|&i| p.pet[i]).collect(),
        tissues: order.iter().map(|&i| p.tissues[i]).collect(),
        lesions: order.iter().map(|&i| p.lesions[i]).collect(),
    }
}

fn rotation_matrix(deg: [f64; 3]) -> [[f64; 3]; 3] {
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut c = [[0.0; 3]; 3];
        for (i, row) in c.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    };
    let about = |axis: usize, deg: f64| {
        let (s, c) = deg.to_radians().sin_cos();
        let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut m = [[0.0; 3]; 3];
        m[axis][axis] = 1.0;
        m[i][i] = c;
        m[j][j] = c;
        m[i][j] = -s;
        m[j][i] = s;
        m
    };
    mul(mul(about(0, deg[0]), about(1, deg[1])), about(2, deg[2]))
}

/// Rotates (degrees about the d, h and w axes) and zooms about the patch
/// centre. Images are resampled trilinearly, labels by nearest neighbour,
/// both clamping at the border.
pub fn rotate_scale(p: &Patch, angles_deg: [f64; 3], zoom: f64) -> Patch {
    let n = p.size;
    let shape = [n; 3];
    let r = rotation_matrix(angles_deg);
    let c = (n as f64 - 1.0) / 2.0;
    let last = (n - 1) as f64;
    let len = n * n * n;
    let mut out = Patch {
        size: n,
        ct: Vec::with_capacity(len),
        pet: Vec::with_capacity(len),
        tissues: Vec::with_capacity(len),
        lesions: Vec::with_capacity(len),
    };
    for d in 0..n {
        for h in 0..n {
            for w in 0..n {
                let q = [d as f64 - c, h as f64 - c, w as f64 - c];
                // inverse map: source = c + R^T q / zoom
                let s: [f64; 3] =
                    std::array::from_fn(|i| (c + (0..3).map(|k| r[k][i] * q[k]).sum::<f64>() / zoom).clamp(0.0, last));
                let near = s.map(|v| v.round() as usize);
                let ni = linear_index(shape, near[0], near[1], near[2]);
                out.tissues.push(p.tissues[ni]);
                out.lesions.push(p.lesions[ni]);
                let lo = s.map(|v| (v.floor() as usize).min(n - 1));
                let hi = lo.map(|v| (v + 1).min(n - 1));
                let t: [f64; 3] = std::array::from_fn(|i| s[i] - lo[i] as f64);
                let sample = |img: &[f32]| {
                    let mut acc = 0.0f64;
                    for (dd, wd) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
                        for (hh, wh) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
                            for (ww, ww_) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
                                let wt = wd * wh * ww_;
                                if wt != 0.0 {
                                    acc += wt * img[linear_index(shape, dd, hh, ww)] as f64;
                                }
                            }
                        }
                    }
                    acc as f32
                };
                out.ct.push(sample(&p.ct));
                out.pet.push(sample(&p.pet));
            }
        }
    }
    out
}

/// Separable Gaussian blur with replicated borders; the kernel is cut at
/// three sigma and normalized.
pub fn blur(x: &[f32], shape: Shape3, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut cur: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        let n = shape[axis] as isize;
        let st = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / st) % shape[axis]) as isize;
            let base = i - pos as usize * st;
            *out = k
                .iter()
                .enumerate()
                .map(|(j, &wk)| {
                    let q = (pos + j as isize - radius).clamp(0, n - 1) as usize;
                    wk * cur[base + q * st]
                })
                .sum();
        }
        cur = next;
    }
    cur.into_iter().map(|v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sphere_patch(n: usize, radius: f64) -> Patch {
        let c = (n as f64 - 1.0) / 2.0;
        let mut p = Patch { size: n, ct: Vec::new(), pet: Vec::new(), tissues: Vec::new(), lesions: Vec::new() };
        for d in 0..n {
            for h in 0..n {
                for w in 0..n {
                    // off-centre so rotations move it
                    let r2 = (d as f64 - c - 2.0).powi(2) + (h as f64 - c).powi(2) + (w as f64 - c + 1.0).powi(2);
                    let inside = r2 <= radius * radius;
                    p.lesions.push(inside as u32);
                    p.tissues.push(((d + h) % 3) as u32);
                    p.pet.push(if inside { 6.0 } else { 1.0 } + 0.01 * w as f32);
                    p.ct.push(-100.0 + (d * 7 + h * 3 + w) as f32);
                }
            }
        }
        p
    }

    fn only(mut t: impl FnMut(&mut AugmentConfig)) -> AugmentConfig {
        let mut c = AugmentConfig::disabled();
        t(&mut c);
        c
    }

    #[test]
    fn defaults_validate() {
        AugmentConfig::default().validate().unwrap();
        let mut c = AugmentConfig::default();
        c.gamma.p = 1.5;
        assert!(c.validate().is_err());
        c = AugmentConfig::default();
        c.scaling.range = [1.4, 0.7];
        assert!(c.validate().is_err());
    }

    #[test]
    fn disabled_is_identity() {
        let p = sphere_patch(12, 3.0);
        for s in 0..5 {
            assert_eq!(augment(p.clone(), &AugmentConfig::disabled(), s).unwrap(), p);
        }
    }

    #[test]
    fn mirror_twice_is_identity() {
        let p = sphere_patch(10, 3.0);
        let once = mirror(&p, [false, true, false]);
        assert_ne!(once, p);
        assert_eq!(mirror(&once, [false, true, false]), p);
        let cfg = only(|c| c.mirror_p = [0.0, 0.0, 1.0]);
        let flipped = augment(p.clone(), &cfg, 3).unwrap();
        assert_eq!(flipped, mirror(&p, [false, false, true]));
        assert_eq!(augment(flipped, &cfg, 4).unwrap(), p);
    }

    #[test]
    fn quarter_turn_keeps_lesion_volume() {
        let p = sphere_patch(24, 5.0);
        let before = p.lesions.iter().filter(|&&v| v == 1).count() as f64;
        for axis in 0..3 {
            let mut a = [0.0; 3];
            a[axis] = 90.0;
            let r = rotate_scale(&p, a, 1.0);
            let after = r.lesions.iter().filter(|&&v| v == 1).count() as f64;
            assert!((after - before).abs() <= 0.02 * before, "axis {axis}: {before} -> {after}");
            if axis != 0 {
                assert_ne!(r.lesions, p.lesions);
            }
        }
    }

    #[test]
    fn zero_rotation_unit_zoom_is_identity() {
        let p = sphere_patch(9, 2.0);
        assert_eq!(rotate_scale(&p, [0.0; 3], 1.0), p);
    }

    #[test]
    fn blur_preserves_constants_and_mean_in_interior() {
        let shape = [6, 7, 8];
        let x = vec![2.5f32; 6 * 7 * 8];
        let y = blur(&x, shape, 0.8);
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-6));
        let mut spike = vec![0f32; 9 * 9 * 9];
        spike[linear_index([9; 3], 4, 4, 4)] = 1.0;
        let y = blur(&spike, [9; 3], 0.7);
        let total: f32 = y.iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert!(y[linear_index([9; 3], 4, 4, 4)] < 1.0);
    }

    #[test]
    fn intensity_transforms_respect_range() {
        let p = sphere_patch(10, 3.0);
        let cfg = only(|c| {
            c.contrast.p = 1.0;
            c.gamma.p = 1.0;
        });
        for s in 0..4 {
            let q = augment(p.clone(), &cfg, s).unwrap();
            for (a, b) in [(&p.pet, &q.pet), (&p.ct, &q.ct)] {
                let (lo, hi, _) = stats(a);
                assert!(b.iter().all(|&v| (v as f64) >= lo - 1e-3 && (v as f64) <= hi + 1e-3));
                assert_ne!(a, b);
            }
            assert_eq!(q.lesions, p.lesions);
            assert_eq!(q.tissues, p.tissues);
        }
    }

    #[test]
    fn noise_changes_images_not_labels() {
        let p = sphere_patch(8, 2.0);
        let q = augment(p.clone(), &only(|c| c.noise = Transform::new(1.0, 0.05, 0.1)), 9).unwrap();
        assert_ne!(q.pet, p.pet);
        assert_eq!(q.lesions, p.lesions);
    }

    #[test]
    fn same_seed_same_patch() {
        let p = sphere_patch(12, 3.0);
        let mut cfg = AugmentConfig::default();
        for t in [&mut cfg.blur, &mut cfg.noise, &mut cfg.contrast, &mut cfg.rotation, &mut cfg.scaling, &mut cfg.gamma]
        {
            t.p = 0.7;
        }
        let a = augment(p.clone(), &cfg, 17).unwrap();
        let b = augment(p.clone(), &cfg, 17).unwrap();
        assert_eq!(
            a.ct.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.ct.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a, b);
        assert_ne!(a, augment(p, &cfg, 18).unwrap());
    }

    #[test]
    fn wrong_sizes_are_rejected() {
        let mut p = sphere_patch(4, 1.0);
        p.pet.pop();
        assert!(augment(p, &AugmentConfig::default(), 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn spatial_transforms_keep_label_sets(
            a in -30.0f64..30.0, b in -30.0f64..30.0, c in -30.0f64..30.0, zoom in 0.7f64..1.4,
        ) {
            let p = sphere_patch(10, 3.0);
            let q = rotate_scale(&p, [a, b, c], zoom);
            prop_assert!(q.lesions.iter().all(|&v| v <= 1));
            prop_assert!(q.tissues.iter().all(|&v| v < 3));
            let (lo, hi, _) = stats(&p.pet);
            prop_assert!(q.pet.iter().all(|&v| (v as f64) >= lo - 1e-4 && (v as f64) <= hi + 1e-4));
        }
    }
}
