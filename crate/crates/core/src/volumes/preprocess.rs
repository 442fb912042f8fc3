//! Body-contour masking, cropping, padding, flipping and grid resampling.

use std::collections::VecDeque;

use super::{
    extract_box, linear_index, voxel_count, BoundingBox, LabelMap, LabelSemantics, Modality, Shape3, Spacing3, Volume,
};
use crate::metrics::{label_components, Connectivity};
use crate::{Error, Result};

/// Largest 26-connected component of `HU > hu_threshold`, with enclosed
/// cavities filled.
pub fn body_mask(ct: &Volume, hu_threshold: f32) -> Result<LabelMap> {
    if ct.modality() != Modality::CtHu {
        return Err(Error::Shape(format!("body mask needs a CT volume, got {:?}", ct.modality())));
    }
    let shape = ct.shape();
    let above: Vec<bool> = ct.data().iter().map(|&v| v > hu_threshold).collect();
    if !above.iter().any(|&b| b) {
        return Err(Error::EmptyBody);
    }
    let (labels, count) = label_components(shape, &above, Connectivity::TwentySix);
    let mut sizes = vec![0usize; count + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    // ties go to the component seen first in scan order
    let keep = (1..=count).fold(1, |best, l| if sizes[l] > sizes[best] { l } else { best }) as u32;
    let mut mask: Vec<bool> = labels.iter().map(|&l| l == keep).collect();
    fill_cavities(shape, &mut mask);
    LabelMap::new(shape, ct.spacing(), LabelSemantics::BinaryMask, mask.into_iter().map(u32::from).collect())
}

/// Marks every background voxel unreachable from the grid border (through
/// 6-connected background) as foreground.
fn fill_cavities(shape: Shape3, mask: &mut [bool]) {
    let [nd, nh, nw] = shape;
    let mut outside = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let border = d == 0 || h == 0 || w == 0 || d == nd - 1 || h == nh - 1 || w == nw - 1;
                let i = linear_index(shape, d, h, w);
                if border && !mask[i] {
                    outside[i] = true;
                    queue.push_back([d, h, w]);
                }
            }
        }
    }
    while let Some([d, h, w]) = queue.pop_front() {
        let steps: [(isize, isize, isize); 6] = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
        for (dd, dh, dw) in steps {
            let (Some(d2), Some(h2), Some(w2)) = (
                d.checked_add_signed(dd).filter(|&x| x < nd),
                h.checked_add_signed(dh).filter(|&x| x < nh),
                w.checked_add_signed(dw).filter(|&x| x < nw),
            ) else {
                continue;
            };
            let j = linear_index(shape, d2, h2, w2);
            if !mask[j] && !outside[j] {
                outside[j] = true;
                queue.push_back([d2, h2, w2]);
            }
        }
    }
    for (m, o) in mask.iter_mut().zip(&outside) {
        if !*m && !*o {
            *m = true;
        }
    }
}

fn mask_box(mask: &LabelMap, margin: usize) -> Result<BoundingBox> {
    let shape = mask.shape();
    let mut lo = shape;
    let mut hi = [0usize; 3];
    let mut any = false;
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                if mask.get(d, h, w) >= 1 {
                    any = true;
                    for (a, v) in [d, h, w].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v + 1);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(margin);
        hi[a] = (hi[a] + margin).min(shape[a]);
    }
    Ok(BoundingBox { lo, hi })
}

/// Crops `vol` to the tight box of `mask >= 1` dilated by `margin_vox`.
pub fn crop_to_mask(vol: &Volume, mask: &LabelMap, margin_vox: usize) -> Result<(Volume, BoundingBox)> {
    if mask.shape() != vol.shape() {
        return Err(Error::Shape(format!("mask {:?} does not match volume {:?}", mask.shape(), vol.shape())));
    }
    let bbox = mask_box(mask, margin_vox)?;
    let data = extract_box(vol.data(), vol.shape(), &bbox);
    Ok((Volume::new(bbox.shape(), vol.spacing(), vol.modality(), data)?, bbox))
}

pub fn crop_labels(labels: &LabelMap, bbox: &BoundingBox) -> Result<LabelMap> {
    if !bbox.is_valid_in(labels.shape()) {
        return Err(Error::Shape(format!("{bbox:?} outside {:?}", labels.shape())));
    }
    let data = extract_box(labels.data(), labels.shape(), bbox);
    LabelMap::new(bbox.shape(), labels.spacing(), labels.semantics(), data)
}

/// Writes `region` into `parent` at `bbox`.
pub fn paste_back<T: Copy>(parent: &mut [T], parent_shape: Shape3, region: &[T], bbox: &BoundingBox) -> Result<()> {
    let rs = bbox.shape();
    if !bbox.is_valid_in(parent_shape) || region.len() != voxel_count(rs) || parent.len() != voxel_count(parent_shape) {
        return Err(Error::Shape(format!("cannot paste {rs:?} at {bbox:?} into {parent_shape:?}")));
    }
    for d in 0..rs[0] {
        for h in 0..rs[1] {
            let src = linear_index(rs, d, h, 0);
            let dst = linear_index(parent_shape, d + bbox.lo[0], h + bbox.lo[1], bbox.lo[2]);
            parent[dst..dst + rs[2]].copy_from_slice(&region[src..src + rs[2]]);
        }
    }
    Ok(())
}

fn pad_grid<T: Copy>(data: &[T], shape: Shape3, target: Shape3) -> Vec<T> {
    let mut out = Vec::with_capacity(voxel_count(target));
    for d in 0..target[0] {
        let sd = d.min(shape[0] - 1);
        for h in 0..target[1] {
            let sh = h.min(shape[1] - 1);
            for w in 0..target[2] {
                out.push(data[linear_index(shape, sd, sh, w.min(shape[2] - 1))]);
            }
        }
    }
    out
}

fn padded_shape(shape: Shape3, min: usize) -> Shape3 {
    [shape[0].max(min), shape[1].max(min), shape[2].max(min)]
}

/// Edge-pads each axis shorter than `min` up to `min` (on the high side).
pub fn pad_volume_to(vol: &Volume, min: usize) -> Result<Volume> {
    let target = padded_shape(vol.shape(), min);
    if target == vol.shape() {
        return Ok(vol.clone());
    }
    Volume::new(target, vol.spacing(), vol.modality(), pad_grid(vol.data(), vol.shape(), target))
}

pub fn pad_labels_to(labels: &LabelMap, min: usize) -> Result<LabelMap> {
    let target = padded_shape(labels.shape(), min);
    if target == labels.shape() {
        return Ok(labels.clone());
    }
    LabelMap::new(target, labels.spacing(), labels.semantics(), pad_grid(labels.data(), labels.shape(), target))
}

/// Inverse of the padding functions: keeps the leading `shape` block.
pub fn unpad<T: Copy>(data: &[T], padded: Shape3, shape: Shape3) -> Vec<T> {
    if padded == shape {
        return data.to_vec();
    }
    extract_box(data, padded, &BoundingBox { lo: [0; 3], hi: shape })
}

pub(crate) fn flip_grid<T: Copy>(data: &[T], shape: Shape3, axes: [bool; 3]) -> Vec<T> {
    let [nd, nh, nw] = shape;
    let mut out = Vec::with_capacity(data.len());
    for d in 0..nd {
        let sd = if axes[0] { nd - 1 - d } else { d };
        for h in 0..nh {
            let sh = if axes[1] { nh - 1 - h } else { h };
            let row = linear_index(shape, sd, sh, 0);
            if axes[2] {
                out.extend(data[row..row + nw].iter().rev());
            } else {
                out.extend_from_slice(&data[row..row + nw]);
            }
        }
    }
    out
}

pub fn flip_volume(vol: &Volume, axes: [bool; 3]) -> Volume {
    Volume::new(vol.shape(), vol.spacing(), vol.modality(), flip_grid(vol.data(), vol.shape(), axes))
        .expect("flip preserves geometry")
}

pub fn flip_labels(labels: &LabelMap, axes: [bool; 3]) -> LabelMap {
    LabelMap::new(labels.shape(), labels.spacing(), labels.semantics(), flip_grid(labels.data(), labels.shape(), axes))
        .expect("flip preserves geometry")
}

/// Source-grid coordinate of each target voxel center along one axis.
fn axis_coords(src_n: usize, src_sp: f64, dst_n: usize, dst_sp: f64) -> Vec<(usize, usize, f64)> {
    (0..dst_n)
        .map(|i| {
            let x = ((i as f64 + 0.5) * dst_sp / src_sp - 0.5).clamp(0.0, (src_n - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src_n - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling with voxel-center alignment; samples outside the
/// source grid clamp to the edge.
pub fn resample_trilinear(vol: &Volume, target_shape: Shape3, target_spacing: Spacing3) -> Result<Volume> {
    if target_shape.contains(&0) || target_spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Shape(format!("invalid target grid {target_shape:?} @ {target_spacing:?}")));
    }
    let src = vol.shape();
    let sp = vol.spacing();
    let cd = axis_coords(src[0], sp[0], target_shape[0], target_spacing[0]);
    let ch = axis_coords(src[1], sp[1], target_shape[1], target_spacing[1]);
    let cw = axis_coords(src[2], sp[2], target_shape[2], target_spacing[2]);
    let data = vol.data();
    let at = |d, h, w| data[linear_index(src, d, h, w)] as f64;
    let mut out = Vec::with_capacity(voxel_count(target_shape));
    for &(d0, d1, td) in &cd {
        for &(h0, h1, th) in &ch {
            for &(w0, w1, tw) in &cw {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(d0, h0, w0), at(d0, h0, w1), tw);
                let c01 = lerp(at(d0, h1, w0), at(d0, h1, w1), tw);
                let c10 = lerp(at(d1, h0, w0), at(d1, h0, w1), tw);
                let c11 = lerp(at(d1, h1, w0), at(d1, h1, w1), tw);
                let v = lerp(lerp(c00, c01, th), lerp(c10, c11, th), td);
                out.push(v as f32);
            }
        }
    }
    Volume::new(target_shape, target_spacing, vol.modality(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cuboid_ct(shape: Shape3, lo: [usize; 3], hi: [usize; 3]) -> Volume {
        let mut data = vec![-1000.0f32; voxel_count(shape)];
        for d in lo[0]..hi[0] {
            for h in lo[1]..hi[1] {
                for w in lo[2]..hi[2] {
                    data[linear_index(shape, d, h, w)] = 0.0;
                }
            }
        }
        Volume::new(shape, [1.0; 3], Modality::CtHu, data).unwrap()
    }

    /// Oracle: background voxels reachable from the border by 6-steps.
    fn exterior_oracle(shape: Shape3, fg: &[bool]) -> Vec<bool> {
        let mut ext = vec![false; fg.len()];
        let mut changed = true;
        for d in 0..shape[0] {
            for h in 0..shape[1] {
                for w in 0..shape[2] {
                    let i = linear_index(shape, d, h, w);
                    let border = [d, h, w].iter().zip(shape).any(|(&x, n)| x == 0 || x == n - 1);
                    ext[i] = border && !fg[i];
                }
            }
        }
        while changed {
            changed = false;
            for d in 0..shape[0] {
                for h in 0..shape[1] {
                    for w in 0..shape[2] {
                        let i = linear_index(shape, d, h, w);
                        if fg[i] || ext[i] {
                            continue;
                        }
                        let nbrs = [
                            (d > 0).then(|| linear_index(shape, d - 1, h, w)),
                            (d + 1 < shape[0]).then(|| linear_index(shape, d + 1, h, w)),
                            (h > 0).then(|| linear_index(shape, d, h - 1, w)),
                            (h + 1 < shape[1]).then(|| linear_index(shape, d, h + 1, w)),
                            (w > 0).then(|| linear_index(shape, d, h, w - 1)),
                            (w + 1 < shape[2]).then(|| linear_index(shape, d, h, w + 1)),
                        ];
                        if nbrs.into_iter().flatten().any(|j| ext[j]) {
                            ext[i] = true;
                            changed = true;
                        }
                    }
                }
            }
        }
        ext
    }

    #[test]
    fn all_air_is_empty_body() {
        let ct = Volume::filled([4, 4, 4], [1.0; 3], Modality::CtHu, -1000.0).unwrap();
        assert!(matches!(body_mask(&ct, -500.0), Err(Error::EmptyBody)));
    }

    #[test]
    fn body_mask_requires_ct() {
        let pet = Volume::filled([2, 2, 2], [1.0; 3], Modality::PetSuv, 1.0).unwrap();
        assert!(body_mask(&pet, 0.0).is_err());
    }

    #[test]
    fn cuboid_mask_equals_cuboid() {
        let ct = cuboid_ct([8, 9, 10], [2, 1, 3], [6, 7, 9]);
        let mask = body_mask(&ct, -500.0).unwrap();
        for (m, v) in mask.data().iter().zip(ct.data()) {
            assert_eq!(*m, (*v > -500.0) as u32);
        }
    }

    #[test]
    fn bubble_is_filled_and_small_blobs_dropped() {
        let shape = [12, 12, 12];
        let mut ct = cuboid_ct(shape, [2, 2, 2], [10, 10, 10]).into_data();
        // enclosed air bubble
        for d in 5..7 {
            for h in 5..7 {
                ct[linear_index(shape, d, h, 5)] = -1000.0;
            }
        }
        // detached speck in a corner
        ct[linear_index(shape, 0, 0, 0)] = 100.0;
        let ct = Volume::new(shape, [1.0; 3], Modality::CtHu, ct).unwrap();
        let mask = body_mask(&ct, -500.0).unwrap();
        assert_eq!(mask.get(0, 0, 0), 0);
        assert_eq!(mask.get(5, 5, 5), 1);
        let fg: Vec<bool> = mask.data().iter().map(|&v| v == 1).collect();
        let ext = exterior_oracle(shape, &fg);
        for i in 0..fg.len() {
            assert_eq!(fg[i], !ext[i], "voxel {i}");
        }
        let (_, count) = label_components(shape, &fg, Connectivity::TwentySix);
        assert_eq!(count, 1);
    }

    #[test]
    fn crop_full_mask_is_identity() {
        let vol = Volume::new([3, 4, 5], [1.0; 3], Modality::PetSuv, (0..60).map(|v| v as f32).collect()).unwrap();
        let mask = LabelMap::binary_from_fn([3, 4, 5], [1.0; 3], |_| true).unwrap();
        let (out, bbox) = crop_to_mask(&vol, &mask, 0).unwrap();
        assert_eq!(out, vol);
        assert_eq!(bbox, BoundingBox::full([3, 4, 5]));
    }

    #[test]
    fn crop_single_voxel_with_margin() {
        let shape = [8, 8, 8];
        let vol = Volume::filled(shape, [1.0; 3], Modality::PetSuv, 1.0).unwrap();
        let at = linear_index(shape, 2, 2, 2);
        let mask = LabelMap::binary_from_fn(shape, [1.0; 3], |i| i == at).unwrap();
        let (out, bbox) = crop_to_mask(&vol, &mask, 1).unwrap();
        assert_eq!(bbox, BoundingBox { lo: [1, 1, 1], hi: [4, 4, 4] });
        assert_eq!(out.shape(), [3, 3, 3]);

        let mask = LabelMap::binary_from_fn(shape, [1.0; 3], |i| i == 0).unwrap();
        let (_, bbox) = crop_to_mask(&vol, &mask, 2).unwrap();
        assert_eq!(bbox, BoundingBox { lo: [0, 0, 0], hi: [3, 3, 3] });
    }

    #[test]
    fn crop_empty_mask_errors() {
        let vol = Volume::filled([2, 2, 2], [1.0; 3], Modality::PetSuv, 1.0).unwrap();
        let mask = LabelMap::zeros([2, 2, 2], [1.0; 3], LabelSemantics::BinaryMask).unwrap();
        assert!(matches!(crop_to_mask(&vol, &mask, 0), Err(Error::EmptyMask)));
    }

    #[test]
    fn crop_then_paste_reproduces_region() {
        let shape = [6, 7, 8];
        let vol = Volume::new(shape, [1.0; 3], Modality::CtHu, (0..336).map(|v| v as f32 * 0.5).collect()).unwrap();
        let mask = LabelMap::binary_from_fn(shape, [1.0; 3], |i| {
            let [d, h, w] = super::super::unravel(shape, i);
            (1..4).contains(&d) && (2..6).contains(&h) && w == 3
        })
        .unwrap();
        let (crop, bbox) = crop_to_mask(&vol, &mask, 1).unwrap();
        let mut canvas = vec![0.0f32; voxel_count(shape)];
        paste_back(&mut canvas, shape, crop.data(), &bbox).unwrap();
        for d in bbox.lo[0]..bbox.hi[0] {
            for h in bbox.lo[1]..bbox.hi[1] {
                for w in bbox.lo[2]..bbox.hi[2] {
                    let i = linear_index(shape, d, h, w);
                    assert_eq!(canvas[i], vol.data()[i]);
                }
            }
        }
    }

    #[test]
    fn identity_and_constant_resample() {
        let shape = [3, 4, 5];
        let vol =
            Volume::new(shape, [2.0, 1.5, 1.0], Modality::PetSuv, (0..60).map(|v| (v as f32).sin()).collect()).unwrap();
        assert_eq!(resample_trilinear(&vol, shape, [2.0, 1.5, 1.0]).unwrap(), vol);

        let c = Volume::filled(shape, [1.0; 3], Modality::CtHu, 42.5).unwrap();
        let r = resample_trilinear(&c, [7, 2, 9], [0.4, 2.0, 0.55]).unwrap();
        assert!(r.data().iter().all(|&v| v == 42.5));
    }

    #[test]
    fn ramp_matches_analytic_at_new_centers() {
        let shape = [4, 5, 6];
        let vol = Volume::new(
            shape,
            [1.0; 3],
            Modality::CtHu,
            (0..120).map(|i| super::super::unravel(shape, i)[2] as f32).collect(),
        )
        .unwrap();
        let out = resample_trilinear(&vol, [8, 10, 12], [0.5; 3]).unwrap();
        for i in 0..out.data().len() {
            let w = super::super::unravel([8, 10, 12], i)[2];
            // new center in source index units, clamped to the source grid
            let analytic = ((w as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 5.0);
            assert!((out.data()[i] as f64 - analytic).abs() < 1e-5);
        }
    }

    #[test]
    fn pad_and_unpad_round_trip() {
        let vol = Volume::new([2, 3, 1], [1.0; 3], Modality::CtHu, (0..6).map(|v| v as f32).collect()).unwrap();
        let p = pad_volume_to(&vol, 4).unwrap();
        assert_eq!(p.shape(), [4, 4, 4]);
        assert_eq!(p.get(3, 3, 3), vol.get(1, 2, 0));
        assert_eq!(unpad(p.data(), p.shape(), vol.shape()), vol.data());
    }

    #[test]
    fn flip_is_involution() {
        let shape = [2, 3, 4];
        let vol = Volume::new(shape, [1.0; 3], Modality::CtHu, (0..24).map(|v| v as f32).collect()).unwrap();
        for bits in 0..8u8 {
            let axes = [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0];
            assert_eq!(flip_volume(&flip_volume(&vol, axes), axes), vol);
        }
        assert_eq!(flip_volume(&vol, [false, false, true]).get(0, 0, 0), 3.0);
    }

    proptest::proptest! {
        #[test]
        fn resample_never_overshoots(
            vals in proptest::collection::vec(-100.0f32..100.0, 27),
            td in 1usize..7, th in 1usize..7, tw in 1usize..7,
            sp in 0.3f64..3.0,
        ) {
            let vol = Volume::new([3, 3, 3], [1.0; 3], Modality::PetSuv, vals.clone()).unwrap();
            let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let out = resample_trilinear(&vol, [td, th, tw], [sp; 3]).unwrap();
            for &v in out.data() {
                proptest::prop_assert!(v >= lo - 1e-4 && v <= hi + 1e-4);
            }
        }
    }
}
