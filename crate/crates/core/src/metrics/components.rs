//! 3D connected-component labeling by breadth-first flood fill.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::volumes::{linear_index, LabelMap, LabelSemantics, Shape3};
use crate::{Error, Result};

/// Voxel adjacency: faces (6), faces+edges (18) or faces+edges+corners (26).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub const ALL: [Connectivity; 3] = [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix];

    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_l1 = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dd in -1..=1isize {
            for dh in -1..=1isize {
                for dw in -1..=1isize {
                    let l1 = dd.abs() + dh.abs() + dw.abs();
                    if l1 > 0 && l1 <= max_l1 {
                        out.push([dd, dh, dw]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

/// Labels the foreground of a raw grid. Components are numbered from 1 in
/// the scan order of their first voxel.
pub fn label_components(shape: Shape3, foreground: &[bool], connectivity: Connectivity) -> (Vec<u32>, usize) {
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; foreground.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..foreground.len() {
        if !foreground[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let w = i % shape[2];
            let h = (i / shape[2]) % shape[1];
            let d = i / (shape[1] * shape[2]);
            for off in &offsets {
                let (Some(d2), Some(h2), Some(w2)) = (
                    d.checked_add_signed(off[0]).filter(|&x| x < shape[0]),
                    h.checked_add_signed(off[1]).filter(|&x| x < shape[1]),
                    w.checked_add_signed(off[2]).filter(|&x| x < shape[2]),
                ) else {
                    continue;
                };
                let j = linear_index(shape, d2, h2, w2);
                if foreground[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, next as usize)
}

pub fn connected_components(mask: &LabelMap, connectivity: Connectivity) -> Result<(LabelMap, usize)> {
    if mask.semantics() != LabelSemantics::BinaryMask {
        return Err(Error::Shape(format!("connected components need a binary mask, got {}", mask.semantics())));
    }
    let fg: Vec<bool> = mask.data().iter().map(|&v| v != 0).collect();
    let (labels, count) = label_components(mask.shape(), &fg, connectivity);
    Ok((LabelMap::new(mask.shape(), mask.spacing(), LabelSemantics::ComponentLabels, labels)?, count))
}
