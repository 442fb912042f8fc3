//! Collapsing fine anatomical labels into the 16 tissue groups the CT branch
//! predicts.

use std::collections::BTreeMap;

use crate::volumes::{LabelMap, LabelSemantics};
use crate::{Error, Result};

pub const GROUP_NAMES: [&str; 16] = [
    "brain",
    "trachea",
    "lungs",
    "adrenal glands",
    "thyroid",
    "spleen",
    "liver",
    "gallbladder",
    "pancreas",
    "urinary system",
    "cardiovascular system",
    "gastrointestinal tract",
    "bones",
    "muscles",
    "fat",
    "others",
];

/// Group index of "others".
pub const OTHERS: u32 = 15;

/// Fine label → group index table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueGrouping {
    mapping: BTreeMap<u32, u32>,
    /// Fine value meaning "not segmented"; sent to [`OTHERS`].
    unlabeled: Option<u32>,
}

impl TissueGrouping {
    /// Fine label `0` is treated as unsegmented body and lands in "others".
    pub fn new(mapping: BTreeMap<u32, u32>) -> Result<Self> {
        Self::build(mapping, Some(0))
    }

    /// Sixteen fine labels, each its own group; no unlabeled value.
    pub fn identity() -> Self {
        Self::build((0..16).map(|g| (g, g)).collect(), None).expect("identity table is valid")
    }

    fn build(mapping: BTreeMap<u32, u32>, unlabeled: Option<u32>) -> Result<Self> {
        if let Some((&fine, &group)) = mapping.iter().find(|(_, &g)| g > OTHERS) {
            return Err(Error::Config(format!("fine label {fine} maps to group {group}, beyond {OTHERS}")));
        }
        Ok(Self { mapping, unlabeled })
    }

    pub fn group_of(&self, fine: u32) -> Option<u32> {
        match self.mapping.get(&fine) {
            Some(&g) => Some(g),
            None if Some(fine) == self.unlabeled => Some(OTHERS),
            None => None,
        }
    }

    pub fn group_name(group: u32) -> Option<&'static str> {
        GROUP_NAMES.get(group as usize).copied()
    }
}

pub fn group_tissues(fine: &LabelMap, grouping: &TissueGrouping) -> Result<LabelMap> {
    let data =
        fine.data().iter().map(|&v| grouping.group_of(v).ok_or(Error::UnmappedLabel(v))).collect::<Result<Vec<_>>>()?;
    LabelMap::new(
        fine.shape(),
        fine.spacing(),
        LabelSemantics::TissueGroups { classes: GROUP_NAMES.len() as u32 },
        data,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const SHAPE: [usize; 3] = [4, 5, 6];
    const SP: [f64; 3] = [1.0, 1.0, 2.0];

    fn fine(data: Vec<u32>) -> LabelMap {
        LabelMap::new(SHAPE, SP, LabelSemantics::ComponentLabels, data).unwrap()
    }

    #[test]
    fn names_are_complete() {
        assert_eq!(GROUP_NAMES.len(), 16);
        assert_eq!(TissueGrouping::group_name(OTHERS), Some("others"));
        assert_eq!(TissueGrouping::group_name(2), Some("lungs"));
    }

    #[test]
    fn identity_grouping_is_identity() {
        let data: Vec<u32> = (0..120).map(|i| (i * 7 % 16) as u32).collect();
        let out = group_tissues(&fine(data.clone()), &TissueGrouping::identity()).unwrap();
        assert_eq!(out.data(), data.as_slice());
    }

    #[test]
    fn unlabeled_body_is_others() {
        let grouping = TissueGrouping::new(BTreeMap::from([(5, 6)])).unwrap();
        let out = group_tissues(&fine(vec![0; 120]), &grouping).unwrap();
        assert!(out.data().iter().all(|&v| v == OTHERS));
    }

    #[test]
    fn lookup_table_oracle() {
        let mut rng = crate::seed::rng(21);
        let table: BTreeMap<u32, u32> = (1..=121).map(|f| (f, rng.random_range(0..16))).collect();
        let grouping = TissueGrouping::new(table.clone()).unwrap();
        let data: Vec<u32> = (0..120).map(|_| rng.random_range(0..=121)).collect();
        let out = group_tissues(&fine(data.clone()), &grouping).unwrap();
        for (o, f) in out.data().iter().zip(&data) {
            let expected = if *f == 0 { OTHERS } else { table[f] };
            assert_eq!(*o, expected);
        }
    }

    #[test]
    fn unmapped_label_is_named() {
        let grouping = TissueGrouping::new(BTreeMap::from([(1, 1)])).unwrap();
        let mut data = vec![1; 120];
        data[17] = 99;
        assert!(matches!(group_tissues(&fine(data), &grouping), Err(Error::UnmappedLabel(99))));
        assert!(TissueGrouping::new(BTreeMap::from([(1, 16)])).is_err());
    }
}
