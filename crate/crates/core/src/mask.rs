//! Mask metrics and postprocessing: Dice, IoU, per-slice areas, the
//! adjacent-slice area gate and largest-component cleanup.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{LabelVolume, VoxelSpacing};

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("dimension mismatch: {0} vs {1} voxels")]
    DimensionMismatch(usize, usize),
}

/// Muscle side; the discriminant is the label value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left = 1,
    Right = 2,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "left" => Some(Side::Left),
            "right" => Some(Side::Right),
            _ => None,
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One axial label slice tagged with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMask {
    pub study_id: String,
    pub slice_index: usize,
    pub nx: usize,
    pub ny: usize,
    pub labels: Vec<u8>,
}

impl SliceMask {
    pub fn area_px(&self, side: Side) -> usize {
        self.labels.iter().filter(|&&v| v == side.label()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskStats {
    /// Pixel counts for [left, right].
    pub area_px: [usize; 2],
    pub area_mm2: [f64; 2],
}

impl MaskStats {
    pub fn from_labels(labels: &[u8], spacing: VoxelSpacing) -> Self {
        let mut area_px = [0usize; 2];
        for &v in labels {
            if v == 1 || v == 2 {
                area_px[(v - 1) as usize] += 1;
            }
        }
        let px = spacing.pixel_area_mm2();
        Self { area_px, area_mm2: [area_px[0] as f64 * px, area_px[1] as f64 * px] }
    }

    pub fn px(&self, side: Side) -> usize {
        self.area_px[side as usize - 1]
    }
}

fn overlap_counts(a: &[u8], b: &[u8], class: u8) -> Result<(usize, usize, usize), MaskError> {
    if a.len() != b.len() {
        return Err(MaskError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut inter, mut na, mut nb) = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b) {
        let (ia, ib) = (x == class, y == class);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    Ok((inter, na, nb))
}

/// Dice coefficient of the voxels labelled `class` in `a` and `b`; 1.0 when
/// both are empty.
pub fn dice(a: &[u8], b: &[u8], class: u8) -> Result<f64, MaskError> {
    let (inter, na, nb) = overlap_counts(a, b, class)?;
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 })
}

/// Intersection over union of the voxels labelled `class`; 1.0 when both
/// are empty.
pub fn iou(a: &[u8], b: &[u8], class: u8) -> Result<f64, MaskError> {
    let (inter, na, nb) = overlap_counts(a, b, class)?;
    let union = na + nb - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Left/right Dice averaged with equal weight.
pub fn mean_side_dice(a: &[u8], b: &[u8]) -> Result<f64, MaskError> {
    Ok((dice(a, b, 1)? + dice(a, b, 2)?) / 2.0)
}

/// Left/right IoU averaged with equal weight.
pub fn mean_side_iou(a: &[u8], b: &[u8]) -> Result<f64, MaskError> {
    Ok((iou(a, b, 1)? + iou(a, b, 2)?) / 2.0)
}

/// Per-slice areas, head to foot.
pub fn slice_areas(vol: &LabelVolume) -> Vec<MaskStats> {
    (0..vol.dims().nz)
        .map(|z| MaskStats::from_labels(vol.slice(z), vol.spacing()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AreaViolation {
    /// Index (within the checked sequence) of the inferior slice that grew too much.
    pub slice: usize,
    pub side: Side,
    pub superior_px: usize,
    pub current_px: usize,
}

/// Every slice's area must stay within `max_ratio` times the slice above it,
/// per side. An empty superior slice followed by a non-empty one fails.
pub fn check_area_ratios(areas: &[MaskStats], max_ratio: f64) -> Result<(), AreaViolation> {
    for (i, pair) in areas.windows(2).enumerate() {
        for side in Side::BOTH {
            let (sup, cur) = (pair[0].px(side), pair[1].px(side));
            let ok = if sup == 0 { cur == 0 } else { cur as f64 <= max_ratio * sup as f64 };
            if !ok {
                return Err(AreaViolation { slice: i + 1, side, superior_px: sup, current_px: cur });
            }
        }
    }
    Ok(())
}

pub fn adjacent_area_ratio_check(vol: &LabelVolume, max_ratio: f64) -> Result<(), AreaViolation> {
    check_area_ratios(&slice_areas(vol), max_ratio)
}

/// Keep only the largest 26-connected component of each label class.
/// Equal sizes resolve to the component holding the smallest linear index.
pub fn largest_component_per_class(vol: &LabelVolume) -> LabelVolume {
    let dims = vol.dims();
    let (nx, ny, nz) = (dims.nx as isize, dims.ny as isize, dims.nz as isize);
    let data = vol.data();
    let mut component = vec![u32::MAX; data.len()];
    // best (component id, size) per class 1 and 2
    let mut best: [Option<(u32, usize)>; 2] = [None, None];
    let mut stack = Vec::new();
    let mut next_id = 0u32;
    for start in 0..data.len() {
        let class = data[start];
        if class == 0 || component[start] != u32::MAX {
            continue;
        }
        let id = next_id;
        next_id += 1;
        component[start] = id;
        stack.push(start);
        let mut size = 0usize;
        while let Some(i) = stack.pop() {
            size += 1;
            let (z, rem) = ((i / dims.slice_len()) as isize, i % dims.slice_len());
            let (y, x) = ((rem / dims.nx) as isize, (rem % dims.nx) as isize);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (xx, yy, zz) = (x + dx, y + dy, z + dz);
                        if xx < 0 || yy < 0 || zz < 0 || xx >= nx || yy >= ny || zz >= nz {
                            continue;
                        }
                        let j = dims.index(xx as usize, yy as usize, zz as usize);
                        if data[j] == class && component[j] == u32::MAX {
                            component[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        let slot = &mut best[(class - 1) as usize];
        // discovery order is by smallest linear index, so strict > keeps the tie-break
        if slot.is_none_or(|(_, s)| size > s) {
            *slot = Some((id, size));
        }
    }
    let keep: Vec<u32> = best.iter().flatten().map(|&(id, _)| id).collect();
    let out = data
        .iter()
        .zip(&component)
        .map(|(&v, &c)| if v != 0 && keep.contains(&c) { v } else { 0 })
        .collect();
    LabelVolume::new(dims, vol.spacing(), out).expect("labels are a subset of the input")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use proptest::prelude::*;

    fn sp() -> VoxelSpacing {
        VoxelSpacing::new(0.6875, 0.6875, 5.0).unwrap()
    }

    fn set(n: usize, idx: &[usize]) -> Vec<u8> {
        let mut v = vec![0u8; n];
        idx.iter().for_each(|&i| v[i] = 1);
        v
    }

    #[test]
    fn dice_and_iou_hand_counts() {
        // 2x2 grid, index = y*2 + x; a = {(0,0),(0,1)}, b = {(0,1),(1,1)}
        let a = set(4, &[0, 2]);
        let b = set(4, &[2, 3]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        assert!((iou(&a, &b, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(iou(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&set(4, &[0]), &set(4, &[1]), 1).unwrap(), 0.0);
        assert_eq!(dice(&[0; 4], &[0; 4], 1).unwrap(), 1.0);
        assert_eq!(iou(&[0; 4], &[0; 4], 2).unwrap(), 1.0);
        assert_eq!(dice(&a, &[0; 3], 1), Err(MaskError::DimensionMismatch(4, 3)));
    }

    #[test]
    fn hundred_pixel_area() {
        let dims = Dims::new(20, 10, 2).unwrap();
        let mut data = vec![0u8; dims.len()];
        data[..100].iter_mut().for_each(|v| *v = 1);
        let vol = LabelVolume::new(dims, sp(), data).unwrap();
        let areas = slice_areas(&vol);
        assert_eq!(areas[0].area_px, [100, 0]);
        assert_eq!(areas[0].area_mm2[0], 47.265625);
        assert_eq!(areas[1], MaskStats::default());
    }

    fn stats(left: &[usize]) -> Vec<MaskStats> {
        left.iter().map(|&l| MaskStats { area_px: [l, 0], area_mm2: [0.0; 2] }).collect()
    }

    #[test]
    fn area_gate_boundaries() {
        let err = check_area_ratios(&stats(&[100, 151]), 1.5).unwrap_err();
        assert_eq!(err.slice, 1);
        assert_eq!(err.side, Side::Left);
        assert!(check_area_ratios(&stats(&[100, 150]), 1.5).is_ok());
        assert!(check_area_ratios(&stats(&[50, 50, 50, 50]), 1.0).is_ok());
        assert!(check_area_ratios(&stats(&[0, 10]), 1.5).is_err());
        assert!(check_area_ratios(&stats(&[0, 0, 0]), 1.5).is_ok());
        // shrinking is always allowed
        assert!(check_area_ratios(&stats(&[100, 1]), 1.0).is_ok());
    }

    fn vol_with(dims: Dims, voxels: &[(usize, usize, usize, u8)]) -> LabelVolume {
        let mut data = vec![0u8; dims.len()];
        for &(x, y, z, v) in voxels {
            data[dims.index(x, y, z)] = v;
        }
        LabelVolume::new(dims, sp(), data).unwrap()
    }

    #[test]
    fn smaller_blob_is_erased() {
        let dims = Dims::new(10, 10, 2).unwrap();
        let five: Vec<_> = (0..5).map(|x| (x, 0, 0, 1u8)).collect();
        let three: Vec<_> = (0..3).map(|x| (x, 5, 1, 1u8)).collect();
        let vol = vol_with(dims, &[five.clone(), three].concat());
        assert_eq!(largest_component_per_class(&vol), vol_with(dims, &five));
    }

    #[test]
    fn diagonal_voxels_are_connected() {
        let dims = Dims::new(4, 4, 4).unwrap();
        let vol = vol_with(dims, &[(0, 0, 0, 2), (1, 1, 1, 2), (2, 2, 2, 2), (3, 0, 3, 2)]);
        let out = largest_component_per_class(&vol);
        assert_eq!(out.count(2), 3);
        assert_eq!(out.get(3, 0, 3), 0);
    }

    #[test]
    fn equal_blobs_keep_smallest_linear_index() {
        let dims = Dims::new(10, 10, 1).unwrap();
        let late: Vec<_> = (0..4).map(|x| (x, 8, 0, 1u8)).collect();
        let early: Vec<_> = (0..4).map(|y| (9, y, 0, 1u8)).collect();
        let vol = vol_with(dims, &[late, early.clone()].concat());
        assert_eq!(largest_component_per_class(&vol), vol_with(dims, &early));
    }

    #[test]
    fn classes_are_processed_independently() {
        let dims = Dims::new(6, 1, 1).unwrap();
        // touching voxels of different classes are not one component
        let vol = vol_with(dims, &[(0, 0, 0, 1), (1, 0, 0, 2), (3, 0, 0, 1), (4, 0, 0, 1)]);
        let out = largest_component_per_class(&vol);
        assert_eq!(out.data(), &[0, 2, 0, 1, 1, 0]);
    }

    fn arb_labels(n: usize) -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(prop_oneof![3 => Just(0u8), 1 => Just(1u8), 1 => Just(2u8)], n)
    }

    proptest! {
        #[test]
        fn dice_iou_identity_and_bounds(a in arb_labels(64), b in arb_labels(64)) {
            for class in [1u8, 2] {
                let d = dice(&a, &b, class).unwrap();
                let j = iou(&a, &b, class).unwrap();
                prop_assert_eq!(d, dice(&b, &a, class).unwrap());
                prop_assert_eq!(j, iou(&b, &a, class).unwrap());
                prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
                prop_assert!(j <= d);
                prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            }
        }

        #[test]
        fn largest_component_idempotent_and_shrinking(data in arb_labels(5 * 5 * 3)) {
            let vol = LabelVolume::new(Dims::new(5, 5, 3).unwrap(), sp(), data).unwrap();
            let once = largest_component_per_class(&vol);
            prop_assert_eq!(largest_component_per_class(&once), once.clone());
            for c in [1u8, 2] {
                prop_assert!(once.count(c) <= vol.count(c));
            }
        }

        #[test]
        fn area_gate_monotone_in_ratio(areas in prop::collection::vec(0usize..40, 2..8), r1 in 1.0f64..2.0, extra in 0.0f64..2.0) {
            let s = stats(&areas);
            if check_area_ratios(&s, r1).is_ok() {
                prop_assert!(check_area_ratios(&s, r1 + extra).is_ok());
            }
        }
    }
}
