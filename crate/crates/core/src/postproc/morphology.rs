//! Binary morphology with spherical structuring elements, applied to the
//! union foreground of a label volume.
//!
//! A structuring element of radius `r` contains every offset of Euclidean
//! length `<= r`. Voxels outside the volume never constrain an erosion and
//! never receive a dilation, so closing is extensive even at the border.

use ndarray::{Array3, Zip};

use crate::distance::{nearest_label, squared_distance_to};
use crate::error::{Error, Result};
use crate::volume::LabelVolume;

pub const ED_RANGE: std::ops::RangeInclusive<i32> = -10..=10;
pub const CO_RANGE: std::ops::RangeInclusive<i32> = -5..=5;

pub fn dilate_mask(mask: &Array3<bool>, radius: u32) -> Array3<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let r2 = (radius * radius) as f64;
    squared_distance_to(mask).mapv(|d| d <= r2)
}

pub fn erode_mask(mask: &Array3<bool>, radius: u32) -> Array3<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let r2 = (radius * radius) as f64;
    let to_background = squared_distance_to(&mask.mapv(|m| !m));
    let mut out = mask.clone();
    Zip::from(&mut out)
        .and(&to_background)
        .for_each(|o, &d| *o = *o && d > r2);
    out
}

pub fn open_mask(mask: &Array3<bool>, radius: u32) -> Array3<bool> {
    dilate_mask(&erode_mask(mask, radius), radius)
}

pub fn close_mask(mask: &Array3<bool>, radius: u32) -> Array3<bool> {
    erode_mask(&dilate_mask(mask, radius), radius)
}

/// Morphology without range checks; used by the corruption operators too.
pub(crate) fn morph_labels(
    labels: &LabelVolume,
    erode_dilate: i32,
    open_close: i32,
) -> LabelVolume {
    if erode_dilate == 0 && open_close == 0 {
        return labels.clone();
    }
    let mut mask = labels.foreground();
    mask = match erode_dilate {
        r if r > 0 => dilate_mask(&mask, r as u32),
        r if r < 0 => erode_mask(&mask, r.unsigned_abs()),
        _ => mask,
    };
    mask = match open_close {
        r if r > 0 => close_mask(&mask, r as u32),
        r if r < 0 => open_mask(&mask, r.unsigned_abs()),
        _ => mask,
    };
    labels.with_data(nearest_label(labels.data(), &mask))
}

/// Erodes (`theta_ed < 0`) or dilates (`> 0`) the union mask, then opens
/// (`theta_co < 0`) or closes (`> 0`) it. Surviving voxels keep their label;
/// grown voxels take the label of the nearest original instance.
pub fn apply_morphology(labels: &LabelVolume, theta_ed: i32, theta_co: i32) -> Result<LabelVolume> {
    if !ED_RANGE.contains(&theta_ed) {
        return Err(Error::invalid(format!(
            "theta_ed = {theta_ed} outside [-10, 10]"
        )));
    }
    if !CO_RANGE.contains(&theta_co) {
        return Err(Error::invalid(format!(
            "theta_co = {theta_co} outside [-5, 5]"
        )));
    }
    Ok(morph_labels(labels, theta_ed, theta_co))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::paint_box;

    fn cube_volume(n: usize, lo: usize, side: usize) -> LabelVolume {
        let mut a = Array3::<u32>::zeros((n, n, n));
        paint_box(&mut a, [lo; 3], [lo + side; 3], 1);
        LabelVolume::from_array(a)
    }

    #[test]
    fn zero_params_identity() {
        let v = cube_volume(8, 2, 4);
        assert_eq!(apply_morphology(&v, 0, 0).unwrap(), v);
    }

    #[test]
    fn unit_dilation_adds_faces() {
        let v = cube_volume(8, 2, 4);
        let d = apply_morphology(&v, 1, 0).unwrap();
        assert_eq!(d.voxel_counts()[&1], 64 + 6 * 16);
    }

    #[test]
    fn closing_a_cube_is_identity() {
        // margin of r + 1 so that the border rule never applies
        let v = cube_volume(16, 6, 4);
        for r in 1..=5 {
            assert_eq!(apply_morphology(&v, 0, r).unwrap(), v, "radius {r}");
        }
    }

    #[test]
    fn erosion_removes_shell() {
        let v = cube_volume(8, 2, 4);
        let e = apply_morphology(&v, -1, 0).unwrap();
        assert_eq!(e.voxel_counts()[&1], 8);
    }

    #[test]
    fn out_of_range_rejected() {
        let v = cube_volume(4, 0, 1);
        assert!(apply_morphology(&v, 11, 0).is_err());
        assert!(apply_morphology(&v, 0, -6).is_err());
    }

    #[test]
    fn border_touching_closing_is_extensive() {
        let v = cube_volume(6, 0, 3);
        let c = apply_morphology(&v, 0, 2).unwrap();
        assert!(v
            .data()
            .iter()
            .zip(c.data().iter())
            .all(|(&a, &b)| a == 0 || b == a));
    }
}
