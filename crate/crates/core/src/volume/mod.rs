//! Dense 3D voxel grids.
//!
//! All volumes are stored in (z, y, x) order, C-contiguous, with z the
//! slowest axis. Label volumes use `0` for background and positive ids for
//! instances; intensity volumes hold values normalized to `[0, 1]`.

mod components;
pub mod filter;
mod io;
mod tiff;

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use components::{connected_components, Connectivity};
pub use io::{decode_volume, encode_volume, read_volume, write_volume, VolumeHeader, MAGIC};
pub use tiff::{decode_tiff, import_tiff};

pub type Shape = [usize; 3];
pub type Spacing = [f64; 3];

pub const UNIT_SPACING: Spacing = [1.0, 1.0, 1.0];

/// Element type of an on-disk payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U16,
    U32,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::U32 | Dtype::F32 => 4,
        }
    }

    /// Smallest unsigned type able to hold `max`.
    pub fn for_max_label(max: u32) -> Dtype {
        if max <= u8::MAX as u32 {
            Dtype::U8
        } else if max <= u16::MAX as u32 {
            Dtype::U16
        } else {
            Dtype::U32
        }
    }
}

pub fn shape_of<T>(a: &Array3<T>) -> Shape {
    let (z, y, x) = a.dim();
    [z, y, x]
}

fn check_spacing(spacing: &Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "spacing must be positive, got {spacing:?}"
        )))
    }
}

fn check_shape(shape: Shape) -> Result<()> {
    if shape.iter().all(|&n| n >= 1) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "shape components must be >= 1, got {shape:?}"
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntensityVolume {
    data: Array3<f32>,
    spacing: Spacing,
    storage: Dtype,
}

impl IntensityVolume {
    pub fn new(data: Array3<f32>, spacing: Spacing) -> Result<Self> {
        check_shape(shape_of(&data))?;
        check_spacing(&spacing)?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            data,
            spacing,
            storage: Dtype::F32,
        })
    }

    /// Constant-valued volume.
    pub fn filled(shape: Shape, value: f32) -> Result<Self> {
        Self::new(
            Array3::from_elem((shape[0], shape[1], shape[2]), value),
            UNIT_SPACING,
        )
    }

    pub(crate) fn with_storage(mut self, storage: Dtype) -> Self {
        self.storage = storage;
        self
    }

    pub fn shape(&self) -> Shape {
        shape_of(&self.data)
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    /// Dtype used when this volume is written back to disk.
    pub fn storage(&self) -> Dtype {
        self.storage
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    data: Array3<u32>,
    spacing: [u64; 3],
}

// Spacing is stored as raw bits so that LabelVolume can be Eq.
impl LabelVolume {
    pub fn new(data: Array3<u32>, spacing: Spacing) -> Result<Self> {
        check_shape(shape_of(&data))?;
        check_spacing(&spacing)?;
        Ok(Self {
            data,
            spacing: spacing.map(f64::to_bits),
        })
    }

    /// Unit-spacing volume; panics on an empty shape.
    pub fn from_array(data: Array3<u32>) -> Self {
        Self::new(data, UNIT_SPACING).expect("volume shape must be non-empty")
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::from_array(Array3::zeros((shape[0], shape[1], shape[2])))
    }

    pub fn shape(&self) -> Shape {
        shape_of(&self.data)
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing.map(f64::from_bits)
    }

    pub fn data(&self) -> &Array3<u32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<u32> {
        self.data
    }

    /// Same spacing, new voxel data.
    pub fn with_data(&self, data: Array3<u32>) -> Self {
        Self {
            data,
            spacing: self.spacing,
        }
    }

    pub fn max_id(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Sorted distinct non-zero ids.
    pub fn ids(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.voxel_counts().into_keys().collect();
        seen.sort_unstable();
        seen
    }

    pub fn instance_count(&self) -> usize {
        self.voxel_counts().len()
    }

    /// Voxel count per non-zero id.
    pub fn voxel_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for &v in self.data.iter().filter(|v| **v != 0) {
            *counts.entry(v).or_insert(0) += 1;
        }
        counts
    }

    pub fn foreground(&self) -> Array3<bool> {
        self.data.mapv(|v| v != 0)
    }

    /// Maps ids to `1..=n` preserving their relative order.
    pub fn relabel_consecutive(&self) -> LabelVolume {
        let ids = self.ids();
        let consecutive = ids.iter().enumerate().all(|(i, &id)| id == i as u32 + 1);
        if consecutive {
            return self.clone();
        }
        let lut: BTreeMap<u32, u32> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i as u32 + 1))
            .collect();
        self.with_data(self.data.mapv(|v| if v == 0 { 0 } else { lut[&v] }))
    }

    pub fn is_consecutive(&self) -> bool {
        self.ids()
            .iter()
            .enumerate()
            .all(|(i, &id)| id == i as u32 + 1)
    }

    pub fn check_same_shape(&self, other: &LabelVolume) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::Dimension {
                left: self.shape(),
                right: other.shape(),
            })
        }
    }
}

/// Sets every voxel of the half-open box `lo..hi` to `id`, clipped to the array.
pub fn paint_box(data: &mut Array3<u32>, lo: [usize; 3], hi: [usize; 3], id: u32) {
    let shape = shape_of(data);
    for z in lo[0]..hi[0].min(shape[0]) {
        for y in lo[1]..hi[1].min(shape[1]) {
            for x in lo[2]..hi[2].min(shape[2]) {
                data[[z, y, x]] = id;
            }
        }
    }
}

/// Either kind of volume, as stored in an `.i3d` file.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Intensity(IntensityVolume),
    Label(LabelVolume),
}

impl Volume {
    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            Volume::Label(l) => Ok(l),
            Volume::Intensity(_) => Err(Error::Format("expected a label volume".into())),
        }
    }

    pub fn into_intensity(self) -> Result<IntensityVolume> {
        match self {
            Volume::Intensity(v) => Ok(v),
            Volume::Label(_) => Err(Error::Format("expected an intensity volume".into())),
        }
    }
}

impl From<LabelVolume> for Volume {
    fn from(v: LabelVolume) -> Self {
        Volume::Label(v)
    }
}

impl From<IntensityVolume> for Volume {
    fn from(v: IntensityVolume) -> Self {
        Volume::Intensity(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn relabel_keeps_partition_and_order() {
        let mut a = Array3::<u32>::zeros((2, 3, 3));
        a[[0, 0, 0]] = 7;
        a[[0, 0, 1]] = 7;
        a[[1, 2, 2]] = 3;
        a[[1, 1, 1]] = 40;
        let v = LabelVolume::from_array(a);
        let r = v.relabel_consecutive();
        assert_eq!(r.ids(), vec![1, 2, 3]);
        assert_eq!(r.data()[[1, 2, 2]], 1);
        assert_eq!(r.data()[[0, 0, 0]], 2);
        assert_eq!(r.data()[[0, 0, 1]], 2);
        assert_eq!(r.data()[[1, 1, 1]], 3);
        assert!(r.is_consecutive());
    }

    #[test]
    fn dtype_selection() {
        assert_eq!(Dtype::for_max_label(0), Dtype::U8);
        assert_eq!(Dtype::for_max_label(255), Dtype::U8);
        assert_eq!(Dtype::for_max_label(256), Dtype::U16);
        assert_eq!(Dtype::for_max_label(70000), Dtype::U32);
    }

    #[test]
    fn intensity_range_checked() {
        let a = Array3::from_elem((1, 1, 2), 1.5f32);
        assert!(IntensityVolume::new(a, UNIT_SPACING).is_err());
        assert!(LabelVolume::new(Array3::zeros((0, 1, 1)), UNIT_SPACING).is_err());
    }
}
