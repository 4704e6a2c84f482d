//! Per-instance crops, intensity preprocessing and geometric features.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen};
use ndarray::{s, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::distance_to;
use crate::volume::{
    read_volume, shape_of, write_volume, IntensityVolume, LabelVolume, Shape, Spacing,
};
use crate::{Error, Result};

pub const DEFAULT_MARGIN: usize = 4;

/// Half-open voxel box `lo..hi` in volume coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.hi[i] - self.lo[i])
    }
}

/// Location of a crop within its source volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropMeta {
    pub image: String,
    pub id: u32,
    /// Tight bounding box expanded by `margin` and clipped to the volume.
    pub bbox: BoundingBox,
    /// Tight bounding box of the instance.
    pub tight: BoundingBox,
    pub margin: usize,
    pub volume_shape: Shape,
    pub spacing: Spacing,
}

impl CropMeta {
    /// Whether clipping at the volume border removed part of the margin.
    pub fn truncated(&self) -> bool {
        (0..3).any(|i| {
            self.tight.lo[i] - self.bbox.lo[i] < self.margin
                || self.bbox.hi[i] - self.tight.hi[i] < self.margin
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceCrop {
    pub meta: CropMeta,
    pub intensity: Array3<f32>,
    pub mask: Array3<bool>,
}

impl InstanceCrop {
    /// `<image>/<id>`, the key used by seed files and feature tables.
    pub fn key(&self) -> String {
        format!("{}/{}", self.meta.image, self.meta.id)
    }
}

fn tight_boxes(labels: &LabelVolume) -> BTreeMap<u32, BoundingBox> {
    let mut boxes: BTreeMap<u32, BoundingBox> = BTreeMap::new();
    for ((z, y, x), &l) in labels.data().indexed_iter() {
        if l == 0 {
            continue;
        }
        let p = [z, y, x];
        boxes
            .entry(l)
            .and_modify(|b| {
                for i in 0..3 {
                    b.lo[i] = b.lo[i].min(p[i]);
                    b.hi[i] = b.hi[i].max(p[i] + 1);
                }
            })
            .or_insert(BoundingBox {
                lo: p,
                hi: p.map(|v| v + 1),
            });
    }
    boxes
}

/// One crop per instance id, in ascending id order.
pub fn extract_instances(
    image: &str,
    labels: &LabelVolume,
    intensity: &IntensityVolume,
    margin: usize,
) -> Result<Vec<InstanceCrop>> {
    let shape = labels.shape();
    if intensity.shape() != shape {
        return Err(Error::Dimension {
            left: shape,
            right: intensity.shape(),
        });
    }
    let boxes: Vec<(u32, BoundingBox)> = tight_boxes(labels).into_iter().collect();
    Ok(boxes
        .into_par_iter()
        .map(|(id, tight)| {
            let bbox = BoundingBox {
                lo: tight.lo.map(|v| v.saturating_sub(margin)),
                hi: [0, 1, 2].map(|i| (tight.hi[i] + margin).min(shape[i])),
            };
            let sl = s![
                bbox.lo[0]..bbox.hi[0],
                bbox.lo[1]..bbox.hi[1],
                bbox.lo[2]..bbox.hi[2]
            ];
            InstanceCrop {
                meta: CropMeta {
                    image: image.to_owned(),
                    id,
                    bbox,
                    tight,
                    margin,
                    volume_shape: shape,
                    spacing: intensity.spacing(),
                },
                intensity: intensity.data().slice(sl).to_owned(),
                mask: labels.data().slice(sl).mapv(|l| l == id),
            }
        })
        .collect())
}

/// Paints every crop mask back into an empty volume of `shape`.
pub fn reinsert(shape: Shape, crops: &[InstanceCrop]) -> LabelVolume {
    let mut out = Array3::<u32>::zeros((shape[0], shape[1], shape[2]));
    for c in crops {
        let b = c.meta.bbox;
        let mut view = out.slice_mut(s![b.lo[0]..b.hi[0], b.lo[1]..b.hi[1], b.lo[2]..b.hi[2]]);
        for (dst, &m) in view.iter_mut().zip(c.mask.iter()) {
            if m {
                *dst = c.meta.id;
            }
        }
    }
    LabelVolume::from_array(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocessing {
    /// Intensity replaced by the binary mask.
    Mask,
    /// Intensity outside the mask attenuated by `exp(-d / sigma)`, `d` being
    /// the Euclidean voxel distance to the mask.
    Distance,
}

impl std::str::FromStr for Preprocessing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Preprocessing::Mask),
            "distance" => Ok(Preprocessing::Distance),
            other => Err(Error::invalid(format!(
                "unknown preprocessing `{other}` (mask|distance)"
            ))),
        }
    }
}

/// Preprocessed intensity channel. Always reads the crop's original
/// intensity, so repeated application gives the same result.
pub fn preprocess_crop(
    crop: &InstanceCrop,
    method: Preprocessing,
    sigma: f64,
) -> Result<Array3<f32>> {
    match method {
        Preprocessing::Mask => Ok(crop.mask.mapv(|m| if m { 1.0 } else { 0.0 })),
        Preprocessing::Distance => {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::invalid(format!("sigma = {sigma} must be positive")));
            }
            let d = distance_to(&crop.mask);
            let mut out = crop.intensity.clone();
            for ((o, &m), &dist) in out.iter_mut().zip(crop.mask.iter()).zip(d.iter()) {
                if !m {
                    *o = (*o as f64 * (-dist / sigma).exp()) as f32;
                }
            }
            Ok(out)
        }
    }
}

/// Geometric description of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub volume: f64,
    /// Voxel faces not shared with another mask voxel.
    pub surface_faces: f64,
    /// Tight bounding-box extents (z, y, x).
    pub extent: [f64; 3],
    /// Principal-axis lengths, longest first.
    pub axis_lengths: [f64; 3],
    pub elongation: f64,
    pub sphericity: f64,
    /// Centroid in volume voxel coordinates (z, y, x).
    pub centroid: [f64; 3],
    pub intensity_mean: f64,
    pub intensity_std: f64,
}

pub const FEATURE_COLUMNS: [&str; 15] = [
    "volume",
    "surface_faces",
    "extent_z",
    "extent_y",
    "extent_x",
    "axis_major",
    "axis_middle",
    "axis_minor",
    "elongation",
    "sphericity",
    "centroid_z",
    "centroid_y",
    "centroid_x",
    "intensity_mean",
    "intensity_std",
];

impl FeatureVector {
    /// Values in [`FEATURE_COLUMNS`] order.
    pub fn to_row(&self) -> [f64; 15] {
        let [ez, ey, ex] = self.extent;
        let [a0, a1, a2] = self.axis_lengths;
        let [cz, cy, cx] = self.centroid;
        [
            self.volume,
            self.surface_faces,
            ez,
            ey,
            ex,
            a0,
            a1,
            a2,
            self.elongation,
            self.sphericity,
            cz,
            cy,
            cx,
            self.intensity_mean,
            self.intensity_std,
        ]
    }
}

/// Features from the mask's voxel coordinates. Principal-axis lengths treat
/// voxels as unit cubes, so an axis-aligned box of side `L` has length `L`.
pub fn geometric_features(crop: &InstanceCrop) -> Result<FeatureVector> {
    let mask = &crop.mask;
    let dims = shape_of(mask);
    let mut n = 0usize;
    let mut faces = 0usize;
    let mut sum = [0.0f64; 3];
    let (mut isum, mut isq) = (0.0f64, 0.0f64);
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for ((z, y, x), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let p = [z, y, x];
        n += 1;
        for i in 0..3 {
            sum[i] += p[i] as f64;
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i] + 1);
            for step in [-1isize, 1] {
                let mut q = p;
                let v = p[i] as isize + step;
                if v < 0 || v as usize >= dims[i] {
                    faces += 1;
                    continue;
                }
                q[i] = v as usize;
                if !mask[q] {
                    faces += 1;
                }
            }
        }
        let v = crop.intensity[p] as f64;
        isum += v;
        isq += v * v;
    }
    if n == 0 {
        return Err(Error::invalid(format!(
            "instance {} has an empty mask",
            crop.meta.id
        )));
    }
    let nf = n as f64;
    let mean = sum.map(|s| s / nf);
    let mut cov = Matrix3::<f64>::zeros();
    for ((z, y, x), &m) in mask.indexed_iter() {
        if m {
            let d = [z as f64 - mean[0], y as f64 - mean[1], x as f64 - mean[2]];
            for i in 0..3 {
                for j in 0..3 {
                    cov[(i, j)] += d[i] * d[j];
                }
            }
        }
    }
    cov /= nf;
    let eig = SymmetricEigen::new(cov);
    let mut axes = [0, 1, 2].map(|i| (12.0 * eig.eigenvalues[i].max(0.0) + 1.0).sqrt());
    axes.sort_by(|a, b| b.total_cmp(a));
    let intensity_mean = isum / nf;
    let a = faces as f64;
    Ok(FeatureVector {
        volume: nf,
        surface_faces: a,
        extent: [0, 1, 2].map(|i| (hi[i] - lo[i]) as f64),
        axis_lengths: axes,
        elongation: axes[0] / axes[2],
        sphericity: std::f64::consts::PI.cbrt() * (6.0 * nf).powf(2.0 / 3.0) / a,
        centroid: [0, 1, 2].map(|i| mean[i] + crop.meta.bbox.lo[i] as f64),
        intensity_mean,
        intensity_std: (isq / nf - intensity_mean * intensity_mean).max(0.0).sqrt(),
    })
}

/// Directory of one crop: `<root>/crops/<image>/<id>`.
pub fn crop_dir(root: &Path, image: &str, id: u32) -> PathBuf {
    root.join("crops").join(image).join(id.to_string())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Persists `intensity.i3d`, `mask.i3d` and `meta.json` for each crop.
pub fn write_crops(root: &Path, crops: &[InstanceCrop]) -> Result<()> {
    crops.par_iter().try_for_each(|c| {
        let dir = crop_dir(root, &c.meta.image, c.meta.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let intensity = IntensityVolume::new(c.intensity.clone(), c.meta.spacing)?;
        write_volume(&intensity.into(), dir.join("intensity.i3d"))?;
        let mask = LabelVolume::new(c.mask.mapv(u32::from), c.meta.spacing)?;
        write_volume(&mask.into(), dir.join("mask.i3d"))?;
        write_json(&c.meta, &dir.join("meta.json"))
    })
}

pub fn read_crop(dir: &Path) -> Result<InstanceCrop> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CropMeta = serde_json::from_str(&text)?;
    let intensity = read_volume(dir.join("intensity.i3d"))?
        .into_intensity()?
        .into_data();
    let mask = read_volume(dir.join("mask.i3d"))?
        .into_labels()?
        .into_data()
        .mapv(|v| v != 0);
    if shape_of(&intensity) != meta.bbox.extent() || shape_of(&mask) != meta.bbox.extent() {
        return Err(Error::Format(format!(
            "{}: crop files disagree with meta.json",
            dir.display()
        )));
    }
    Ok(InstanceCrop {
        meta,
        intensity,
        mask,
    })
}

/// All crops under `<root>/crops`, ordered by image name then id.
pub fn read_crops(root: &Path) -> Result<Vec<InstanceCrop>> {
    let base = root.join("crops");
    let mut dirs = Vec::new();
    for image in sorted_dirs(&base)? {
        let mut ids: Vec<(u32, PathBuf)> = sorted_dirs(&image)?
            .into_iter()
            .filter_map(|p| {
                p.file_name()?
                    .to_str()?
                    .parse()
                    .ok()
                    .map(|id| (id, p.clone()))
            })
            .collect();
        ids.sort_by_key(|(id, _)| *id);
        dirs.extend(ids.into_iter().map(|(_, p)| p));
    }
    dirs.par_iter().map(|d| read_crop(d)).collect()
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// One feature-table row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub key: String,
    pub values: Vec<f64>,
}

/// CSV with a `key` column followed by [`FEATURE_COLUMNS`].
pub fn write_features_csv<W: std::io::Write>(w: W, rows: &[FeatureRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["key"];
    header.extend(FEATURE_COLUMNS);
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.key.clone()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()
        .map_err(|e| Error::Format(format!("writing features: {e}")))
}

/// Reads any CSV whose first column is `key` and remaining columns are
/// numeric; returns the column names after `key`.
pub fn read_features_csv<R: std::io::Read>(r: R) -> Result<(Vec<String>, Vec<FeatureRow>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.first().map(String::as_str) != Some("key") {
        return Err(Error::Format(
            "feature table must start with a `key` column".into(),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("non-numeric feature `{v}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(FeatureRow {
            key: rec[0].to_owned(),
            values,
        });
    }
    Ok((header[1..].to_vec(), rows))
}

/// Features for every crop, keyed `<image>/<id>`.
pub fn feature_rows(crops: &[InstanceCrop]) -> Result<Vec<FeatureRow>> {
    crops
        .par_iter()
        .map(|c| {
            Ok(FeatureRow {
                key: c.key(),
                values: geometric_features(c)?.to_row().to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::paint_box;

    fn cube_scene() -> (LabelVolume, IntensityVolume) {
        let mut a = Array3::<u32>::zeros((12, 12, 12));
        paint_box(&mut a, [4, 4, 4], [8, 8, 8], 1);
        (
            LabelVolume::from_array(a),
            IntensityVolume::filled([12, 12, 12], 0.5).unwrap(),
        )
    }

    #[test]
    fn centered_cube_box() {
        let (l, i) = cube_scene();
        let crops = extract_instances("img", &l, &i, 2).unwrap();
        assert_eq!(crops.len(), 1);
        let b = crops[0].meta.bbox;
        assert_eq!((b.lo, b.hi), ([2; 3], [10; 3]));
        assert!(!crops[0].meta.truncated());
    }

    #[test]
    fn border_box_is_clipped() {
        let mut a = Array3::<u32>::zeros((10, 10, 10));
        paint_box(&mut a, [0, 1, 5], [3, 4, 10], 1);
        let crops = extract_instances(
            "img",
            &LabelVolume::from_array(a),
            &IntensityVolume::filled([10; 3], 0.0).unwrap(),
            3,
        )
        .unwrap();
        let b = crops[0].meta.bbox;
        assert_eq!((b.lo, b.hi), ([0, 0, 2], [6, 7, 10]));
        assert!(crops[0].meta.truncated());
    }

    #[test]
    fn cube_features() {
        let (l, i) = cube_scene();
        let f = geometric_features(&extract_instances("img", &l, &i, 4).unwrap()[0]).unwrap();
        assert_eq!(f.volume, 64.0);
        assert_eq!(f.surface_faces, 96.0);
        let expected = std::f64::consts::PI.cbrt() * 384f64.powf(2.0 / 3.0) / 96.0;
        assert!((f.sphericity - expected).abs() < 1e-12);
        assert!((f.sphericity - 0.806).abs() < 1e-3);
        for a in f.axis_lengths {
            assert!((a - 4.0).abs() < 1e-9);
        }
        assert_eq!(f.centroid, [5.5; 3]);
        assert_eq!(f.intensity_mean, 0.5);
        assert!(f.intensity_std.abs() < 1e-12);
    }

    #[test]
    fn rod_is_elongated() {
        let mut a = Array3::<u32>::zeros((5, 5, 12));
        paint_box(&mut a, [2, 2, 2], [3, 3, 10], 1);
        let crops = extract_instances(
            "img",
            &LabelVolume::from_array(a),
            &IntensityVolume::filled([5, 5, 12], 0.0).unwrap(),
            1,
        )
        .unwrap();
        let f = geometric_features(&crops[0]).unwrap();
        assert_eq!(f.extent, [1.0, 1.0, 8.0]);
        assert!((f.elongation - 8.0).abs() < 1e-9);
        assert!(f.axis_lengths[0] >= f.axis_lengths[1] && f.axis_lengths[1] >= f.axis_lengths[2]);
    }

    #[test]
    fn distance_needs_positive_sigma() {
        let (l, i) = cube_scene();
        let c = &extract_instances("img", &l, &i, 1).unwrap()[0];
        assert!(preprocess_crop(c, Preprocessing::Distance, 0.0).is_err());
        let m = preprocess_crop(c, Preprocessing::Mask, 0.0).unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 64);
    }

    #[test]
    fn features_csv_roundtrip() {
        let rows = vec![FeatureRow {
            key: "a/1".into(),
            values: (0..15).map(|v| v as f64 * 0.1).collect(),
        }];
        let mut buf = Vec::new();
        write_features_csv(&mut buf, &rows).unwrap();
        let (cols, back) = read_features_csv(buf.as_slice()).unwrap();
        assert_eq!(cols, FEATURE_COLUMNS);
        assert_eq!(back, rows);
    }
}
