//! Distance-transform watershed that splits merged instances.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::Array3;
use rayon::prelude::*;

use crate::distance::distance_to;
use crate::error::{Error, Result};
use crate::volume::filter::gaussian_smooth;
use crate::volume::{connected_components, Connectivity, LabelVolume};

/// Smoothing knob in `[0, 1]` to Gaussian sigma in voxels.
pub const SIGMA_SCALE: f64 = 4.0;

#[derive(Clone, Copy, Debug)]
pub(crate) struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

/// Tight half-open bounding box of every id, indexed by id.
pub(crate) fn bounding_boxes(labels: &Array3<u32>) -> Vec<Option<BoundingBox>> {
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut boxes: Vec<Option<BoundingBox>> = vec![None; max + 1];
    for ((z, y, x), &l) in labels.indexed_iter() {
        if l == 0 {
            continue;
        }
        let p = [z, y, x];
        match &mut boxes[l as usize] {
            Some(b) => {
                for i in 0..3 {
                    b.lo[i] = b.lo[i].min(p[i]);
                    b.hi[i] = b.hi[i].max(p[i] + 1);
                }
            }
            slot => {
                *slot = Some(BoundingBox {
                    lo: p,
                    hi: p.map(|c| c + 1),
                })
            }
        }
    }
    boxes
}

struct Queued {
    height: f64,
    seq: u64,
    index: usize,
    label: u32,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // highest distance first, then first-in
    fn cmp(&self, other: &Self) -> Ordering {
        self.height
            .total_cmp(&other.height)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Splits one instance given as a padded crop mask. Returns region ids per
/// crop voxel (0 outside the instance) and the region count.
fn split_one(mask: &Array3<bool>, sigma: f64, quantile: f64) -> (Array3<u32>, u32) {
    let dt = distance_to(&mask.mapv(|m| !m));
    let smoothed = gaussian_smooth(&dt, sigma);

    let mut values: Vec<f64> = mask
        .iter()
        .zip(smoothed.iter())
        .filter(|(m, _)| **m)
        .map(|(_, v)| *v)
        .collect();
    values.sort_unstable_by(f64::total_cmp);
    let threshold = values[((quantile * (values.len() - 1) as f64).floor()) as usize];

    let marker_mask = ndarray::Zip::from(mask)
        .and(&smoothed)
        .map_collect(|&m, &v| m && v >= threshold);
    let markers = connected_components(&marker_mask, Connectivity::TwentySix);
    let n_markers = markers.max_id();
    if n_markers < 2 {
        return (mask.mapv(u32::from), 1);
    }

    let dim = mask.dim();
    let shape = [dim.0, dim.1, dim.2];
    let strides = [dim.1 * dim.2, dim.2, 1];
    let flat_mask = mask.as_slice().expect("standard layout");
    let flat_height = smoothed.as_slice().expect("standard layout");
    let mut region: Vec<u32> = markers.data().iter().copied().collect();
    let offsets = Connectivity::TwentySix.offsets();

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for (index, &l) in region.iter().enumerate() {
        if l != 0 {
            heap.push(Queued {
                height: flat_height[index],
                seq,
                index,
                label: l,
            });
            seq += 1;
        }
    }
    while let Some(Queued { index, label, .. }) = heap.pop() {
        let p = [
            index / strides[0],
            (index / strides[1]) % shape[1],
            index % shape[2],
        ];
        for o in &offsets {
            let Some(q) = crate::distance::offset_index(p, o, shape) else {
                continue;
            };
            let qi = q[0] * strides[0] + q[1] * strides[1] + q[2];
            if flat_mask[qi] && region[qi] == 0 {
                region[qi] = label;
                heap.push(Queued {
                    height: flat_height[qi],
                    seq,
                    index: qi,
                    label,
                });
                seq += 1;
            }
        }
    }
    // fragments no marker could reach form one extra region
    let mut count = n_markers;
    if region.iter().zip(flat_mask).any(|(&r, &m)| m && r == 0) {
        count += 1;
        for (r, &m) in region.iter_mut().zip(flat_mask) {
            if m && *r == 0 {
                *r = count;
            }
        }
    }
    (Array3::from_shape_vec(dim, region).unwrap(), count)
}

/// Marker-based watershed on the smoothed interior distance transform of
/// every instance. Both knobs zero leaves the volume untouched.
pub fn split_instances(
    labels: &LabelVolume,
    theta_sigma: f64,
    theta_t: f64,
) -> Result<LabelVolume> {
    for (name, v) in [("theta_ssigma", theta_sigma), ("theta_st", theta_t)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
        }
    }
    if theta_sigma == 0.0 && theta_t == 0.0 {
        return Ok(labels.clone());
    }
    let sigma = SIGMA_SCALE * theta_sigma;
    let pad = 1 + if sigma > 0.0 {
        (4.0 * sigma).ceil() as usize
    } else {
        0
    };
    let data = labels.data();
    let shape = labels.shape();
    let boxes = bounding_boxes(data);

    let pieces: Vec<(u32, BoundingBox, Array3<u32>, u32)> = boxes
        .par_iter()
        .enumerate()
        .filter_map(|(id, b)| b.map(|b| (id as u32, b)))
        .map(|(id, b)| {
            let dims = [0, 1, 2].map(|i| b.hi[i] - b.lo[i] + 2 * pad);
            let mask = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(z, y, x)| {
                let c = [z, y, x];
                let mut g = [0usize; 3];
                for i in 0..3 {
                    let v = (b.lo[i] + c[i]) as isize - pad as isize;
                    if v < 0 || v >= shape[i] as isize {
                        return false;
                    }
                    g[i] = v as usize;
                }
                data[g] == id
            });
            let (regions, count) = split_one(&mask, sigma, theta_t);
            (id, b, regions, count)
        })
        .collect();

    let mut out = Array3::<u32>::zeros(data.dim());
    let mut next = 0u32;
    for (_, b, regions, count) in pieces {
        for ((z, y, x), &r) in regions.indexed_iter() {
            if r == 0 {
                continue;
            }
            let g = [z + b.lo[0] - pad, y + b.lo[1] - pad, x + b.lo[2] - pad];
            out[g] = next + r;
        }
        next += count;
    }
    Ok(labels.with_data(out))
}
