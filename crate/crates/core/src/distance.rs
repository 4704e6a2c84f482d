//! Exact Euclidean distance transforms on the voxel grid (separable lower
//! envelope of parabolas, Felzenszwalb & Huttenlocher).
//!
//! Only voxels inside the volume can be sites; nothing beyond the border is
//! assumed to be foreground or background.

use std::collections::BTreeMap;

use ndarray::{Array3, Axis};

/// Squared distance along one line. `f[i]` is `INFINITY` for non-sites.
fn envelope_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
            continue;
        }
        loop {
            let p = *v.last().unwrap();
            let s =
                ((fq + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
                if v.is_empty() {
                    break;
                }
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest voxel where
/// `sites` is true; `INFINITY` everywhere if there are no sites.
pub fn squared_distance_to(sites: &Array3<bool>) -> Array3<f64> {
    let mut current = sites.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut line = Vec::new();
    let mut buf = Vec::new();
    for axis in 0..3 {
        for mut lane in current.lanes_mut(Axis(axis)) {
            line.clear();
            line.extend(lane.iter().copied());
            buf.resize(line.len(), 0.0);
            envelope_1d(&line, &mut buf, &mut v, &mut z);
            for (dst, &src) in lane.iter_mut().zip(&buf) {
                *dst = src;
            }
        }
    }
    current
}

/// Euclidean distance to the nearest site.
pub fn distance_to(sites: &Array3<bool>) -> Array3<f64> {
    squared_distance_to(sites).mapv(f64::sqrt)
}

/// Integer offsets grouped by squared length, up to `max_sq` inclusive.
pub struct OffsetShells {
    shells: BTreeMap<i64, Vec<[isize; 3]>>,
}

impl OffsetShells {
    pub fn new(max_sq: i64) -> Self {
        let r = (max_sq as f64).sqrt().floor() as isize;
        let mut shells: BTreeMap<i64, Vec<[isize; 3]>> = BTreeMap::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let d2 = (dz * dz + dy * dy + dx * dx) as i64;
                    if d2 <= max_sq {
                        shells.entry(d2).or_default().push([dz, dy, dx]);
                    }
                }
            }
        }
        Self { shells }
    }

    pub fn shell(&self, sq: i64) -> &[[isize; 3]] {
        self.shells.get(&sq).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All offsets with squared length in `1..=max_sq`.
    pub fn ball(&self, max_sq: i64) -> impl Iterator<Item = &[isize; 3]> {
        self.shells
            .range(1..)
            .take_while(move |(&sq, _)| sq <= max_sq)
            .flat_map(|(_, offs)| offs.iter())
    }
}

#[inline]
pub(crate) fn offset_index(p: [usize; 3], o: &[isize; 3], shape: [usize; 3]) -> Option<[usize; 3]> {
    let z = p[0] as isize + o[0];
    let y = p[1] as isize + o[1];
    let x = p[2] as isize + o[2];
    if z < 0
        || y < 0
        || x < 0
        || z >= shape[0] as isize
        || y >= shape[1] as isize
        || x >= shape[2] as isize
    {
        None
    } else {
        Some([z as usize, y as usize, x as usize])
    }
}

/// For every voxel where `wanted` is true, the smallest label among the
/// nearest non-zero voxels of `labels` (Euclidean, ties to the lower id).
/// Returns 0 where `labels` has no foreground.
pub fn nearest_label(labels: &Array3<u32>, wanted: &Array3<bool>) -> Array3<u32> {
    let shape = {
        let (a, b, c) = labels.dim();
        [a, b, c]
    };
    let sq = squared_distance_to(&labels.mapv(|l| l != 0));
    let max_sq = wanted
        .indexed_iter()
        .filter(|(_, &w)| w)
        .map(|(p, _)| sq[p])
        .filter(|d| d.is_finite())
        .fold(0.0f64, f64::max) as i64;
    let shells = OffsetShells::new(max_sq);
    let mut out = Array3::<u32>::zeros(labels.dim());
    for ((z, y, x), &w) in wanted.indexed_iter() {
        if !w {
            continue;
        }
        let here = labels[[z, y, x]];
        if here != 0 {
            out[[z, y, x]] = here;
            continue;
        }
        let d2 = sq[[z, y, x]];
        if !d2.is_finite() {
            continue;
        }
        let best = shells
            .shell(d2 as i64)
            .iter()
            .filter_map(|o| offset_index([z, y, x], o, shape))
            .map(|q| labels[q])
            .filter(|&l| l != 0)
            .min()
            .unwrap_or(0);
        out[[z, y, x]] = best;
    }
    out
}
