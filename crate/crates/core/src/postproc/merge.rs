//! Adjacency-graph merging of over-split instances.
//!
//! Two instances are adjacent when some pair of their voxels lies within
//! Chebyshev distance 2, i.e. a hairline gap of one background voxel is
//! tolerated. Each edge is scored from three geometric features in `[0, 1]`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{shape_of, LabelVolume};

/// Weighted scores above this merge the pair.
pub const MERGE_THRESHOLD: f64 = 0.5;

/// Half-length of the sampled 1D profiles, in voxels.
const PROFILE_HALF_LENGTH: i32 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyEdge {
    pub a: u32,
    pub b: u32,
    /// Contour continuity across the interface.
    pub f_c: f64,
    /// Smoothness of the connecting surface.
    pub f_s: f64,
    /// Contact area relative to the smaller instance's surface.
    pub f_r: f64,
    pub score: f64,
}

pub fn edge_score(weights: [f64; 3], f_c: f64, f_s: f64, f_r: f64) -> f64 {
    weights[0] * f_c + weights[1] * f_s + weights[2] * f_r
}

#[derive(Default)]
struct InstanceStats {
    count: usize,
    sum: [f64; 3],
    surface_faces: usize,
}

#[derive(Default)]
struct Contact {
    midpoints: Vec<[f64; 3]>,
}

fn get(labels: &Array3<u32>, p: [isize; 3]) -> u32 {
    let s = shape_of(labels);
    if (0..3).all(|i| p[i] >= 0 && (p[i] as usize) < s[i]) {
        labels[[p[0] as usize, p[1] as usize, p[2] as usize]]
    } else {
        0
    }
}

fn chebyshev2_forward_offsets() -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for dz in -2..=2isize {
        for dy in -2..=2isize {
            for dx in -2..=2isize {
                if (dz, dy, dx) > (0, 0, 0) {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

fn orthonormal_basis(u: Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if u.x.abs() <= u.y.abs() && u.x.abs() <= u.z.abs() {
        Vector3::x()
    } else if u.y.abs() <= u.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let v = u.cross(&helper).normalize();
    let w = u.cross(&v).normalize();
    (v, w)
}

/// Fraction of 3x3 parallel profiles through the contact centroid, along
/// the centroid-difference axis, that pass from `a` to `b` with at most one
/// background sample in between.
fn contour_continuity(
    labels: &Array3<u32>,
    a: u32,
    b: u32,
    center: Vector3<f64>,
    axis: Vector3<f64>,
) -> f64 {
    let (v, w) = orthonormal_basis(axis);
    let mut continuous = 0;
    for i in -1..=1 {
        for j in -1..=1 {
            let origin = center + v * i as f64 + w * j as f64;
            let profile: Vec<u32> = (-PROFILE_HALF_LENGTH..=PROFILE_HALF_LENGTH)
                .map(|t| {
                    let p = origin + axis * t as f64;
                    get(labels, [p.x, p.y, p.z].map(|c| (c + 0.5).floor() as isize))
                })
                .collect();
            let mut last: Option<(u32, usize)> = None;
            let mut ok = false;
            for (k, &l) in profile.iter().enumerate() {
                if l == 0 {
                    continue;
                }
                if let Some((prev, at)) = last {
                    if prev == a && l == b && k - at - 1 <= 1 {
                        ok = true;
                    }
                }
                last = Some((l, k));
            }
            if ok {
                continuous += 1;
            }
        }
    }
    continuous as f64 / 9.0
}

fn plane_fit_rms(points: &[[f64; 3]]) -> f64 {
    let n = points.len() as f64;
    let mean = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
        / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    eig.eigenvalues.min().max(0.0).sqrt()
}

/// Builds the adjacency graph with per-edge features and scores.
pub fn adjacency_graph(labels: &LabelVolume, weights: [f64; 3]) -> Vec<AdjacencyEdge> {
    let data = labels.data();
    let shape = labels.shape();
    let forward = chebyshev2_forward_offsets();
    let axes: [[isize; 3]; 3] = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];

    let mut stats: BTreeMap<u32, InstanceStats> = BTreeMap::new();
    let mut edges: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut contacts: BTreeMap<(u32, u32), Contact> = BTreeMap::new();

    for ((z, y, x), &a) in data.indexed_iter() {
        if a == 0 {
            continue;
        }
        let p = [z as isize, y as isize, x as isize];
        let st = stats.entry(a).or_default();
        st.count += 1;
        st.sum[0] += z as f64;
        st.sum[1] += y as f64;
        st.sum[2] += x as f64;
        for e in axes {
            for sign in [-1, 1] {
                if get(
                    data,
                    [p[0] + sign * e[0], p[1] + sign * e[1], p[2] + sign * e[2]],
                ) != a
                {
                    st.surface_faces += 1;
                }
            }
        }
        for o in &forward {
            let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
            if (0..3).any(|i| q[i] < 0 || q[i] as usize >= shape[i]) {
                continue;
            }
            let b = data[[q[0] as usize, q[1] as usize, q[2] as usize]];
            if b != 0 && b != a {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        for e in axes {
            let q1 = [p[0] + e[0], p[1] + e[1], p[2] + e[2]];
            let l1 = get(data, q1);
            let (b, mid) = if l1 != 0 {
                (l1, 0.5)
            } else {
                (get(data, [q1[0] + e[0], q1[1] + e[1], q1[2] + e[2]]), 1.0)
            };
            if b != 0 && b != a {
                let m = [0, 1, 2].map(|i| p[i] as f64 + mid * e[i] as f64);
                contacts
                    .entry((a.min(b), a.max(b)))
                    .or_default()
                    .midpoints
                    .push(m);
            }
        }
    }

    let centroid = |id: u32| {
        let s = &stats[&id];
        Vector3::new(s.sum[0], s.sum[1], s.sum[2]) / s.count as f64
    };

    edges
        .into_iter()
        .map(|(a, b)| {
            let (f_c, f_s, f_r) = match contacts.get(&(a, b)) {
                None => (0.0, 0.0, 0.0),
                Some(c) => {
                    let n = c.midpoints.len();
                    let min_surface = stats[&a].surface_faces.min(stats[&b].surface_faces);
                    let f_r = (n as f64 / min_surface as f64).min(1.0);
                    let f_s = 1.0 - (plane_fit_rms(&c.midpoints) / 2.0).min(1.0);
                    let center = c
                        .midpoints
                        .iter()
                        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
                        / n as f64;
                    let diff = centroid(b) - centroid(a);
                    let f_c = if diff.norm() > 1e-12 {
                        contour_continuity(data, a, b, center, diff.normalize())
                    } else {
                        0.0
                    };
                    (f_c, f_s, f_r)
                }
            };
            AdjacencyEdge {
                a,
                b,
                f_c,
                f_s,
                f_r,
                score: edge_score(weights, f_c, f_s, f_r),
            }
        })
        .collect()
}

fn find(parent: &mut BTreeMap<u32, u32>, x: u32) -> u32 {
    let mut root = x;
    while parent[&root] != root {
        root = parent[&root];
    }
    let mut cur = x;
    while parent[&cur] != root {
        let next = parent[&cur];
        parent.insert(cur, root);
        cur = next;
    }
    root
}

/// Merges adjacent instances whose weighted feature score exceeds
/// [`MERGE_THRESHOLD`]; merged groups keep their smallest id.
pub fn merge_instances(labels: &LabelVolume, w_c: f64, w_s: f64, w_r: f64) -> Result<LabelVolume> {
    for (name, v) in [("theta_mc", w_c), ("theta_ms", w_s), ("theta_mr", w_r)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
        }
    }
    if w_c == 0.0 && w_s == 0.0 && w_r == 0.0 {
        return Ok(labels.clone());
    }
    let edges = adjacency_graph(labels, [w_c, w_s, w_r]);
    let mut parent: BTreeMap<u32, u32> = labels.ids().into_iter().map(|i| (i, i)).collect();
    let mut changed = false;
    for e in edges.iter().filter(|e| e.score > MERGE_THRESHOLD) {
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        if ra != rb {
            parent.insert(ra.max(rb), ra.min(rb));
            changed = true;
        }
    }
    if !changed {
        return Ok(labels.clone());
    }
    let ids: Vec<u32> = parent.keys().copied().collect();
    let lut: BTreeMap<u32, u32> = ids.into_iter().map(|i| (i, find(&mut parent, i))).collect();
    Ok(labels.with_data(labels.data().mapv(|l| if l == 0 { 0 } else { lut[&l] })))
}
