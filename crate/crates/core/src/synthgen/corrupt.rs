//! Corruption operators that turn ground truth into plausible model
//! predictions with controlled error modes.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distance::OffsetShells;
use crate::error::{Error, Result};
use crate::postproc::{adjacency_graph, morph_labels};
use crate::volume::LabelVolume;

use super::MAX_PLACEMENT_ATTEMPTS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitAxis {
    Z,
    Y,
    X,
}

impl SplitAxis {
    pub fn index(self) -> usize {
        match self {
            SplitAxis::Z => 0,
            SplitAxis::Y => 1,
            SplitAxis::X => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CorruptionOp {
    Dilate {
        radius: u32,
    },
    Erode {
        radius: u32,
    },
    /// Cuts a random `fraction` of instances in half along `axis`.
    SplitPlane {
        fraction: f64,
        axis: SplitAxis,
    },
    /// Fuses each adjacent pair with the given probability.
    MergeAdjacent {
        probability: f64,
    },
    /// Adds `count` balls in empty space.
    Hallucinate {
        count: usize,
        radius: u32,
    },
    /// Removes each instance with the given probability.
    Drop {
        probability: f64,
    },
}

impl CorruptionOp {
    fn validate(&self) -> Result<()> {
        let unit = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {p} outside [0, 1]")))
            }
        };
        let radius = |r: u32| {
            if r >= 1 {
                Ok(())
            } else {
                Err(Error::invalid("corruption radius must be >= 1"))
            }
        };
        match *self {
            CorruptionOp::Dilate { radius: r } | CorruptionOp::Erode { radius: r } => radius(r),
            CorruptionOp::Hallucinate { radius: r, .. } => radius(r),
            CorruptionOp::SplitPlane { fraction, .. } => unit("fraction", fraction),
            CorruptionOp::MergeAdjacent { probability } | CorruptionOp::Drop { probability } => {
                unit("probability", probability)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(default)]
    pub ops: Vec<CorruptionOp>,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        self.ops.iter().try_for_each(CorruptionOp::validate)
    }
}

fn split_plane(
    labels: &LabelVolume,
    fraction: f64,
    axis: usize,
    rng: &mut ChaCha8Rng,
) -> LabelVolume {
    let ids = labels.ids();
    let k = (fraction * ids.len() as f64).round() as usize;
    let mut chosen: Vec<u32> = sample(rng, ids.len(), k.min(ids.len()))
        .into_iter()
        .map(|i| ids[i])
        .collect();
    chosen.sort_unstable();

    let mut range: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for ((z, y, x), &l) in labels.data().indexed_iter() {
        if l != 0 {
            let c = [z, y, x][axis];
            let e = range.entry(l).or_insert((c, c));
            e.0 = e.0.min(c);
            e.1 = e.1.max(c);
        }
    }
    let mut next = labels.max_id();
    let mut cut: BTreeMap<u32, (usize, u32)> = BTreeMap::new();
    for id in chosen {
        let (lo, hi) = range[&id];
        let extent = hi - lo + 1;
        if extent >= 2 {
            next += 1;
            cut.insert(id, (lo + extent / 2, next));
        }
    }
    let mut data = labels.data().clone();
    for ((z, y, x), l) in data.indexed_iter_mut() {
        if let Some(&(plane, new_id)) = cut.get(l) {
            if [z, y, x][axis] >= plane {
                *l = new_id;
            }
        }
    }
    labels.with_data(data)
}

fn merge_adjacent(labels: &LabelVolume, probability: f64, rng: &mut ChaCha8Rng) -> LabelVolume {
    let edges = adjacency_graph(labels, [0.0; 3]);
    let mut parent: BTreeMap<u32, u32> = BTreeMap::new();
    fn root(parent: &BTreeMap<u32, u32>, mut x: u32) -> u32 {
        while let Some(&p) = parent.get(&x) {
            x = p;
        }
        x
    }
    for e in &edges {
        if rng.random::<f64>() < probability {
            let (ra, rb) = (root(&parent, e.a), root(&parent, e.b));
            if ra != rb {
                let (lo, hi) = (ra.min(rb), ra.max(rb));
                parent.insert(hi, lo);
            }
        }
    }
    if parent.is_empty() {
        return labels.clone();
    }
    labels.with_data(
        labels
            .data()
            .mapv(|l| if l == 0 { 0 } else { root(&parent, l) }),
    )
}

fn hallucinate(
    labels: &LabelVolume,
    count: usize,
    radius: u32,
    rng: &mut ChaCha8Rng,
) -> LabelVolume {
    let shape = labels.shape();
    let r = radius as usize;
    let r2 = (radius as i64).pow(2);
    let ball: Vec<[isize; 3]> = std::iter::once([0, 0, 0])
        .chain(OffsetShells::new(r2).ball(r2).copied())
        .collect();
    let mut data = labels.data().clone();
    let mut next = labels.max_id();
    if shape.iter().any(|&n| n < 2 * r + 1) {
        return labels.clone();
    }
    for _ in 0..count {
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let c = [0, 1, 2].map(|i| rng.random_range(r..shape[i] - r));
            let free = ball.iter().all(|o| {
                let q = crate::distance::offset_index(c, o, shape).expect("ball inside volume");
                data[q] == 0
            });
            if free {
                next += 1;
                for o in &ball {
                    let q = crate::distance::offset_index(c, o, shape).expect("ball inside volume");
                    data[q] = next;
                }
                break;
            }
        }
    }
    labels.with_data(data)
}

fn drop_instances(labels: &LabelVolume, probability: f64, rng: &mut ChaCha8Rng) -> LabelVolume {
    let dropped: Vec<u32> = labels
        .ids()
        .into_iter()
        .filter(|_| rng.random::<f64>() < probability)
        .collect();
    if dropped.is_empty() {
        return labels.clone();
    }
    labels.with_data(labels.data().mapv(|l| {
        if dropped.binary_search(&l).is_ok() {
            0
        } else {
            l
        }
    }))
}

/// Applies the operators in order with one seeded stream; the result has
/// consecutive ids.
pub fn corrupt_labels(gt: &LabelVolume, spec: &CorruptionSpec) -> Result<LabelVolume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut current = gt.clone();
    for op in &spec.ops {
        current = match *op {
            CorruptionOp::Dilate { radius } => morph_labels(&current, radius as i32, 0),
            CorruptionOp::Erode { radius } => morph_labels(&current, -(radius as i32), 0),
            CorruptionOp::SplitPlane { fraction, axis } => {
                split_plane(&current, fraction, axis.index(), &mut rng)
            }
            CorruptionOp::MergeAdjacent { probability } => {
                merge_adjacent(&current, probability, &mut rng)
            }
            CorruptionOp::Hallucinate { count, radius } => {
                hallucinate(&current, count, radius, &mut rng)
            }
            CorruptionOp::Drop { probability } => drop_instances(&current, probability, &mut rng),
        };
    }
    Ok(current.relabel_consecutive())
}
