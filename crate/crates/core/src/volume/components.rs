use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{shape_of, LabelVolume};

/// Voxel neighbourhood: faces (6), faces+edges (18) or the full 3x3x3 cube (26).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "18")]
    Eighteen,
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn from_number(n: u32) -> Option<Self> {
        match n {
            6 => Some(Self::Six),
            18 => Some(Self::Eighteen),
            26 => Some(Self::TwentySix),
            _ => None,
        }
    }

    /// All neighbour offsets `(dz, dy, dx)`.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Self::Six => 1,
            Self::Eighteen => 2,
            Self::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nz = [dz, dy, dx].iter().filter(|d| **d != 0).count();
                    if nz > 0 && nz <= max_nonzero {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }

    /// Offsets that precede the centre voxel in scan order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        self.offsets()
            .into_iter()
            .filter(|o| (o[0], o[1], o[2]) < (0, 0, 0))
            .collect()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels maximal connected foreground regions of `mask`. Ids are assigned
/// in order of each region's first voxel in (z, y, x) scan order.
pub fn connected_components(mask: &Array3<bool>, connectivity: Connectivity) -> LabelVolume {
    let shape = shape_of(mask);
    let [nz, ny, nx] = shape;
    let back = connectivity.backward_offsets();
    let mut provisional = Array3::<u32>::zeros((nz, ny, nx));
    let mut sets = DisjointSet::new();
    // provisional label 0 is reserved for background
    sets.make();

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[[z, y, x]] {
                    continue;
                }
                let mut current = 0u32;
                for o in &back {
                    let (qz, qy, qx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                    if qz < 0 || qy < 0 || qx < 0 || qy >= ny as isize || qx >= nx as isize {
                        continue;
                    }
                    let l = provisional[[qz as usize, qy as usize, qx as usize]];
                    if l == 0 {
                        continue;
                    }
                    if current == 0 {
                        current = l;
                    } else if current != l {
                        sets.union(current, l);
                    }
                }
                if current == 0 {
                    current = sets.make();
                }
                provisional[[z, y, x]] = current;
            }
        }
    }

    let mut final_id = vec![0u32; sets.parent.len()];
    let mut next = 0u32;
    for v in provisional.iter_mut() {
        if *v == 0 {
            continue;
        }
        let root = sets.find(*v) as usize;
        if final_id[root] == 0 {
            next += 1;
            final_id[root] = next;
        }
        *v = final_id[root];
    }
    LabelVolume::from_array(provisional)
}
