//! Parametric synthetic benchmark volumes: randomly oriented ellipsoidal
//! nuclei with exact labels and a blurred, noisy intensity rendering.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`, consumed in a fixed order, so a (config, seed) pair
//! reproduces the same volumes bit for bit.

mod corrupt;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distance::OffsetShells;
use crate::error::{Error, Result};
use crate::volume::filter::gaussian_smooth;
use crate::volume::{IntensityVolume, LabelVolume, Shape, Spacing, UNIT_SPACING};

pub use corrupt::{corrupt_labels, CorruptionOp, CorruptionSpec, SplitAxis};

/// Rejection-sampling attempts per instance before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    /// Foreground level before noise.
    pub base: f64,
    #[serde(default)]
    pub background: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
}

impl Default for IntensityModel {
    fn default() -> Self {
        Self {
            base: 0.8,
            background: 0.1,
            noise_sigma: 0.05,
            blur_sigma: 1.0,
        }
    }
}

fn unit_spacing() -> Spacing {
    UNIT_SPACING
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub shape: Shape,
    #[serde(default = "unit_spacing")]
    pub spacing: Spacing,
    pub count: usize,
    /// Major semi-axis range in voxels.
    pub radius: [f64; 2],
    /// Range of the two minor-to-major semi-axis ratios.
    pub axis_ratio: [f64; 2],
    /// Minimum surface distance between instances: voxel centres of
    /// different instances are at least `min_gap + 1` apart.
    pub min_gap: u32,
    /// Minimum number of background voxels between instances and the
    /// volume border.
    #[serde(default)]
    pub margin: u32,
    #[serde(default)]
    pub intensity: IntensityModel,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::invalid("shape components must be >= 1"));
        }
        let [lo, hi] = self.radius;
        if !(lo >= 1.0 && hi >= lo) {
            return Err(Error::invalid(format!(
                "radius range {:?} must satisfy 1 <= lo <= hi",
                self.radius
            )));
        }
        let [rlo, rhi] = self.axis_ratio;
        if !(rlo > 0.0 && rhi >= rlo) {
            return Err(Error::invalid(format!(
                "axis ratio range {:?} invalid",
                self.axis_ratio
            )));
        }
        let im = &self.intensity;
        if im.noise_sigma < 0.0 || im.blur_sigma < 0.0 {
            return Err(Error::invalid("intensity sigmas must be >= 0"));
        }
        Ok(())
    }
}

/// Voxel offsets (relative to the rounded centre) inside a rotated ellipsoid.
fn rasterize_ellipsoid(
    center: Vector3<f64>,
    semi_axes: Vector3<f64>,
    rotation: &Matrix3<f64>,
) -> Vec<[isize; 3]> {
    let inv_sq = Matrix3::from_diagonal(&semi_axes.map(|a| 1.0 / (a * a)));
    let form = rotation * inv_sq * rotation.transpose();
    let reach = semi_axes.max().ceil() as isize + 1;
    let base = center.map(|c| c.round() as isize);
    let mut voxels = Vec::new();
    for dz in -reach..=reach {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let p = Vector3::new(
                    (base.x + dz) as f64,
                    (base.y + dy) as f64,
                    (base.z + dx) as f64,
                );
                let d = p - center;
                if (d.transpose() * form * d)[0] <= 1.0 {
                    voxels.push([base.x + dz, base.y + dy, base.z + dx]);
                }
            }
        }
    }
    voxels
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
            return *uq.to_rotation_matrix().matrix();
        }
    }
}

fn place_instances(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Array3<u32>> {
    let [nz, ny, nx] = cfg.shape;
    let shape = cfg.shape;
    let mut labels = Array3::<u32>::zeros((nz, ny, nx));
    let mut forbidden = Array3::from_elem((nz, ny, nx), false);
    let gap_sq = (cfg.min_gap as i64 + 1).pow(2) - 1;
    let margin = cfg.margin as isize;
    let shells = OffsetShells::new(gap_sq);
    let gap_ball: Vec<[isize; 3]> = std::iter::once([0, 0, 0])
        .chain(shells.ball(gap_sq).copied())
        .collect();

    for index in 0..cfg.count {
        let id = index as u32 + 1;
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let r = rng.random_range(cfg.radius[0]..=cfg.radius[1]);
            let semi = Vector3::new(
                r,
                r * rng.random_range(cfg.axis_ratio[0]..=cfg.axis_ratio[1]),
                r * rng.random_range(cfg.axis_ratio[0]..=cfg.axis_ratio[1]),
            );
            let rotation = random_rotation(rng);
            let center = Vector3::new(
                rng.random_range(0.0..nz as f64),
                rng.random_range(0.0..ny as f64),
                rng.random_range(0.0..nx as f64),
            );
            let voxels = rasterize_ellipsoid(center, semi, &rotation);
            if voxels.is_empty() {
                continue;
            }
            let fits = voxels.iter().all(|v| {
                (0..3).all(|i| v[i] >= margin && v[i] < shape[i] as isize - margin)
                    && !forbidden[[v[0] as usize, v[1] as usize, v[2] as usize]]
            });
            if fits {
                placed = Some(voxels);
                break;
            }
        }
        let voxels = placed.ok_or(Error::Capacity {
            index,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        for v in &voxels {
            labels[[v[0] as usize, v[1] as usize, v[2] as usize]] = id;
        }
        for v in &voxels {
            let p = [v[0] as usize, v[1] as usize, v[2] as usize];
            let on_surface = [
                [1, 0, 0],
                [-1, 0, 0],
                [0, 1, 0],
                [0, -1, 0],
                [0, 0, 1],
                [0, 0, -1],
            ]
            .iter()
            .any(|o| crate::distance::offset_index(p, o, shape).is_none_or(|q| labels[q] != id));
            let reach: &[[isize; 3]] = if on_surface {
                &gap_ball
            } else {
                &gap_ball[..1]
            };
            for o in reach {
                if let Some(q) = crate::distance::offset_index(p, o, shape) {
                    forbidden[q] = true;
                }
            }
        }
    }
    Ok(labels)
}

/// Renders labels: blurred foreground indicator scaled to `base` over
/// `background`, plus Gaussian noise, clipped to `[0, 1]`.
fn render(cfg: &SynthConfig, labels: &Array3<u32>, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let im = &cfg.intensity;
    let indicator = labels.mapv(|l| if l != 0 { 1.0 } else { 0.0 });
    let blurred = gaussian_smooth(&indicator, im.blur_sigma);
    let noise = Normal::new(0.0, im.noise_sigma.max(0.0)).expect("sigma validated");
    blurred.mapv(|b| {
        let n = if im.noise_sigma > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        (im.background + b * (im.base - im.background) + n).clamp(0.0, 1.0) as f32
    })
}

/// Places `count` ellipsoids with at least `min_gap` background voxels
/// between any two, then renders their intensity image.
pub fn generate_benchmark(cfg: &SynthConfig) -> Result<(IntensityVolume, LabelVolume)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = place_instances(cfg, &mut rng)?;
    let intensity = render(cfg, &labels, &mut rng);
    Ok((
        IntensityVolume::new(intensity, cfg.spacing)?,
        LabelVolume::new(labels, cfg.spacing)?,
    ))
}
