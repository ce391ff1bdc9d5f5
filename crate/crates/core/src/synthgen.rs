//! Synthetic binary nuclei volumes: randomly oriented ellipsoids rasterized
//! into a label volume.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume};

/// One synthetic nucleus: center, semi-axes and orientation.
#[derive(Debug, Clone)]
pub struct EllipsoidSpec {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Row-major orthonormal rotation matrix, det +1.
    pub rotation: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub volume_dims: [usize; 3],
    /// Inclusive range of nuclei per volume.
    pub count_range: [usize; 2],
    /// Inclusive range for each semi-axis, in voxels.
    pub axis_range: [f64; 2],
    pub overlap_allowed: bool,
    pub max_placement_attempts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            volume_dims: [128, 128, 128],
            count_range: [15, 40],
            axis_range: [4.0, 10.0],
            overlap_allowed: false,
            max_placement_attempts: 50,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.volume_dims.contains(&0) {
            return Err(Error::Config("volume_dims must be positive".into()));
        }
        if self.count_range[0] > self.count_range[1] {
            return Err(Error::Config("count_range min exceeds max".into()));
        }
        if self.axis_range[0] > self.axis_range[1] || self.axis_range[0] <= 0.0 {
            return Err(Error::Config("axis_range must be positive with min <= max".into()));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.seed)
    }

    /// RNG for the volume at `index` in a batch, derived from the base seed.
    pub fn rng_for_volume(&self, index: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.seed.wrapping_add(index))
    }
}

/// Rotation matrix from a unit quaternion (w, x, y, z).
fn quaternion_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Uniform rotation over SO(3) via a normalized Gaussian quaternion.
pub fn sample_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    loop {
        let q: [f64; 4] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let norm = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if norm > 1e-12 {
            return quaternion_to_matrix([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]);
        }
    }
}

/// Draws a random ellipsoid whose bounding sphere fits inside the volume.
pub fn sample_ellipsoid<R: Rng>(config: &SynthConfig, rng: &mut R) -> EllipsoidSpec {
    let [lo, hi] = config.axis_range;
    let semi_axes = [
        rng.gen_range(lo..=hi),
        rng.gen_range(lo..=hi),
        rng.gen_range(lo..=hi),
    ];
    let margin = semi_axes.iter().cloned().fold(0.0, f64::max);
    let mut center = [0.0; 3];
    for (i, c) in center.iter_mut().enumerate() {
        let d = config.volume_dims[i] as f64;
        // Degenerate volumes smaller than the nucleus: fall back to the middle.
        *c = if d > 2.0 * margin {
            rng.gen_range(margin..(d - margin))
        } else {
            d / 2.0
        };
    }
    let rotation = sample_rotation(rng);
    EllipsoidSpec {
        center,
        semi_axes,
        rotation,
    }
}

/// True when the voxel-center point lies inside the ellipsoid.
fn inside(spec: &EllipsoidSpec, p: [f64; 3]) -> bool {
    let d = [
        p[0] - spec.center[0],
        p[1] - spec.center[1],
        p[2] - spec.center[2],
    ];
    let [a, b, c] = spec.semi_axes;
    if a == b && b == c {
        // Isotropic case: skip the rotation so sphere counts are exactly
        // rotation invariant.
        return d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= a * a;
    }
    // u = R^T d, then sum (u_i / axis_i)^2 <= 1.
    let r = &spec.rotation;
    let u = [
        r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
        r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
        r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
    ];
    (u[0] / a).powi(2) + (u[1] / b).powi(2) + (u[2] / c).powi(2) <= 1.0
}

/// Voxels (center-tested) the ellipsoid covers, clipped to the volume bounds.
pub fn ellipsoid_voxels(spec: &EllipsoidSpec, dims: Dims) -> Vec<(usize, usize, usize)> {
    let max_axis = spec.semi_axes.iter().cloned().fold(0.0, f64::max);
    let lo = |c: f64, d: usize| ((c - max_axis).floor().max(0.0) as usize).min(d.saturating_sub(1));
    let hi = |c: f64, d: usize| ((c + max_axis).ceil().max(0.0) as usize).min(d.saturating_sub(1));
    let (x0, x1) = (lo(spec.center[0], dims.0), hi(spec.center[0], dims.0));
    let (y0, y1) = (lo(spec.center[1], dims.1), hi(spec.center[1], dims.1));
    let (z0, z1) = (lo(spec.center[2], dims.2), hi(spec.center[2], dims.2));
    let mut out = Vec::new();
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                if inside(spec, [x as f64, y as f64, z as f64]) {
                    out.push((x, y, z));
                }
            }
        }
    }
    out
}

/// Writes `label` into every voxel covered by the ellipsoid.
pub fn rasterize_ellipsoid(spec: &EllipsoidSpec, volume: &mut LabelVolume, label: u32) {
    assert!(label > 0, "labels must be positive");
    for (x, y, z) in ellipsoid_voxels(spec, volume.dims) {
        volume.set(x, y, z, label);
    }
}

/// Generates one volume of randomly placed nuclei, one distinct label each.
pub fn generate_binary_volume<R: Rng>(config: &SynthConfig, rng: &mut R) -> Result<LabelVolume> {
    config.validate()?;
    let dims = (
        config.volume_dims[0],
        config.volume_dims[1],
        config.volume_dims[2],
    );
    let mut volume = LabelVolume::zeros(dims);
    let count = rng.gen_range(config.count_range[0]..=config.count_range[1]);
    let mut placed = 0u32;
    for _ in 0..count {
        let mut attempts = 0;
        loop {
            let spec = sample_ellipsoid(config, rng);
            let voxels = ellipsoid_voxels(&spec, dims);
            let collides = !config.overlap_allowed
                && voxels.iter().any(|&(x, y, z)| volume.get(x, y, z) != 0);
            if !voxels.is_empty() && !collides {
                placed += 1;
                for (x, y, z) in voxels {
                    volume.set(x, y, z, placed);
                }
                break;
            }
            attempts += 1;
            if attempts >= config.max_placement_attempts {
                break; // skip this nucleus
            }
        }
    }
    if count > 0 && placed == 0 {
        return Err(Error::Generation(format!(
            "no nuclei placed after {} attempts each",
            config.max_placement_attempts
        )));
    }
    Ok(volume)
}
