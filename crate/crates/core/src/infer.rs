//! Sliding-window inference over full microscopy volumes.
//!
//! Each axis is extended to the next multiple of the stride and then given a
//! halo of `HALO` voxels on both sides. 64^3 windows slide with stride 32 and
//! only the central 32^3 block of each prediction is kept, so every retained
//! voxel has at least 16 voxels of context and every output voxel is written
//! exactly once.

use crate::error::{Error, Result};
use crate::networks::{unet_forward, ArchDescriptor, NetworkParams, Role};
use crate::tensor::{NormMode, Tensor};
use crate::volume::{Dims, LabelVolume, Volume, VoxelData};

pub const WINDOW: usize = 64;
pub const STRIDE: usize = 32;
pub const HALO: usize = 16;
pub const CROP: usize = 32;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// The window placement for one volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub original_dims: Dims,
    /// Original dims rounded up to a stride multiple (the covered region).
    pub extended_dims: Dims,
    /// Extended dims plus a halo on each side (the array windows index into).
    pub padded_dims: Dims,
    /// Window start offsets per axis (x, y, z), in padded coordinates.
    pub starts: [Vec<usize>; 3],
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Computes the window grid for a volume of the given dims.
pub fn plan_tiles(dims: Dims) -> Result<TileGrid> {
    let (x, y, z) = dims;
    if x == 0 || y == 0 || z == 0 {
        return Err(Error::Dimension(format!(
            "cannot tile an empty volume {dims:?}"
        )));
    }
    let ext = (round_up(x, STRIDE), round_up(y, STRIDE), round_up(z, STRIDE));
    let padded = (ext.0 + 2 * HALO, ext.1 + 2 * HALO, ext.2 + 2 * HALO);
    let axis_starts = |e: usize| -> Vec<usize> { (0..e / STRIDE).map(|i| i * STRIDE).collect() };
    Ok(TileGrid {
        original_dims: dims,
        extended_dims: ext,
        padded_dims: padded,
        starts: [axis_starts(ext.0), axis_starts(ext.1), axis_starts(ext.2)],
    })
}

impl TileGrid {
    pub fn tile_count(&self) -> usize {
        self.starts[0].len() * self.starts[1].len() * self.starts[2].len()
    }

    /// Window corners in padded coordinates, z-major order.
    pub fn window_corners(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.tile_count());
        for &sz in &self.starts[2] {
            for &sy in &self.starts[1] {
                for &sx in &self.starts[0] {
                    out.push((sx, sy, sz));
                }
            }
        }
        out
    }
}

/// Zero-pads intensities (normalized to [0, 1]) into the padded grid shape,
/// placing the original volume at offset `HALO` on each axis.
pub fn pad_volume(v: &Volume, grid: &TileGrid) -> Result<Vec<f64>> {
    if v.dims != grid.original_dims {
        return Err(Error::Dimension(format!(
            "volume dims {:?} do not match the planned grid {:?}",
            v.dims, grid.original_dims
        )));
    }
    let (px, py, pz) = grid.padded_dims;
    let (x, y, z) = v.dims;
    let scale = match &v.data {
        VoxelData::U8(_) => 1.0 / 255.0,
        VoxelData::F32(_) => 1.0,
        VoxelData::U32(_) => {
            return Err(Error::Format(
                "u32 label volumes are not valid inference input".into(),
            ))
        }
    };
    let src = v.to_f64_vec();
    let mut padded = vec![0.0f64; px * py * pz];
    for zz in 0..z {
        for yy in 0..y {
            let s = (zz * y + yy) * x;
            let d = ((zz + HALO) * py + yy + HALO) * px + HALO;
            for xx in 0..x {
                padded[d + xx] = src[s + xx] * scale;
            }
        }
    }
    Ok(padded)
}

/// Anything that maps a (1, 1, 64, 64, 64) window of intensities to
/// per-voxel foreground probabilities of the same shape.
pub trait WindowModel {
    fn predict_window(&self, window: &Tensor) -> Result<Tensor>;
}

impl WindowModel for NetworkParams {
    fn predict_window(&self, window: &Tensor) -> Result<Tensor> {
        if self.role() != Role::M {
            return Err(Error::Model(format!(
                "inference needs a segmentation checkpoint (role M), got role {}",
                self.role()
            )));
        }
        if !matches!(self.arch(), ArchDescriptor::UNet3d(_)) {
            return Err(Error::Model(
                "inference checkpoint does not describe a U-Net".into(),
            ));
        }
        unet_forward(self, window, NormMode::Eval)
    }
}

/// Runs tiled inference and thresholds at `threshold`.
///
/// Returns the probability volume and the binary segmentation, both with the
/// input's dims.
pub fn segment_volume(
    model: &dyn WindowModel,
    v: &Volume,
    threshold: f64,
) -> Result<(Volume, LabelVolume)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let grid = plan_tiles(v.dims)?;
    let padded = pad_volume(v, &grid)?;
    let (px, py, _pz) = grid.padded_dims;
    let (ex, ey, ez) = grid.extended_dims;
    let mut probs_ext = vec![f64::NAN; ex * ey * ez];
    #[cfg(debug_assertions)]
    let mut write_counts = vec![0u8; ex * ey * ez];
    for (sx, sy, sz) in grid.window_corners() {
        let mut window = Vec::with_capacity(WINDOW * WINDOW * WINDOW);
        for dz in 0..WINDOW {
            for dy in 0..WINDOW {
                let base = ((sz + dz) * py + sy + dy) * px + sx;
                window.extend_from_slice(&padded[base..base + WINDOW]);
            }
        }
        let input = Tensor::from_vec(&[1, 1, WINDOW, WINDOW, WINDOW], window);
        let pred = model.predict_window(&input)?;
        if pred.shape() != [1, 1, WINDOW, WINDOW, WINDOW] {
            return Err(Error::Model(format!(
                "window model returned shape {:?}, expected {:?}",
                pred.shape(),
                [1, 1, WINDOW, WINDOW, WINDOW]
            )));
        }
        let pv = pred.values();
        // Keep the central CROP^3 block; window start s in padded coords maps
        // its central block to [s, s + CROP) in extended coords.
        for dz in 0..CROP {
            for dy in 0..CROP {
                let src = ((HALO + dz) * WINDOW + HALO + dy) * WINDOW + HALO;
                let dst = ((sz + dz) * ey + sy + dy) * ex + sx;
                probs_ext[dst..dst + CROP].copy_from_slice(&pv[src..src + CROP]);
                #[cfg(debug_assertions)]
                for c in &mut write_counts[dst..dst + CROP] {
                    *c += 1;
                }
            }
        }
    }
    #[cfg(debug_assertions)]
    debug_assert!(
        write_counts.iter().all(|&c| c == 1),
        "tiling must write every extended voxel exactly once"
    );
    debug_assert!(probs_ext.iter().all(|p| !p.is_nan()));

    let (x, y, z) = grid.original_dims;
    let mut probs = vec![0.0f32; x * y * z];
    let mut labels = vec![0u32; x * y * z];
    for zz in 0..z {
        for yy in 0..y {
            for xx in 0..x {
                let p = probs_ext[(zz * ey + yy) * ex + xx];
                let i = (zz * y + yy) * x + xx;
                probs[i] = p as f32;
                labels[i] = (p > threshold) as u32;
            }
        }
    }
    Ok((
        Volume::new((x, y, z), VoxelData::F32(probs))?,
        LabelVolume::new((x, y, z), labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Echoes the input window: probabilities equal the normalized intensities.
    struct Identity;
    impl WindowModel for Identity {
        fn predict_window(&self, window: &Tensor) -> Result<Tensor> {
            Ok(Tensor::from_vec(window.shape(), window.to_vec()))
        }
    }

    struct Constant(f64);
    impl WindowModel for Constant {
        fn predict_window(&self, window: &Tensor) -> Result<Tensor> {
            Ok(Tensor::full(window.shape(), self.0))
        }
    }

    #[test]
    fn plan_shapes() {
        let g = plan_tiles((512, 512, 64)).unwrap();
        assert_eq!(g.extended_dims, (512, 512, 64));
        assert_eq!(g.padded_dims, (544, 544, 96));
        assert_eq!(g.tile_count(), 16 * 16 * 2);

        let g = plan_tiles((33, 65, 1)).unwrap();
        assert_eq!(g.extended_dims, (64, 96, 32));
        assert_eq!(g.padded_dims, (96, 128, 64));
        assert_eq!(g.tile_count(), 6); // 2 x 3 x 1

        assert!(plan_tiles((0, 4, 4)).is_err());
    }

    #[test]
    fn pad_places_volume_at_halo_offset() {
        let mut v = Volume::zeros_u8((33, 40, 35));
        if let VoxelData::U8(d) = &mut v.data {
            d[0] = 255; // voxel (0,0,0)
        }
        let g = plan_tiles(v.dims).unwrap();
        let p = pad_volume(&v, &g).unwrap();
        let (px, py, _) = g.padded_dims;
        assert_eq!(p[(HALO * py + HALO) * px + HALO], 1.0);
        assert_eq!(p.iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn identity_model_reconstructs_input() {
        // Non-multiple dims exercise padding and cropping together.
        let dims = (40, 33, 35);
        let n = 40 * 33 * 35;
        let data: Vec<u8> = (0..n).map(|i| (i * 37 % 251) as u8).collect();
        let v = Volume::new(dims, VoxelData::U8(data.clone())).unwrap();
        let (probs, _seg) = segment_volume(&Identity, &v, 0.5).unwrap();
        assert_eq!(probs.dims, dims);
        let VoxelData::F32(p) = &probs.data else { panic!() };
        for (i, (&got, &raw)) in p.iter().zip(data.iter()).enumerate() {
            assert!(
                (got as f64 - raw as f64 / 255.0).abs() < 1e-6,
                "voxel {i}: {got} vs {raw}"
            );
        }
    }

    #[test]
    fn constant_model_thresholds() {
        let v = Volume::zeros_u8((10, 10, 10));
        let (_, seg) = segment_volume(&Constant(0.7), &v, 0.5).unwrap();
        assert_eq!(seg.count_nonzero(), 1000);
        let (_, seg) = segment_volume(&Constant(0.3), &v, 0.5).unwrap();
        assert_eq!(seg.count_nonzero(), 0);
        // threshold is strict: p == threshold stays background
        let (_, seg) = segment_volume(&Constant(0.5), &v, 0.5).unwrap();
        assert_eq!(seg.count_nonzero(), 0);
    }

    #[test]
    fn invalid_threshold_rejected() {
        let v = Volume::zeros_u8((4, 4, 4));
        assert!(matches!(
            segment_volume(&Constant(0.5), &v, 1.5),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn rejects_label_volume_input() {
        let v = Volume::new((2, 2, 2), VoxelData::U32(vec![0; 8])).unwrap();
        assert!(segment_volume(&Constant(0.5), &v, 0.5).is_err());
    }

    #[test]
    fn unet_window_model_enforces_role() {
        use crate::networks::{build_generator3d, GenConfig, Role};
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        let g = build_generator3d(
            Role::G,
            &GenConfig {
                base_channels: 2,
                n_downsample: 1,
                n_resblocks: 1,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let w = Tensor::zeros(&[1, 1, WINDOW, WINDOW, WINDOW]);
        assert!(matches!(g.predict_window(&w), Err(Error::Model(_))));
    }
}
