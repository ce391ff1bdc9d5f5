//! Dense 3D volumes in z-major order: index = z*X*Y + y*X + x.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U32,
    F32,
}

impl Dtype {
    pub fn byte_size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U32 | Dtype::F32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::U32 => "u32",
            Dtype::F32 => "f32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    U32(Vec<u32>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::U32(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VoxelData::U8(_) => Dtype::U8,
            VoxelData::U32(_) => Dtype::U32,
            VoxelData::F32(_) => Dtype::F32,
        }
    }
}

/// Dense 3D scalar grid of size X x Y x Z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub data: VoxelData,
}

pub fn voxel_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    debug_assert!(x < dims.0 && y < dims.1 && z < dims.2);
    z * dims.0 * dims.1 + y * dims.0 + x
}

impl Volume {
    pub fn new(dims: Dims, data: VoxelData) -> Result<Volume> {
        let expected = dims.0 * dims.1 * dims.2;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "volume payload has {} voxels, dims {:?} require {expected}",
                data.len(),
                dims
            )));
        }
        Ok(Volume { dims, data })
    }

    pub fn zeros_u8(dims: Dims) -> Volume {
        Volume {
            dims,
            data: VoxelData::U8(vec![0; dims.0 * dims.1 * dims.2]),
        }
    }

    pub fn zeros_f32(dims: Dims) -> Volume {
        Volume {
            dims,
            data: VoxelData::F32(vec![0.0; dims.0 * dims.1 * dims.2]),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    /// Voxel as f64 regardless of dtype.
    pub fn get_f64(&self, x: usize, y: usize, z: usize) -> f64 {
        let i = voxel_index(self.dims, x, y, z);
        match &self.data {
            VoxelData::U8(v) => v[i] as f64,
            VoxelData::U32(v) => v[i] as f64,
            VoxelData::F32(v) => v[i] as f64,
        }
    }

    /// All voxels as f64 in storage order.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            VoxelData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::U32(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// Volume of non-negative integer labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub labels: Vec<u32>,
}

impl LabelVolume {
    pub fn zeros(dims: Dims) -> LabelVolume {
        LabelVolume {
            dims,
            labels: vec![0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn new(dims: Dims, labels: Vec<u32>) -> Result<LabelVolume> {
        if labels.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Dimension(format!(
                "label payload has {} voxels, dims {dims:?} require {}",
                labels.len(),
                dims.0 * dims.1 * dims.2
            )));
        }
        Ok(LabelVolume { dims, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[voxel_index(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u32) {
        let i = voxel_index(self.dims, x, y, z);
        self.labels[i] = label;
    }

    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|&l| l <= 1)
    }

    /// View with all nonzero labels collapsed to 1.
    pub fn binarized(&self) -> LabelVolume {
        LabelVolume {
            dims: self.dims,
            labels: self.labels.iter().map(|&l| u32::from(l > 0)).collect(),
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// 8-bit volume with foreground stored as 255 (viewable as an image stack).
    pub fn to_u8_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            data: VoxelData::U8(
                self.labels
                    .iter()
                    .map(|&l| if l > 0 { 255 } else { 0 })
                    .collect(),
            ),
        }
    }

    /// Full label values as a u32 volume.
    pub fn to_u32_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            data: VoxelData::U32(self.labels.clone()),
        }
    }

    pub fn from_volume(v: &Volume) -> LabelVolume {
        let labels = match &v.data {
            VoxelData::U8(d) => d.iter().map(|&x| u32::from(x > 0)).collect(),
            VoxelData::U32(d) => d.clone(),
            VoxelData::F32(d) => d.iter().map(|&x| u32::from(x > 0.0)).collect(),
        };
        LabelVolume {
            dims: v.dims,
            labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zmajor_indexing() {
        let dims = (3, 4, 5);
        assert_eq!(voxel_index(dims, 0, 0, 0), 0);
        assert_eq!(voxel_index(dims, 1, 0, 0), 1);
        assert_eq!(voxel_index(dims, 0, 1, 0), 3);
        assert_eq!(voxel_index(dims, 0, 0, 1), 12);
        assert_eq!(voxel_index(dims, 2, 3, 4), 59);
    }

    #[test]
    fn payload_size_enforced() {
        assert!(Volume::new((2, 2, 2), VoxelData::U8(vec![0; 7])).is_err());
        assert!(LabelVolume::new((2, 2, 2), vec![0; 9]).is_err());
    }

    #[test]
    fn binarized_collapses_labels() {
        let lv = LabelVolume::new((2, 1, 1), vec![0, 7]).unwrap();
        assert_eq!(lv.binarized().labels, vec![0, 1]);
        assert_eq!(lv.count_nonzero(), 1);
    }
}
