//! Volume persistence and subvolume indexing.
//!
//! On-disk format: `<name>.vol` raw little-endian payload plus a
//! `<name>.volmeta` TOML sidecar carrying dims, dtype, byte order and a
//! semantic tag. Image-stack import/export uses one 8-bit grayscale PNG per
//! z-plane, named `slice_0001.png` onward.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Dtype, Volume, VoxelData};

/// Role of a volume within the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticTag {
    Orig,
    Label,
    Syn,
    Seg,
    Prob,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub dtype: Dtype,
    /// Always "little"; recorded so the file is self-describing.
    pub byte_order: String,
    pub tag: SemanticTag,
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("volmeta")
}

pub fn write_volume(path: &Path, v: &Volume, tag: SemanticTag) -> Result<()> {
    let meta = VolumeMeta {
        dims: [v.dims.0, v.dims.1, v.dims.2],
        dtype: v.dtype(),
        byte_order: "little".into(),
        tag,
    };
    let meta_text = toml::to_string(&meta)
        .map_err(|e| Error::Format(format!("metadata serialization failed: {e}")))?;
    fs::write(meta_path(path), meta_text)?;
    let payload: Vec<u8> = match &v.data {
        VoxelData::U8(d) => d.clone(),
        VoxelData::U32(d) => d.iter().flat_map(|x| x.to_le_bytes()).collect(),
        VoxelData::F32(d) => d.iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    fs::write(path, payload)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mp = meta_path(path);
    let meta_text = fs::read_to_string(&mp).map_err(|_| {
        Error::Format(format!("missing metadata sidecar {}", mp.display()))
    })?;
    let meta: VolumeMeta = toml::from_str(&meta_text)
        .map_err(|e| Error::Format(format!("bad metadata sidecar {}: {e}", mp.display())))?;
    if meta.byte_order != "little" {
        return Err(Error::Format(format!(
            "unsupported byte order '{}'",
            meta.byte_order
        )));
    }
    let payload = fs::read(path)?;
    let dims: Dims = (meta.dims[0], meta.dims[1], meta.dims[2]);
    let count = dims.0 * dims.1 * dims.2;
    let expected = count * meta.dtype.byte_size();
    if payload.len() != expected {
        return Err(Error::CorruptFile(format!(
            "{}: expected {expected} bytes for dims {:?} dtype {}, found {}",
            path.display(),
            meta.dims,
            meta.dtype.name(),
            payload.len()
        )));
    }
    let data = match meta.dtype {
        Dtype::U8 => VoxelData::U8(payload),
        Dtype::U32 => VoxelData::U32(
            payload
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ),
        Dtype::F32 => VoxelData::F32(
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ),
    };
    Volume::new(dims, data)
}

pub fn read_meta(path: &Path) -> Result<VolumeMeta> {
    let mp = meta_path(path);
    let meta_text = fs::read_to_string(&mp)
        .map_err(|_| Error::Format(format!("missing metadata sidecar {}", mp.display())))?;
    toml::from_str(&meta_text)
        .map_err(|e| Error::Format(format!("bad metadata sidecar {}: {e}", mp.display())))
}

/// Crop with 1-based inclusive bounds: x in [qi, qf], y in [ri, rf], z in [pi, pf].
#[allow(clippy::too_many_arguments)]
pub fn crop_subvolume(
    v: &Volume,
    qi: usize,
    qf: usize,
    ri: usize,
    rf: usize,
    pi: usize,
    pf: usize,
) -> Result<Volume> {
    let (x_max, y_max, z_max) = v.dims;
    for (name, lo, hi, max) in [
        ("x", qi, qf, x_max),
        ("y", ri, rf, y_max),
        ("z", pi, pf, z_max),
    ] {
        if lo < 1 || hi > max || lo > hi {
            return Err(Error::Index(format!(
                "{name} bounds {lo}:{hi} invalid for extent {max} (1-based inclusive)"
            )));
        }
    }
    let dims = (qf - qi + 1, rf - ri + 1, pf - pi + 1);
    let mut pick = Vec::with_capacity(dims.0 * dims.1 * dims.2);
    for z in (pi - 1)..pf {
        for y in (ri - 1)..rf {
            for x in (qi - 1)..qf {
                pick.push(z * x_max * y_max + y * x_max + x);
            }
        }
    }
    let data = match &v.data {
        VoxelData::U8(d) => VoxelData::U8(pick.iter().map(|&i| d[i]).collect()),
        VoxelData::U32(d) => VoxelData::U32(pick.iter().map(|&i| d[i]).collect()),
        VoxelData::F32(d) => VoxelData::F32(pick.iter().map(|&i| d[i]).collect()),
    };
    Volume::new(dims, data)
}

/// Writes an 8-bit volume as a directory of grayscale PNG slices.
pub fn export_slice_stack(dir: &Path, v: &Volume) -> Result<()> {
    let VoxelData::U8(data) = &v.data else {
        return Err(Error::Format("slice stack export requires a u8 volume".into()));
    };
    fs::create_dir_all(dir)?;
    let (x, y, z) = v.dims;
    for p in 0..z {
        let slice = &data[p * x * y..(p + 1) * x * y];
        let img = image::GrayImage::from_raw(x as u32, y as u32, slice.to_vec())
            .expect("slice buffer matches dims");
        let path = dir.join(format!("slice_{:04}.png", p + 1));
        img.save(&path)
            .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

/// Reads a directory of equally sized 8-bit grayscale slices back into a volume.
pub fn import_slice_stack(dir: &Path) -> Result<Volume> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!("no png slices in {}", dir.display())));
    }
    let mut dims: Option<(usize, usize)> = None;
    let mut data = Vec::new();
    for p in &paths {
        let img = image::open(p)
            .map_err(|e| Error::Format(format!("reading {}: {e}", p.display())))?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::Format(format!(
                    "slice {} has size {w}x{h}, expected {}x{}",
                    p.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        data.extend_from_slice(img.as_raw());
    }
    let (w, h) = dims.unwrap();
    Volume::new((w, h, paths.len()), VoxelData::U8(data))
}
