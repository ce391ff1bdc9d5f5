//! Postprocessing of binary segmentations: connected-component labeling,
//! small-object removal, voxel metrics, and label colorization.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;
    fn try_from(v: u8) -> Result<Connectivity> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::Parameter(format!(
                "connectivity must be 6, 18 or 26, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// All neighbor offsets of this connectivity.
    pub fn offsets(self) -> Vec<(i64, i64, i64)> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::Eighteen => manhattan <= 2,
                        Connectivity::TwentySix => true,
                    };
                    if keep {
                        out.push((dx, dy, dz));
                    }
                }
            }
        }
        out
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> UnionFind {
        UnionFind { parent: Vec::new() }
    }

    fn make_set(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            // path halving
            self.parent[x as usize] = self.parent[self.parent[x as usize] as usize];
            x = self.parent[x as usize];
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // attach the larger root id under the smaller one so roots bias
            // toward earlier scan order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels connected foreground components of a binary volume.
///
/// Any nonzero voxel is foreground. Output labels are consecutive starting
/// at 1, ordered by each component's first voxel in z-major scan order.
pub fn connected_components_3d(
    v: &LabelVolume,
    connectivity: Connectivity,
) -> Result<LabelVolume> {
    let (x, y, z) = v.dims;
    let (xi, yi, zi) = (x as i64, y as i64, z as i64);
    // Only neighbors already visited in z-major scan order (negative index
    // offset) are needed in the first pass.
    let back_offsets: Vec<(i64, i64, i64)> = connectivity
        .offsets()
        .into_iter()
        .filter(|&(dx, dy, dz)| (dz, dy, dx) < (0, 0, 0))
        .collect();
    let mut uf = UnionFind::new();
    let mut provisional = vec![0u32; v.labels.len()]; // set id + 1, 0 = background
    for zz in 0..zi {
        for yy in 0..yi {
            for xx in 0..xi {
                let idx = ((zz * yi + yy) * xi + xx) as usize;
                if v.labels[idx] == 0 {
                    continue;
                }
                let mut current: Option<u32> = None;
                for &(dx, dy, dz) in &back_offsets {
                    let (nx, ny, nz) = (xx + dx, yy + dy, zz + dz);
                    if nx < 0 || ny < 0 || nz < 0 || nx >= xi || ny >= yi || nz >= zi {
                        continue;
                    }
                    let nidx = ((nz * yi + ny) * xi + nx) as usize;
                    let p = provisional[nidx];
                    if p == 0 {
                        continue;
                    }
                    match current {
                        None => current = Some(p - 1),
                        Some(c) => uf.union(c, p - 1),
                    }
                }
                let set = current.unwrap_or_else(|| uf.make_set());
                provisional[idx] = set + 1;
            }
        }
    }
    // Second pass: resolve roots and assign consecutive labels in scan order.
    let mut root_to_label: Vec<u32> = vec![0; uf.parent.len()];
    let mut next_label = 0u32;
    let mut labels = vec![0u32; v.labels.len()];
    for (i, &p) in provisional.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let root = uf.find(p - 1) as usize;
        if root_to_label[root] == 0 {
            next_label += 1;
            root_to_label[root] = next_label;
        }
        labels[i] = root_to_label[root];
    }
    LabelVolume::new(v.dims, labels)
}

/// Drops components with fewer than `min_size` voxels (strict), then
/// relabels the survivors consecutively preserving scan order.
pub fn remove_small_components(v: &LabelVolume, min_size: usize) -> Result<LabelVolume> {
    let max = v.max_label() as usize;
    let mut sizes = vec![0usize; max + 1];
    for &l in &v.labels {
        sizes[l as usize] += 1;
    }
    let mut remap = vec![0u32; max + 1];
    let mut next = 0u32;
    // v is a components labeling (consecutive scan-order labels), so
    // ascending old label preserves scan order.
    for old in 1..=max {
        if sizes[old] >= min_size {
            next += 1;
            remap[old] = next;
        }
    }
    let labels = v.labels.iter().map(|&l| remap[l as usize]).collect();
    LabelVolume::new(v.dims, labels)
}

/// Voxel confusion counts and derived rates between a segmentation and
/// ground truth (both binarized: nonzero = foreground).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub true_positive: u64,
    pub true_negative: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub total: u64,
    /// (TP + TN) / total
    pub accuracy: f64,
    /// FP / total
    pub type1_error: f64,
    /// FN / total
    pub type2_error: f64,
}

pub fn compute_metrics(seg: &LabelVolume, truth: &LabelVolume) -> Result<MetricsReport> {
    if seg.dims != truth.dims {
        return Err(Error::Dimension(format!(
            "metrics dims differ: {:?} vs {:?}",
            seg.dims, truth.dims
        )));
    }
    let (mut tp, mut tn, mut fp, mut fne) = (0u64, 0u64, 0u64, 0u64);
    for (&s, &t) in seg.labels.iter().zip(truth.labels.iter()) {
        match (s > 0, t > 0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
        }
    }
    let total = tp + tn + fp + fne;
    if total == 0 {
        return Err(Error::Dimension("metrics over an empty volume".into()));
    }
    Ok(MetricsReport {
        true_positive: tp,
        true_negative: tn,
        false_positive: fp,
        false_negative: fne,
        total,
        accuracy: (tp + tn) as f64 / total as f64,
        type1_error: fp as f64 / total as f64,
        type2_error: fne as f64 / total as f64,
    })
}

pub const PALETTE_SIZE: usize = 256;

/// A deterministic palette of `PALETTE_SIZE` mutually distinct RGB colors,
/// shuffled by `seed`. Labels map to `palette[(label - 1) % PALETTE_SIZE]`.
pub fn label_palette(seed: u64) -> Vec<[u8; 3]> {
    // 64 hues x 4 brightness levels; the construction is checked distinct.
    let mut colors = Vec::with_capacity(PALETTE_SIZE);
    for v_step in 0..4u32 {
        let value = 255 - v_step * 48;
        for h_step in 0..64u32 {
            let h = h_step as f64 * 360.0 / 64.0;
            let s = 1.0;
            let v = value as f64 / 255.0;
            let c = v * s;
            let hp = h / 60.0;
            let xcomp = c * (1.0 - (hp % 2.0 - 1.0).abs());
            let (r, g, b) = match hp as u32 {
                0 => (c, xcomp, 0.0),
                1 => (xcomp, c, 0.0),
                2 => (0.0, c, xcomp),
                3 => (0.0, xcomp, c),
                4 => (xcomp, 0.0, c),
                _ => (c, 0.0, xcomp),
            };
            colors.push([
                (r * 255.0).round() as u8,
                (g * 255.0).round() as u8,
                (b * 255.0).round() as u8,
            ]);
        }
    }
    {
        let mut check: Vec<[u8; 3]> = colors.clone();
        check.sort_unstable();
        check.dedup();
        debug_assert_eq!(check.len(), PALETTE_SIZE, "palette colors must be distinct");
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    colors.shuffle(&mut rng);
    colors
}

/// Renders every z-slice of a components labeling to an RGB image;
/// background is black, each label gets its palette color.
pub fn colorize_labels(v: &LabelVolume, seed: u64) -> Vec<image::RgbImage> {
    let palette = label_palette(seed);
    let (x, y, z) = v.dims;
    (0..z)
        .map(|zz| {
            image::RgbImage::from_fn(x as u32, y as u32, |px, py| {
                let l = v.get(px as usize, py as usize, zz);
                if l == 0 {
                    image::Rgb([0, 0, 0])
                } else {
                    image::Rgb(palette[(l as usize - 1) % PALETTE_SIZE])
                }
            })
        })
        .collect()
}
