//! Training of the modified 3D U-Net on synthetic microscopy / label pairs
//! with a weighted Dice + binary cross-entropy objective.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{build_unet3d, unet_forward, NetworkParams, UNetConfig};
use crate::tensor::{add, bce_loss, dice_loss, scale, AdamConfig, AdamState, NormMode, Tensor};
use crate::volume::{LabelVolume, Volume, VoxelData};

/// Side length of the training subvolumes the pairs are cut into.
pub const TRAIN_BLOCK: usize = 64;

pub const DICE_SMOOTH: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub mu1: f64,
    pub mu2: f64,
    pub learning_rate: f64,
    /// Number of training pairs drawn (without replacement) from the pool.
    /// 0 means use everything.
    pub pairs_used: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub unet: UNetConfig,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            mu1: 1.0,
            mu2: 10.0,
            learning_rate: 0.001,
            pairs_used: 0,
            epochs: 1,
            batch_size: 1,
            seed: 0,
            unet: UNetConfig::default(),
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mu1 < 0.0 || self.mu2 < 0.0 {
            return Err(Error::Config("mu1/mu2 must be non-negative".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(
                "only batch_size = 1 is supported".into(),
            ));
        }
        Ok(())
    }
}

/// One synthetic-microscopy / binary-label training pair, equal dims.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub syn: Volume,
    pub label: LabelVolume,
}

/// mu1 * Dice + mu2 * BCE over sigmoid outputs.
pub fn seg_loss(probs: &Tensor, targets: &Tensor, mu1: f64, mu2: f64) -> Result<Tensor> {
    add(
        &scale(&dice_loss(probs, targets, DICE_SMOOTH)?, mu1),
        &scale(&bce_loss(probs, targets)?, mu2),
    )
}

/// Voxel Dice coefficient between two binarized volumes; 1 when both are empty.
pub fn dice_coefficient(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    if pred.dims != truth.dims {
        return Err(Error::Dimension(format!(
            "dice_coefficient dims differ: {:?} vs {:?}",
            pred.dims, truth.dims
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &t) in pred.labels.iter().zip(truth.labels.iter()) {
        let (p, t) = ((p > 0) as usize, (t > 0) as usize);
        inter += p & t;
        total += p + t;
    }
    if total == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / total as f64)
    }
}

/// Cuts matched volume/label stacks into aligned 64^3 training pairs.
/// Every source dimension must be an exact multiple of 64. Blocks are
/// emitted in z-major order per source volume.
pub fn prepare_training_set(
    syn_volumes: &[Volume],
    label_volumes: &[LabelVolume],
) -> Result<Vec<TrainingPair>> {
    if syn_volumes.len() != label_volumes.len() {
        return Err(Error::Dimension(format!(
            "{} synthetic volumes vs {} label volumes",
            syn_volumes.len(),
            label_volumes.len()
        )));
    }
    let mut pairs = Vec::new();
    for (syn, label) in syn_volumes.iter().zip(label_volumes.iter()) {
        if syn.dims != label.dims {
            return Err(Error::Dimension(format!(
                "pair dims differ: {:?} vs {:?}",
                syn.dims, label.dims
            )));
        }
        let (x, y, z) = syn.dims;
        if x % TRAIN_BLOCK != 0 || y % TRAIN_BLOCK != 0 || z % TRAIN_BLOCK != 0 {
            return Err(Error::Dimension(format!(
                "dims {:?} are not divisible by the {TRAIN_BLOCK}^3 block size",
                syn.dims
            )));
        }
        let VoxelData::U8(syn_data) = &syn.data else {
            return Err(Error::Format("expected u8 synthetic volumes".into()));
        };
        for bz in 0..z / TRAIN_BLOCK {
            for by in 0..y / TRAIN_BLOCK {
                for bx in 0..x / TRAIN_BLOCK {
                    let b = TRAIN_BLOCK;
                    let mut sub_syn = vec![0u8; b * b * b];
                    let mut sub_label = vec![0u32; b * b * b];
                    for dz in 0..b {
                        for dy in 0..b {
                            let src =
                                ((bz * b + dz) * y + by * b + dy) * x + bx * b;
                            let dst = (dz * b + dy) * b;
                            sub_syn[dst..dst + b]
                                .copy_from_slice(&syn_data[src..src + b]);
                            sub_label[dst..dst + b]
                                .copy_from_slice(&label.labels[src..src + b]);
                        }
                    }
                    pairs.push(TrainingPair {
                        syn: Volume::new((b, b, b), VoxelData::U8(sub_syn))?,
                        label: LabelVolume {
                            dims: (b, b, b),
                            labels: sub_label,
                        },
                    });
                }
            }
        }
    }
    Ok(pairs)
}

/// Synthetic microscopy to [0, 1] network input, shape (1, 1, Z, Y, X).
pub fn pair_input(syn: &Volume) -> Result<Tensor> {
    let VoxelData::U8(data) = &syn.data else {
        return Err(Error::Format("expected a u8 synthetic volume".into()));
    };
    Ok(Tensor::from_vec(
        &[1, 1, syn.dims.2, syn.dims.1, syn.dims.0],
        data.iter().map(|&v| v as f64 / 255.0).collect(),
    ))
}

/// Binary target in {0, 1}, shape (1, 1, Z, Y, X).
pub fn pair_target(label: &LabelVolume) -> Tensor {
    Tensor::from_vec(
        &[1, 1, label.dims.2, label.dims.1, label.dims.0],
        label
            .labels
            .iter()
            .map(|&l| if l > 0 { 1.0 } else { 0.0 })
            .collect(),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegLossRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    pub dice_loss: f64,
    pub bce_loss: f64,
}

pub struct SegTrainResult {
    /// Final model state after the last step.
    pub model: NetworkParams,
    /// Snapshot of the parameters at the best (lowest mean-loss) epoch.
    pub best_params: Vec<(String, Vec<f64>)>,
    pub best_epoch: usize,
    pub log: Vec<SegLossRecord>,
}

impl SegTrainResult {
    /// Restores the best-epoch snapshot into a clone-shaped model.
    pub fn apply_best(&self) -> Result<()> {
        for (name, values) in &self.best_params {
            self.model.get(name)?.set_values(values.clone());
        }
        Ok(())
    }
}

fn snapshot(model: &NetworkParams) -> Vec<(String, Vec<f64>)> {
    model
        .entries()
        .map(|(n, t)| (n.to_string(), t.to_vec()))
        .collect()
}

/// Trains a fresh U-Net on a seeded shuffle of the pair pool.
pub fn train_unet(cfg: &SegTrainConfig, pairs: &[TrainingPair]) -> Result<SegTrainResult> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let model = build_unet3d(&cfg.unet, &mut rng)?;
    let mut opt = AdamState::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    });

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let used = if cfg.pairs_used == 0 {
        pairs.len()
    } else {
        cfg.pairs_used.min(pairs.len())
    };
    order.truncate(used);

    let mut log = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_mean = f64::INFINITY;
    let mut best_params = snapshot(&model);
    let mut iteration = 0usize;
    for epoch in 0..cfg.epochs {
        let mut epoch_order = order.clone();
        epoch_order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for &idx in &epoch_order {
            let pair = &pairs[idx];
            let input = pair_input(&pair.syn)?;
            let target = pair_target(&pair.label);
            let probs = unet_forward(&model, &input, NormMode::Train)?;
            let d = dice_loss(&probs, &target, DICE_SMOOTH)?;
            let b = bce_loss(&probs, &target)?;
            let loss = add(&scale(&d, cfg.mu1), &scale(&b, cfg.mu2))?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch} iteration {iteration}"
                )));
            }
            model.zero_grads();
            loss.backward()?;
            let trainable: Vec<(String, Tensor)> = model
                .trainable()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect();
            opt.step(trainable.iter().map(|(n, t)| (n.as_str(), t)))?;
            log.push(SegLossRecord {
                epoch,
                iteration,
                loss: loss_val,
                dice_loss: d.item(),
                bce_loss: b.item(),
            });
            epoch_sum += loss_val;
            iteration += 1;
        }
        let mean = epoch_sum / epoch_order.len() as f64;
        if mean < best_mean {
            best_mean = mean;
            best_epoch = epoch;
            best_params = snapshot(&model);
        }
    }
    Ok(SegTrainResult {
        model,
        best_params,
        best_epoch,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seg_loss_matches_components() {
        let p = Tensor::from_vec(&[1, 1, 1, 1, 2], vec![0.5, 0.5]);
        let t = Tensor::from_vec(&[1, 1, 1, 1, 2], vec![1.0, 0.0]);
        let d = dice_loss(&p, &t, DICE_SMOOTH).unwrap().item();
        let b = bce_loss(&p, &t).unwrap().item();
        let combined = seg_loss(&p, &t, 1.0, 10.0).unwrap().item();
        assert!((combined - (d + 10.0 * b)).abs() < 1e-12);
    }

    #[test]
    fn dice_coefficient_cases() {
        let mut a = LabelVolume::zeros((2, 2, 1));
        let mut b = LabelVolume::zeros((2, 2, 1));
        assert_eq!(dice_coefficient(&a, &b).unwrap(), 1.0);
        a.set(0, 0, 0, 1);
        a.set(1, 0, 0, 7);
        b.set(0, 0, 0, 3);
        // |A|=2, |B|=1, inter=1 -> 2*1/3
        assert!((dice_coefficient(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let c = LabelVolume::zeros((1, 1, 1));
        assert!(dice_coefficient(&a, &c).is_err());
    }

    #[test]
    fn prepare_splits_into_blocks() {
        let dims = (128, 64, 64);
        let mut syn = vec![0u8; 128 * 64 * 64];
        // mark the single voxel at (70, 3, 2): belongs to block bx=1
        syn[(2 * 64 + 3) * 128 + 70] = 200;
        let mut label = LabelVolume::zeros(dims);
        label.set(70, 3, 2, 1);
        let vols = vec![Volume::new(dims, VoxelData::U8(syn)).unwrap()];
        let pairs = prepare_training_set(&vols, &[label]).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].syn.dims, (64, 64, 64));
        // the marked voxel lands in the second block at (6, 3, 2)
        assert_eq!(pairs[1].label.get(6, 3, 2), 1);
        assert_eq!(pairs[1].label.count_nonzero(), 1);
        assert_eq!(pairs[0].label.count_nonzero(), 0);
        let VoxelData::U8(d) = &pairs[1].syn.data else { panic!() };
        assert_eq!(d[(2 * 64 + 3) * 64 + 6], 200);
    }

    #[test]
    fn prepare_rejects_indivisible_and_mismatched() {
        let v = vec![Volume::zeros_u8((65, 64, 64))];
        let l = vec![LabelVolume::zeros((65, 64, 64))];
        assert!(matches!(
            prepare_training_set(&v, &l),
            Err(Error::Dimension(_))
        ));
        let v = vec![Volume::zeros_u8((64, 64, 64))];
        let l = vec![LabelVolume::zeros((64, 64, 128))];
        assert!(prepare_training_set(&v, &l).is_err());
    }

    #[test]
    fn pair_input_normalizes() {
        let v = Volume::new((2, 1, 1), VoxelData::U8(vec![0, 255])).unwrap();
        assert_eq!(pair_input(&v).unwrap().to_vec(), vec![0.0, 1.0]);
    }

    fn tiny_pairs() -> Vec<TrainingPair> {
        // 8^3 blobs: a bright cube on dark background
        (0..2)
            .map(|i| {
                let mut syn = vec![10u8; 512];
                let mut label = LabelVolume::zeros((8, 8, 8));
                for z in 2..6 {
                    for y in 2..6 {
                        for x in 2..6 {
                            syn[(z * 8 + y) * 8 + x] = 200 + i as u8;
                            label.set(x, y, z, 1);
                        }
                    }
                }
                TrainingPair {
                    syn: Volume::new((8, 8, 8), VoxelData::U8(syn)).unwrap(),
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn train_unet_reduces_loss_and_is_deterministic() {
        let cfg = SegTrainConfig {
            epochs: 5,
            seed: 11,
            unet: UNetConfig {
                depth: 2,
                base_channels: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let pairs = tiny_pairs();
        let r1 = train_unet(&cfg, &pairs).unwrap();
        assert_eq!(r1.log.len(), 10);
        assert!(r1.log.last().unwrap().loss < r1.log[0].loss);
        let r2 = train_unet(&cfg, &pairs).unwrap();
        assert_eq!(r1.model.checksum(), r2.model.checksum());
        for (a, b) in r1.log.iter().zip(r2.log.iter()) {
            assert_eq!(a.loss, b.loss);
        }
    }

    #[test]
    fn best_snapshot_restores() {
        let cfg = SegTrainConfig {
            epochs: 3,
            seed: 3,
            unet: UNetConfig {
                depth: 2,
                base_channels: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let pairs = tiny_pairs();
        let r = train_unet(&cfg, &pairs).unwrap();
        assert!(r.best_epoch < 3);
        r.apply_best().unwrap();
        // after restoring, model equals the snapshot
        for (name, values) in &r.best_params {
            assert_eq!(&r.model.get(name).unwrap().to_vec(), values);
        }
    }

    #[test]
    fn pairs_used_limits_steps() {
        let cfg = SegTrainConfig {
            epochs: 1,
            pairs_used: 1,
            unet: UNetConfig {
                depth: 2,
                base_channels: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let r = train_unet(&cfg, &tiny_pairs()).unwrap();
        assert_eq!(r.log.len(), 1);
    }
}
