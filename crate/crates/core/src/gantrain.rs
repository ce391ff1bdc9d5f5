//! Spatially constrained CycleGAN training on unpaired binary/microscopy
//! volumes, and synthesis of paired training data with the trained generator.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{
    build_discriminator3d, build_generator3d, discriminator_forward, generator_forward,
    DiscConfig, GenConfig, NetworkParams, Role,
};
use crate::tensor::{
    add, l1_loss, mean, mse_loss, mul, scale, softplus, sub, AdamConfig, AdamState, Tensor,
};
use crate::volume::{LabelVolume, Volume, VoxelData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    Log,
    LeastSquares,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    pub crop_size: [usize; 3],
    pub batch_size: usize,
    pub seed: u64,
    pub gan_mode: GanMode,
    pub generator: GenConfig,
    pub discriminator: DiscConfig,
    /// Checkpoint every n iterations; 0 = final only.
    pub checkpoint_every: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            lambda1: 10.0,
            lambda2: 10.0,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            iterations: 100,
            crop_size: [64, 64, 64],
            batch_size: 1,
            seed: 0,
            gan_mode: GanMode::Log,
            generator: GenConfig::default(),
            discriminator: DiscConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda1/lambda2 must be non-negative".into()));
        }
        if self.crop_size.contains(&0) {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
        }
    }
}

/// One unpaired crop pair, already mapped into tanh range.
pub struct UnpairedBatch {
    /// Binary labels mapped to {-1, +1}.
    pub label_crop: Tensor,
    /// Microscopy intensities mapped to [-1, 1].
    pub real_crop: Tensor,
}

/// The five SpCycleGAN networks.
pub struct GanModels {
    pub g: NetworkParams,
    pub f: NetworkParams,
    pub h: NetworkParams,
    pub d1: NetworkParams,
    pub d2: NetworkParams,
}

impl GanModels {
    pub fn build(cfg: &GanTrainConfig, rng: &mut impl Rng) -> Result<GanModels> {
        Ok(GanModels {
            g: build_generator3d(Role::G, &cfg.generator, rng)?,
            f: build_generator3d(Role::F, &cfg.generator, rng)?,
            h: build_generator3d(Role::H, &cfg.generator, rng)?,
            d1: build_discriminator3d(Role::D1, &cfg.discriminator, rng)?,
            d2: build_discriminator3d(Role::D2, &cfg.discriminator, rng)?,
        })
    }
}

/// Optimizer states: one shared over G, F, H (they are updated on one
/// objective) and one per discriminator.
pub struct GanOptimizers {
    pub gen: AdamState,
    pub d1: AdamState,
    pub d2: AdamState,
}

impl GanOptimizers {
    pub fn new(cfg: &GanTrainConfig) -> GanOptimizers {
        GanOptimizers {
            gen: AdamState::new(cfg.adam()),
            d1: AdamState::new(cfg.adam()),
            d2: AdamState::new(cfg.adam()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanSide {
    Generator,
    Discriminator,
}

/// Adversarial loss over the discriminator's logit map.
///
/// Log mode uses the non-saturating generator objective -E[log sigmoid(D(fake))];
/// the discriminator minimizes -E[log sigmoid(D(real))] - E[log(1 - sigmoid(D(fake)))].
/// Least-squares mode regresses raw logits to 1 (real) and 0 (fake).
pub fn gan_loss(
    d_net: &NetworkParams,
    real: &Tensor,
    fake: &Tensor,
    side: GanSide,
    mode: GanMode,
) -> Result<Tensor> {
    match side {
        GanSide::Generator => {
            let logits = discriminator_forward(d_net, fake)?;
            match mode {
                // -E log sigmoid(x) = E softplus(-x)
                GanMode::Log => Ok(mean(&softplus(&scale(&logits, -1.0)))),
                GanMode::LeastSquares => {
                    let shifted = sub(&logits, &Tensor::full(logits.shape(), 1.0))?;
                    Ok(mean(&mul(&shifted, &shifted)?))
                }
            }
        }
        GanSide::Discriminator => {
            let real_logits = discriminator_forward(d_net, real)?;
            let fake_logits = discriminator_forward(d_net, &fake.detach())?;
            match mode {
                GanMode::Log => {
                    // -E log sigmoid(x) - E log(1 - sigmoid(y))
                    //   = E softplus(-x) + E softplus(y)
                    let lr = mean(&softplus(&scale(&real_logits, -1.0)));
                    let lf = mean(&softplus(&fake_logits));
                    add(&lr, &lf)
                }
                GanMode::LeastSquares => {
                    let shifted = sub(&real_logits, &Tensor::full(real_logits.shape(), 1.0))?;
                    let lr = mean(&mul(&shifted, &shifted)?);
                    let lf = mean(&mul(&fake_logits, &fake_logits)?);
                    add(&lr, &lf)
                }
            }
        }
    }
}

/// Cycle-consistency: E|F(G(label)) - label| + E|G(F(real)) - real|.
pub fn cycle_loss(
    g: &NetworkParams,
    f: &NetworkParams,
    label_crop: &Tensor,
    real_crop: &Tensor,
) -> Result<Tensor> {
    let rec_label = generator_forward(f, &generator_forward(g, label_crop)?)?;
    let rec_real = generator_forward(g, &generator_forward(f, real_crop)?)?;
    add(
        &l1_loss(&rec_label, label_crop)?,
        &l1_loss(&rec_real, real_crop)?,
    )
}

/// Spatial constraint: mean squared error between H(G(label)) and label.
pub fn spatial_loss(
    g: &NetworkParams,
    h: &NetworkParams,
    label_crop: &Tensor,
) -> Result<Tensor> {
    let reconstructed = generator_forward(h, &generator_forward(g, label_crop)?)?;
    mse_loss(&reconstructed, label_crop)
}

/// Component values of one training iteration; the total is the
/// lambda-weighted sum of the generator-side components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iteration: usize,
    pub gan_g: f64,
    pub gan_f: f64,
    pub cycle: f64,
    pub spatial: f64,
    pub d1: f64,
    pub d2: f64,
    pub total: f64,
}

fn check_finite(value: f64, component: &str, iteration: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!(
            "non-finite {component} loss at iteration {iteration}"
        )))
    }
}

/// One alternating SpCycleGAN update: G, F, H on the joint generator
/// objective, then D1 and D2 on their own losses with detached fakes.
pub fn spcyclegan_step(
    models: &GanModels,
    batch: &UnpairedBatch,
    cfg: &GanTrainConfig,
    opt: &mut GanOptimizers,
    iteration: usize,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let fake_real = generator_forward(&models.g, &batch.label_crop)?;
    let fake_label = generator_forward(&models.f, &batch.real_crop)?;

    // Generator phase.
    let adv_g = gan_loss(&models.d1, &batch.real_crop, &fake_real, GanSide::Generator, cfg.gan_mode)?;
    let adv_f = gan_loss(&models.d2, &batch.label_crop, &fake_label, GanSide::Generator, cfg.gan_mode)?;
    let rec_label = generator_forward(&models.f, &fake_real)?;
    let rec_real = generator_forward(&models.g, &fake_label)?;
    let cyc = add(
        &l1_loss(&rec_label, &batch.label_crop)?,
        &l1_loss(&rec_real, &batch.real_crop)?,
    )?;
    let spatial = if cfg.lambda2 != 0.0 {
        let reconstructed = generator_forward(&models.h, &fake_real)?;
        mse_loss(&reconstructed, &batch.label_crop)?
    } else {
        // Weight zero: keep the term out of the graph so H stays untouched.
        Tensor::scalar(0.0)
    };
    let total = add(
        &add(&adv_g, &adv_f)?,
        &add(&scale(&cyc, cfg.lambda1), &scale(&spatial, cfg.lambda2))?,
    )?;
    let breakdown_partial = (
        check_finite(adv_g.item(), "gan_g", iteration)?,
        check_finite(adv_f.item(), "gan_f", iteration)?,
        check_finite(cyc.item(), "cycle", iteration)?,
        check_finite(spatial.item(), "spatial", iteration)?,
        check_finite(total.item(), "total", iteration)?,
    );
    models.g.zero_grads();
    models.f.zero_grads();
    models.h.zero_grads();
    models.d1.zero_grads();
    models.d2.zero_grads();
    total.backward()?;
    // Adversarial generator terms touch D parameters too; those gradients are
    // discarded before the discriminator phase runs.
    models.d1.zero_grads();
    models.d2.zero_grads();
    let named: Vec<(String, &NetworkParams)> = vec![
        ("G".into(), &models.g),
        ("F".into(), &models.f),
        ("H".into(), &models.h),
    ];
    let gen_params: Vec<(String, Tensor)> = named
        .iter()
        .flat_map(|(prefix, net)| {
            net.trainable()
                .map(move |(n, t)| (format!("{prefix}.{n}"), t.clone()))
                .collect::<Vec<_>>()
        })
        .collect();
    opt.gen
        .step(gen_params.iter().map(|(n, t)| (n.as_str(), t)))?;

    // Discriminator phase (fakes detached inside gan_loss).
    let d1_loss = gan_loss(&models.d1, &batch.real_crop, &fake_real, GanSide::Discriminator, cfg.gan_mode)?;
    let d1_val = check_finite(d1_loss.item(), "d1", iteration)?;
    d1_loss.backward()?;
    let d1_params: Vec<(String, Tensor)> = models
        .d1
        .trainable()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    opt.d1.step(d1_params.iter().map(|(n, t)| (n.as_str(), t)))?;

    let d2_loss = gan_loss(&models.d2, &batch.label_crop, &fake_label, GanSide::Discriminator, cfg.gan_mode)?;
    let d2_val = check_finite(d2_loss.item(), "d2", iteration)?;
    d2_loss.backward()?;
    let d2_params: Vec<(String, Tensor)> = models
        .d2
        .trainable()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    opt.d2.step(d2_params.iter().map(|(n, t)| (n.as_str(), t)))?;

    let (gan_g, gan_f, cycle, spatial_v, total_v) = breakdown_partial;
    Ok(LossBreakdown {
        iteration,
        gan_g,
        gan_f,
        cycle,
        spatial: spatial_v,
        d1: d1_val,
        d2: d2_val,
        total: total_v,
    })
}

/// Binary labels to tanh range: 0 -> -1, nonzero -> +1.
pub fn label_to_tensor(v: &LabelVolume, dims: [usize; 3]) -> Tensor {
    debug_assert_eq!(
        (dims[0], dims[1], dims[2]),
        (v.dims.2, v.dims.1, v.dims.0),
        "tensor spatial order is (D,H,W) = (Z,Y,X)"
    );
    let values: Vec<f64> = v
        .labels
        .iter()
        .map(|&l| if l > 0 { 1.0 } else { -1.0 })
        .collect();
    Tensor::from_vec(&[1, 1, dims[0], dims[1], dims[2]], values)
}

/// 8-bit intensities to [-1, 1].
pub fn intensities_to_tensor(v: &Volume) -> Result<Tensor> {
    let VoxelData::U8(data) = &v.data else {
        return Err(Error::Format("expected a u8 microscopy volume".into()));
    };
    let values: Vec<f64> = data.iter().map(|&x| x as f64 / 127.5 - 1.0).collect();
    Ok(Tensor::from_vec(
        &[1, 1, v.dims.2, v.dims.1, v.dims.0],
        values,
    ))
}

fn crop_tensor(full: &Tensor, corner: [usize; 3], size: [usize; 3]) -> Tensor {
    let s = full.shape();
    let (d, h, w) = (s[2], s[3], s[4]);
    let fv = full.values();
    let mut out = Vec::with_capacity(size[0] * size[1] * size[2]);
    for z in 0..size[0] {
        for y in 0..size[1] {
            let base = ((corner[0] + z) * h + corner[1] + y) * w + corner[2];
            out.extend_from_slice(&fv[base..base + size[2]]);
        }
    }
    drop(fv);
    let _ = d;
    Tensor::from_vec(&[1, 1, size[0], size[1], size[2]], out)
}

/// Draws one unpaired batch: independent uniform corners on each side.
pub fn sample_unpaired_batch<R: Rng>(
    label_tensors: &[Tensor],
    real_tensors: &[Tensor],
    crop: [usize; 3],
    rng: &mut R,
) -> Result<UnpairedBatch> {
    let pick_crop = |vols: &[Tensor], rng: &mut R| -> Result<Tensor> {
        let v = &vols[rng.gen_range(0..vols.len())];
        let s = v.shape();
        let mut corner = [0usize; 3];
        for i in 0..3 {
            if s[2 + i] < crop[i] {
                return Err(Error::Config(format!(
                    "crop {crop:?} larger than source dims {:?}",
                    &s[2..]
                )));
            }
            corner[i] = rng.gen_range(0..=(s[2 + i] - crop[i]));
        }
        Ok(crop_tensor(v, corner, crop))
    };
    let label_crop = pick_crop(label_tensors, rng)?;
    let real_crop = pick_crop(real_tensors, rng)?;
    Ok(UnpairedBatch {
        label_crop,
        real_crop,
    })
}

pub struct GanTrainResult {
    pub models: GanModels,
    pub log: Vec<LossBreakdown>,
}

/// Full training loop over random unpaired crops.
pub fn train_spcyclegan(
    cfg: &GanTrainConfig,
    label_volumes: &[LabelVolume],
    real_volumes: &[Volume],
) -> Result<GanTrainResult> {
    cfg.validate()?;
    if label_volumes.is_empty() || real_volumes.is_empty() {
        return Err(Error::Config("need at least one volume per side".into()));
    }
    let label_tensors: Vec<Tensor> = label_volumes
        .iter()
        .map(|v| label_to_tensor(v, [v.dims.2, v.dims.1, v.dims.0]))
        .collect();
    let real_tensors: Vec<Tensor> = real_volumes
        .iter()
        .map(intensities_to_tensor)
        .collect::<Result<_>>()?;
    for t in label_tensors.iter().chain(real_tensors.iter()) {
        let s = t.shape();
        for i in 0..3 {
            if s[2 + i] < cfg.crop_size[i] {
                return Err(Error::Config(format!(
                    "crop_size {:?} exceeds source dims {:?}",
                    cfg.crop_size,
                    &s[2..]
                )));
            }
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let models = GanModels::build(cfg, &mut rng)?;
    let mut opt = GanOptimizers::new(cfg);
    let mut log = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let batch = sample_unpaired_batch(&label_tensors, &real_tensors, cfg.crop_size, &mut rng)?;
        let record = spcyclegan_step(&models, &batch, cfg, &mut opt, iteration)?;
        log.push(record);
    }
    Ok(GanTrainResult { models, log })
}

/// Runs G over a full label volume and maps the tanh output to 8-bit
/// intensities. Dims not divisible by the generator geometry are padded with
/// background and cropped back.
pub fn generate_synthetic(g: &NetworkParams, label_volume: &LabelVolume) -> Result<Volume> {
    let crate::networks::ArchDescriptor::Generator3d(gen_cfg) = g.arch() else {
        return Err(Error::Model(format!(
            "checkpoint role {} is not a generator",
            g.role()
        )));
    };
    let factor = 1 << gen_cfg.n_downsample;
    let (x, y, z) = label_volume.dims;
    let pad = |d: usize| d.div_ceil(factor) * factor;
    let (px, py, pz) = (pad(x), pad(y), pad(z));
    let mut values = vec![-1.0f64; px * py * pz];
    for zz in 0..z {
        for yy in 0..y {
            for xx in 0..x {
                if label_volume.get(xx, yy, zz) > 0 {
                    values[(zz * py + yy) * px + xx] = 1.0;
                }
            }
        }
    }
    let input = Tensor::from_vec(&[1, 1, pz, py, px], values);
    let out = generator_forward(g, &input)?;
    let ov = out.values();
    let mut data = vec![0u8; x * y * z];
    for zz in 0..z {
        for yy in 0..y {
            for xx in 0..x {
                let v = ov[(zz * py + yy) * px + xx];
                data[(zz * y + yy) * x + xx] = (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8;
            }
        }
    }
    Volume::new((x, y, z), VoxelData::U8(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{build_discriminator3d, build_generator3d};

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn tiny_cfg() -> GanTrainConfig {
        GanTrainConfig {
            crop_size: [8, 8, 8],
            generator: GenConfig {
                base_channels: 2,
                n_downsample: 1,
                n_resblocks: 1,
                ..Default::default()
            },
            discriminator: DiscConfig {
                base_channels: 2,
                n_layers: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Discriminator whose head weights/bias are zero emits logit 0 everywhere.
    fn zero_logit_disc() -> NetworkParams {
        let cfg = DiscConfig {
            base_channels: 2,
            n_layers: 2,
            ..Default::default()
        };
        let d = build_discriminator3d(Role::D1, &cfg, &mut rng(0)).unwrap();
        let w = d.get("head.conv.weight").unwrap();
        w.set_values(vec![0.0; w.len()]);
        d
    }

    #[test]
    fn zero_logits_give_two_ln_two() {
        let d = zero_logit_disc();
        let x = Tensor::zeros(&[1, 1, 8, 8, 8]);
        let loss = gan_loss(&d, &x, &x, GanSide::Discriminator, GanMode::Log).unwrap();
        assert!((loss.item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn confident_fake_drives_generator_loss_to_zero() {
        let d = zero_logit_disc();
        // push the head bias very positive: D(fake) -> large logits
        let b = d.get("head.conv.bias").unwrap();
        b.set_values(vec![50.0]);
        let x = Tensor::zeros(&[1, 1, 8, 8, 8]);
        let loss = gan_loss(&d, &x, &x, GanSide::Generator, GanMode::Log).unwrap();
        assert!(loss.item() < 1e-9);
    }

    #[test]
    fn least_squares_targets_met_gives_zero() {
        let d = zero_logit_disc();
        // real logit 1, fake logit 0: emulate by evaluating components directly.
        // With head zeroed and bias 1 the logit map is exactly 1 for any input,
        // so craft the check from two discriminators.
        let b = d.get("head.conv.bias").unwrap();
        b.set_values(vec![1.0]);
        let x = Tensor::zeros(&[1, 1, 8, 8, 8]);
        let real_part = gan_loss(&d, &x, &x, GanSide::Generator, GanMode::LeastSquares).unwrap();
        assert!(real_part.item() < 1e-12); // (D(fake)-1)^2 with D=1
        b.set_values(vec![0.0]);
        let fake_logits = discriminator_forward(&d, &x).unwrap();
        assert!(fake_logits.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cycle_loss_zero_for_identity_pair() {
        // A generator that is the identity cannot be built from the conv
        // stack directly; instead check the formula arithmetic on offsets.
        let label = Tensor::full(&[1, 1, 4, 4, 4], -1.0);
        let rec = Tensor::full(&[1, 1, 4, 4, 4], -1.0 + 0.25);
        let l = l1_loss(&rec, &label).unwrap();
        assert!((l.item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn spatial_offset_squares() {
        let a = Tensor::full(&[1, 1, 2, 2, 2], 0.1);
        let b = Tensor::zeros(&[1, 1, 2, 2, 2]);
        assert!((mse_loss(&a, &b).unwrap().item() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn spatial_gradients_reach_both_g_and_h() {
        let gen_cfg = GenConfig {
            base_channels: 2,
            n_downsample: 1,
            n_resblocks: 1,
            ..Default::default()
        };
        let g = build_generator3d(Role::G, &gen_cfg, &mut rng(1)).unwrap();
        let h = build_generator3d(Role::H, &gen_cfg, &mut rng(2)).unwrap();
        let label = Tensor::from_vec(
            &[1, 1, 4, 4, 4],
            (0..64).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect(),
        );
        let loss = spatial_loss(&g, &h, &label).unwrap();
        loss.backward().unwrap();
        let g_nonzero = g
            .trainable()
            .any(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)));
        let h_nonzero = h
            .trainable()
            .any(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)));
        assert!(g_nonzero && h_nonzero);
    }

    #[test]
    fn zero_lambdas_leave_h_untouched_and_zero_aux_grads() {
        let cfg = GanTrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..tiny_cfg()
        };
        let mut r = rng(5);
        let models = GanModels::build(&cfg, &mut r).unwrap();
        let h_before = models.h.checksum();
        let mut opt = GanOptimizers::new(&cfg);
        let batch = UnpairedBatch {
            label_crop: Tensor::full(&[1, 1, 8, 8, 8], -1.0),
            real_crop: Tensor::zeros(&[1, 1, 8, 8, 8]),
        };
        let rec = spcyclegan_step(&models, &batch, &cfg, &mut opt, 0).unwrap();
        assert_eq!(models.h.checksum(), h_before);
        assert!((rec.total - (rec.gan_g + rec.gan_f)).abs() < 1e-9);
    }

    #[test]
    fn step_partitions_updates() {
        let cfg = tiny_cfg();
        let mut r = rng(6);
        let models = GanModels::build(&cfg, &mut r).unwrap();
        let mut opt = GanOptimizers::new(&cfg);
        let batch = UnpairedBatch {
            label_crop: Tensor::full(&[1, 1, 8, 8, 8], -1.0),
            real_crop: Tensor::full(&[1, 1, 8, 8, 8], 0.2),
        };
        let before_g = models.g.checksum();
        let before_d1 = models.d1.checksum();
        spcyclegan_step(&models, &batch, &cfg, &mut opt, 0).unwrap();
        // all five networks trained in their phase
        assert_ne!(models.g.checksum(), before_g);
        assert_ne!(models.d1.checksum(), before_d1);
    }

    #[test]
    fn total_is_weighted_sum_of_components() {
        let cfg = tiny_cfg();
        let mut r = rng(7);
        let models = GanModels::build(&cfg, &mut r).unwrap();
        let mut opt = GanOptimizers::new(&cfg);
        let batch = UnpairedBatch {
            label_crop: Tensor::full(&[1, 1, 8, 8, 8], 1.0),
            real_crop: Tensor::full(&[1, 1, 8, 8, 8], -0.3),
        };
        let rec = spcyclegan_step(&models, &batch, &cfg, &mut opt, 3).unwrap();
        let expected =
            rec.gan_g + rec.gan_f + cfg.lambda1 * rec.cycle + cfg.lambda2 * rec.spatial;
        assert!((rec.total - expected).abs() < 1e-6);
        assert_eq!(rec.iteration, 3);
    }

    #[test]
    fn train_zero_iterations_gives_initial_models_and_empty_log() {
        let cfg = GanTrainConfig {
            iterations: 0,
            ..tiny_cfg()
        };
        let labels = vec![LabelVolume::zeros((8, 8, 8))];
        let reals = vec![Volume::zeros_u8((8, 8, 8))];
        let out = train_spcyclegan(&cfg, &labels, &reals).unwrap();
        assert!(out.log.is_empty());
        let mut r = rng(cfg.seed);
        let fresh = GanModels::build(&cfg, &mut r).unwrap();
        assert_eq!(out.models.g.checksum(), fresh.g.checksum());
    }

    #[test]
    fn oversized_crop_is_config_error() {
        let cfg = GanTrainConfig {
            crop_size: [16, 16, 16],
            iterations: 1,
            ..tiny_cfg()
        };
        let labels = vec![LabelVolume::zeros((8, 8, 8))];
        let reals = vec![Volume::zeros_u8((8, 8, 8))];
        assert!(matches!(
            train_spcyclegan(&cfg, &labels, &reals),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generate_synthetic_shape_range_determinism() {
        let gen_cfg = GenConfig {
            base_channels: 2,
            n_downsample: 1,
            n_resblocks: 1,
            ..Default::default()
        };
        let g = build_generator3d(Role::G, &gen_cfg, &mut rng(8)).unwrap();
        let mut label = LabelVolume::zeros((6, 5, 4)); // forces padding
        label.set(2, 2, 2, 1);
        let a = generate_synthetic(&g, &label).unwrap();
        assert_eq!(a.dims, (6, 5, 4));
        let b = generate_synthetic(&g, &label).unwrap();
        assert_eq!(a, b);
    }
}
