//! The five pipeline networks: generators G and F, spatial network H,
//! discriminators D1 and D2, and the segmentation U-Net M.
//!
//! A `NetworkParams` is an ordered name → tensor map plus an architecture
//! descriptor; forward passes interpret the descriptor and fetch parameters
//! by name, so a checkpoint fully determines behavior.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    activation, add, batchnorm3d, concat_channels, conv3d, conv_transpose3d,
    instancenorm3d, maxpool3d, Activation, NormMode, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    G,
    F,
    H,
    D1,
    D2,
    M,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Number of pooling steps; input spatial dims must divide 2^depth.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 5,
            base_channels: 16,
            in_channels: 1,
            out_channels: 1,
            leaky_slope: 0.2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    /// Stride-2 encoder convs; input dims must divide 2^n_downsample.
    pub n_downsample: usize,
    pub n_resblocks: usize,
    pub norm_eps: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            in_channels: 1,
            out_channels: 1,
            base_channels: 16,
            n_downsample: 2,
            n_resblocks: 4,
            norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Stride-2 stages before the 1-channel logit head.
    pub n_layers: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            in_channels: 1,
            base_channels: 16,
            n_layers: 3,
            leaky_slope: 0.2,
            norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ArchDescriptor {
    UNet3d(UNetConfig),
    Generator3d(GenConfig),
    Discriminator3d(DiscConfig),
}

/// Named parameter collection for one network.
pub struct NetworkParams {
    role: Role,
    arch: ArchDescriptor,
    params: IndexMap<String, Tensor>,
}

impl NetworkParams {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter '{name}'")))
    }

    /// All entries including batch-norm running statistics.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Trainable parameters (running statistics excluded).
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter(|(n, _)| !n.contains("running_"))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.trainable() {
            t.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a hash over all raw parameter bytes; cheap change detector.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in self.entries() {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in t.values().iter() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

fn he_tensor<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::param(shape, values)
}

struct Builder<'r, R: Rng> {
    params: IndexMap<String, Tensor>,
    rng: &'r mut R,
}

impl<'r, R: Rng> Builder<'r, R> {
    fn new(rng: &'r mut R) -> Self {
        Builder {
            params: IndexMap::new(),
            rng,
        }
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let fan_in = cin * k * k * k;
        self.params.insert(
            format!("{name}.weight"),
            he_tensor(&[cout, cin, k, k, k], fan_in, self.rng),
        );
        self.params
            .insert(format!("{name}.bias"), Tensor::param(&[cout], vec![0.0; cout]));
    }

    /// Transpose conv weight layout is (Cin, Cout, k, k, k).
    fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = cin * k * k * k;
        self.params.insert(
            format!("{name}.weight"),
            he_tensor(&[cin, cout, k, k, k], fan_in, self.rng),
        );
        self.params
            .insert(format!("{name}.bias"), Tensor::param(&[cout], vec![0.0; cout]));
    }

    fn norm_affine(&mut self, name: &str, c: usize) {
        self.params
            .insert(format!("{name}.gamma"), Tensor::param(&[c], vec![1.0; c]));
        self.params
            .insert(format!("{name}.beta"), Tensor::param(&[c], vec![0.0; c]));
    }

    fn batchnorm(&mut self, name: &str, c: usize) {
        self.norm_affine(name, c);
        self.params.insert(
            format!("{name}.running_mean"),
            Tensor::from_vec(&[c], vec![0.0; c]),
        );
        self.params.insert(
            format!("{name}.running_var"),
            Tensor::from_vec(&[c], vec![1.0; c]),
        );
    }
}

/// Channel width at U-Net stage `i` (the bridge is stage `depth`).
fn unet_channels(cfg: &UNetConfig, stage: usize) -> usize {
    cfg.base_channels << stage
}

pub fn build_unet3d<R: Rng>(cfg: &UNetConfig, rng: &mut R) -> Result<NetworkParams> {
    if cfg.depth == 0 || cfg.base_channels == 0 {
        return Err(Error::Config("unet depth and base_channels must be positive".into()));
    }
    let mut b = Builder::new(rng);
    let mut cin = cfg.in_channels;
    for i in 0..cfg.depth {
        let c = unet_channels(cfg, i);
        b.conv(&format!("enc{i}.conv1"), c, cin, 3);
        b.batchnorm(&format!("enc{i}.bn1"), c);
        b.conv(&format!("enc{i}.conv2"), c, c, 3);
        b.batchnorm(&format!("enc{i}.bn2"), c);
        cin = c;
    }
    let bridge = unet_channels(cfg, cfg.depth);
    b.conv("bridge.conv1", bridge, cin, 3);
    b.batchnorm("bridge.bn1", bridge);
    b.conv("bridge.conv2", bridge, bridge, 3);
    b.batchnorm("bridge.bn2", bridge);
    for i in (0..cfg.depth).rev() {
        let c = unet_channels(cfg, i);
        let c_up = unet_channels(cfg, i + 1);
        b.conv_transpose(&format!("up{i}"), c_up, c, 2);
        b.conv(&format!("dec{i}.conv1"), c, 2 * c, 3);
        b.batchnorm(&format!("dec{i}.bn1"), c);
        b.conv(&format!("dec{i}.conv2"), c, c, 3);
        b.batchnorm(&format!("dec{i}.bn2"), c);
    }
    b.conv("head", cfg.out_channels, cfg.base_channels, 1);
    Ok(NetworkParams {
        role: Role::M,
        arch: ArchDescriptor::UNet3d(cfg.clone()),
        params: b.params,
    })
}

pub fn build_generator3d<R: Rng>(role: Role, cfg: &GenConfig, rng: &mut R) -> Result<NetworkParams> {
    if !matches!(role, Role::G | Role::F | Role::H) {
        return Err(Error::Model(format!("role {role} is not a generator role")));
    }
    let mut b = Builder::new(rng);
    let c0 = cfg.base_channels;
    b.conv("stem.conv", c0, cfg.in_channels, 3);
    b.norm_affine("stem.norm", c0);
    for i in 0..cfg.n_downsample {
        let cin = c0 << i;
        let cout = c0 << (i + 1);
        b.conv(&format!("down{i}.conv"), cout, cin, 4);
        b.norm_affine(&format!("down{i}.norm"), cout);
    }
    let cmid = c0 << cfg.n_downsample;
    for j in 0..cfg.n_resblocks {
        b.conv(&format!("res{j}.conv1"), cmid, cmid, 3);
        b.norm_affine(&format!("res{j}.norm1"), cmid);
        b.conv(&format!("res{j}.conv2"), cmid, cmid, 3);
        b.norm_affine(&format!("res{j}.norm2"), cmid);
    }
    for i in (0..cfg.n_downsample).rev() {
        let cin = c0 << (i + 1);
        let cout = c0 << i;
        b.conv_transpose(&format!("up{i}.conv"), cin, cout, 4);
        b.norm_affine(&format!("up{i}.norm"), cout);
    }
    b.conv("head.conv", cfg.out_channels, c0, 3);
    Ok(NetworkParams {
        role,
        arch: ArchDescriptor::Generator3d(cfg.clone()),
        params: b.params,
    })
}

pub fn build_discriminator3d<R: Rng>(
    role: Role,
    cfg: &DiscConfig,
    rng: &mut R,
) -> Result<NetworkParams> {
    if !matches!(role, Role::D1 | Role::D2) {
        return Err(Error::Model(format!("role {role} is not a discriminator role")));
    }
    let mut b = Builder::new(rng);
    let mut cin = cfg.in_channels;
    for i in 0..cfg.n_layers {
        let cout = cfg.base_channels << i;
        b.conv(&format!("layer{i}.conv"), cout, cin, 4);
        if i > 0 {
            b.norm_affine(&format!("layer{i}.norm"), cout);
        }
        cin = cout;
    }
    b.conv("head.conv", 1, cin, 3);
    Ok(NetworkParams {
        role,
        arch: ArchDescriptor::Discriminator3d(cfg.clone()),
        params: b.params,
    })
}

fn check_divisible(x: &Tensor, factor: usize) -> Result<()> {
    for &d in &x.shape()[2..] {
        if d % factor != 0 {
            return Err(Error::Geometry(format!(
                "spatial dim {d} not divisible by {factor}"
            )));
        }
    }
    Ok(())
}

fn conv_block(
    net: &NetworkParams,
    name: &str,
    bn: &str,
    x: &Tensor,
    cfg: &UNetConfig,
    mode: NormMode,
) -> Result<Tensor> {
    let y = conv3d(x, net.get(&format!("{name}.weight"))?, net.get(&format!("{name}.bias"))?, 1, 1)?;
    let y = batchnorm3d(
        &y,
        net.get(&format!("{bn}.gamma"))?,
        net.get(&format!("{bn}.beta"))?,
        net.get(&format!("{bn}.running_mean"))?,
        net.get(&format!("{bn}.running_var"))?,
        mode,
        cfg.bn_momentum,
        cfg.bn_eps,
    )?;
    Ok(activation(Activation::LeakyRelu(cfg.leaky_slope), &y))
}

/// U-Net forward pass. Output has the input's spatial shape, values in (0,1).
pub fn unet_forward(net: &NetworkParams, x: &Tensor, mode: NormMode) -> Result<Tensor> {
    let ArchDescriptor::UNet3d(cfg) = &net.arch else {
        return Err(Error::Model(format!(
            "checkpoint role {} is not a U-Net",
            net.role
        )));
    };
    if x.shape().len() != 5 || x.shape()[1] != cfg.in_channels {
        return Err(Error::Dimension(format!(
            "unet input must be (N,{},D,H,W), got {:?}",
            cfg.in_channels,
            x.shape()
        )));
    }
    check_divisible(x, 1 << cfg.depth)?;
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut h = x.clone();
    for i in 0..cfg.depth {
        let h1 = conv_block(net, &format!("enc{i}.conv1"), &format!("enc{i}.bn1"), &h, cfg, mode)?;
        let h2 = conv_block(net, &format!("enc{i}.conv2"), &format!("enc{i}.bn2"), &h1, cfg, mode)?;
        skips.push(h2.clone());
        h = maxpool3d(&h2, 2, 2)?;
    }
    let h1 = conv_block(net, "bridge.conv1", "bridge.bn1", &h, cfg, mode)?;
    h = conv_block(net, "bridge.conv2", "bridge.bn2", &h1, cfg, mode)?;
    for i in (0..cfg.depth).rev() {
        let up = conv_transpose3d(
            &h,
            net.get(&format!("up{i}.weight"))?,
            net.get(&format!("up{i}.bias"))?,
            2,
            0,
        )?;
        let cat = concat_channels(&skips[i], &up)?;
        let h1 = conv_block(net, &format!("dec{i}.conv1"), &format!("dec{i}.bn1"), &cat, cfg, mode)?;
        h = conv_block(net, &format!("dec{i}.conv2"), &format!("dec{i}.bn2"), &h1, cfg, mode)?;
    }
    let logits = conv3d(&h, net.get("head.weight")?, net.get("head.bias")?, 1, 0)?;
    Ok(activation(Activation::Sigmoid, &logits))
}

fn in_block(
    net: &NetworkParams,
    norm: &str,
    x: &Tensor,
    eps: f64,
    act: Option<Activation>,
) -> Result<Tensor> {
    let y = instancenorm3d(
        x,
        net.get(&format!("{norm}.gamma"))?,
        net.get(&format!("{norm}.beta"))?,
        eps,
    )?;
    Ok(match act {
        Some(a) => activation(a, &y),
        None => y,
    })
}

/// Generator forward pass: tanh output in (-1, 1), same spatial shape.
pub fn generator_forward(net: &NetworkParams, x: &Tensor) -> Result<Tensor> {
    let ArchDescriptor::Generator3d(cfg) = &net.arch else {
        return Err(Error::Model(format!(
            "checkpoint role {} is not a generator",
            net.role
        )));
    };
    check_divisible(x, 1 << cfg.n_downsample)?;
    let mut h = conv3d(x, net.get("stem.conv.weight")?, net.get("stem.conv.bias")?, 1, 1)?;
    h = in_block(net, "stem.norm", &h, cfg.norm_eps, Some(Activation::Relu))?;
    for i in 0..cfg.n_downsample {
        h = conv3d(
            &h,
            net.get(&format!("down{i}.conv.weight"))?,
            net.get(&format!("down{i}.conv.bias"))?,
            2,
            1,
        )?;
        h = in_block(net, &format!("down{i}.norm"), &h, cfg.norm_eps, Some(Activation::Relu))?;
    }
    for j in 0..cfg.n_resblocks {
        let r1 = conv3d(
            &h,
            net.get(&format!("res{j}.conv1.weight"))?,
            net.get(&format!("res{j}.conv1.bias"))?,
            1,
            1,
        )?;
        let r1 = in_block(net, &format!("res{j}.norm1"), &r1, cfg.norm_eps, Some(Activation::Relu))?;
        let r2 = conv3d(
            &r1,
            net.get(&format!("res{j}.conv2.weight"))?,
            net.get(&format!("res{j}.conv2.bias"))?,
            1,
            1,
        )?;
        let r2 = in_block(net, &format!("res{j}.norm2"), &r2, cfg.norm_eps, None)?;
        h = add(&h, &r2)?;
    }
    for i in (0..cfg.n_downsample).rev() {
        h = conv_transpose3d(
            &h,
            net.get(&format!("up{i}.conv.weight"))?,
            net.get(&format!("up{i}.conv.bias"))?,
            2,
            1,
        )?;
        h = in_block(net, &format!("up{i}.norm"), &h, cfg.norm_eps, Some(Activation::Relu))?;
    }
    let out = conv3d(&h, net.get("head.conv.weight")?, net.get("head.conv.bias")?, 1, 1)?;
    Ok(activation(Activation::Tanh, &out))
}

/// Patch discriminator forward pass: 1-channel logit map.
pub fn discriminator_forward(net: &NetworkParams, x: &Tensor) -> Result<Tensor> {
    let ArchDescriptor::Discriminator3d(cfg) = &net.arch else {
        return Err(Error::Model(format!(
            "checkpoint role {} is not a discriminator",
            net.role
        )));
    };
    check_divisible(x, 1 << cfg.n_layers)?;
    let mut h = x.clone();
    for i in 0..cfg.n_layers {
        h = conv3d(
            &h,
            net.get(&format!("layer{i}.conv.weight"))?,
            net.get(&format!("layer{i}.conv.bias"))?,
            2,
            1,
        )?;
        if i > 0 {
            h = in_block(net, &format!("layer{i}.norm"), &h, cfg.norm_eps, None)?;
        }
        h = activation(Activation::LeakyRelu(cfg.leaky_slope), &h);
    }
    conv3d(&h, net.get("head.conv.weight")?, net.get("head.conv.bias")?, 1, 1)
}

// ---- checkpoint io ---------------------------------------------------------

const MAGIC: &[u8; 8] = b"VSEGNET1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    role: Role,
    arch: ArchDescriptor,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

pub fn save_checkpoint(path: &Path, net: &NetworkParams) -> Result<()> {
    let header = CheckpointHeader {
        format_version: 1,
        role: net.role,
        arch: net.arch.clone(),
        params: net
            .params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                trainable: t.requires_grad(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header serialization: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for (_, t) in net.params.iter() {
        for v in t.values().iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::CorruptFile(format!("{}: too short", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a network checkpoint",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)
        .map_err(|_| Error::CorruptFile(format!("{}: truncated header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::CorruptFile(format!("{}: bad header: {e}", path.display())))?;
    if header.format_version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let mut params = IndexMap::new();
    for entry in &header.params {
        let count: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; count * 8];
        f.read_exact(&mut bytes).map_err(|_| {
            Error::CorruptFile(format!(
                "{}: truncated payload at '{}'",
                path.display(),
                entry.name
            ))
        })?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = if entry.trainable {
            Tensor::param(&entry.shape, values)
        } else {
            Tensor::from_vec(&entry.shape, values)
        };
        params.insert(entry.name.clone(), t);
    }
    let mut tail = Vec::new();
    f.read_to_end(&mut tail)?;
    if !tail.is_empty() {
        return Err(Error::CorruptFile(format!(
            "{}: {} trailing bytes",
            path.display(),
            tail.len()
        )));
    }
    Ok(NetworkParams {
        role: header.role,
        arch: header.arch,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn tiny_unet_cfg() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_channels: 2,
            ..Default::default()
        }
    }

    #[test]
    fn unet_param_count_matches_hand_count() {
        // depth 2, base 2: ladder 2, 4 with bridge 8.
        // enc0: 1->2 (54+2) bn(4) + 2->2 (108+2) bn(4)            = 174
        // enc1: 2->4 (216+4) bn(8) + 4->4 (432+4) bn(8)           = 672
        // bridge: 4->8 (864+8) bn(16) + 8->8 (1728+8) bn(16)      = 2640
        // up1 8->4 k2 (256+4); dec1: 8->4 (864+4) bn(8) + 4->4 (432+4) bn(8) = 1580
        // up0 4->2 k2 (64+2);  dec0: 4->2 (216+2) bn(4) + 2->2 (108+2) bn(4) = 402
        // head 1x1x1 2->1 (2+1)                                   = 3
        let net = build_unet3d(&tiny_unet_cfg(), &mut rng(0)).unwrap();
        assert_eq!(net.param_count(), 174 + 672 + 2640 + 1580 + 402 + 3);
    }

    #[test]
    fn unet_channel_ladder() {
        let cfg = UNetConfig::default();
        let widths: Vec<usize> = (0..=cfg.depth).map(|i| unet_channels(&cfg, i)).collect();
        assert_eq!(widths, vec![16, 32, 64, 128, 256, 512]);
    }

    #[test]
    fn unet_forward_shape_and_range() {
        let net = build_unet3d(&tiny_unet_cfg(), &mut rng(1)).unwrap();
        let x = Tensor::from_vec(&[1, 1, 8, 8, 8], (0..512).map(|i| i as f64 / 512.0).collect());
        let y = unet_forward(&net, &x, NormMode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8, 8]);
        assert!(y.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn unet_rejects_indivisible_input() {
        let net = build_unet3d(&tiny_unet_cfg(), &mut rng(1)).unwrap();
        let x = Tensor::zeros(&[1, 1, 6, 8, 8]);
        assert!(matches!(
            unet_forward(&net, &x, NormMode::Train),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn unet_eval_forward_deterministic() {
        let net = build_unet3d(&tiny_unet_cfg(), &mut rng(2)).unwrap();
        let x = Tensor::from_vec(&[1, 1, 8, 8, 8], (0..512).map(|i| (i % 7) as f64).collect());
        let a = unet_forward(&net, &x, NormMode::Eval).unwrap();
        let b = unet_forward(&net, &x, NormMode::Eval).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn builder_reproducible_from_seed() {
        let a = build_unet3d(&tiny_unet_cfg(), &mut rng(7)).unwrap();
        let b = build_unet3d(&tiny_unet_cfg(), &mut rng(7)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = build_unet3d(&tiny_unet_cfg(), &mut rng(8)).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    fn tiny_gen_cfg() -> GenConfig {
        GenConfig {
            base_channels: 4,
            n_downsample: 2,
            n_resblocks: 2,
            ..Default::default()
        }
    }

    #[test]
    fn generator_output_shape_and_range() {
        let net = build_generator3d(Role::G, &tiny_gen_cfg(), &mut rng(3)).unwrap();
        let x = Tensor::from_vec(&[1, 1, 8, 8, 8], (0..512).map(|i| (i % 5) as f64 - 2.0).collect());
        let y = generator_forward(&net, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8, 8]);
        assert!(y.to_vec().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn h_descriptor_equals_g_descriptor() {
        let g = build_generator3d(Role::G, &tiny_gen_cfg(), &mut rng(4)).unwrap();
        let h = build_generator3d(Role::H, &tiny_gen_cfg(), &mut rng(5)).unwrap();
        assert_eq!(g.arch(), h.arch());
        assert_ne!(g.checksum(), h.checksum()); // independent parameters
    }

    #[test]
    fn discriminator_logit_map_size() {
        let cfg = DiscConfig {
            base_channels: 2,
            n_layers: 3,
            ..Default::default()
        };
        let net = build_discriminator3d(Role::D1, &cfg, &mut rng(6)).unwrap();
        let x = Tensor::zeros(&[1, 1, 64, 64, 64]);
        let y = discriminator_forward(&net, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8, 8]);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let net = build_unet3d(&tiny_unet_cfg(), &mut rng(9)).unwrap();
        save_checkpoint(&path, &net).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(net.checksum(), back.checksum());
        assert_eq!(net.role(), back.role());
        assert_eq!(net.arch(), back.arch());
        // save again: byte-identical file
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        // and identical forward outputs
        let x = Tensor::from_vec(&[1, 1, 8, 8, 8], (0..512).map(|i| (i % 3) as f64).collect());
        let a = unet_forward(&net, &x, NormMode::Eval).unwrap();
        let b = unet_forward(&back, &x, NormMode::Eval).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn ablating_skip_changes_output() {
        // Zeroing the skip-concat conv weights that read the skip half must
        // change the output; proves the concatenation is wired.
        let net = build_unet3d(&tiny_unet_cfg(), &mut rng(10)).unwrap();
        let x = Tensor::from_vec(&[1, 1, 8, 8, 8], (0..512).map(|i| (i % 11) as f64).collect());
        let base = unet_forward(&net, &x, NormMode::Eval).unwrap();
        // dec0.conv1 weight has shape (2, 4, 3,3,3); first 2 input channels
        // are the skip features.
        let w = net.get("dec0.conv1.weight").unwrap();
        let saved = w.to_vec();
        let mut zeroed = saved.clone();
        let k = 27;
        for co in 0..2 {
            for ci in 0..2 {
                let base_i = (co * 4 + ci) * k;
                for v in &mut zeroed[base_i..base_i + k] {
                    *v = 0.0;
                }
            }
        }
        w.set_values(zeroed);
        let ablated = unet_forward(&net, &x, NormMode::Eval).unwrap();
        w.set_values(saved);
        assert_ne!(base.to_vec(), ablated.to_vec());
    }
}
