//! Batch and instance normalization over (N, C, D, H, W) tensors.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    Train,
    Eval,
}

fn check_norm_args(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(usize, usize, usize)> {
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    if input.shape().len() != 5 {
        return Err(Error::Dimension(format!(
            "normalization expects 5-D input, got {:?}",
            input.shape()
        )));
    }
    let (n, c) = (input.shape()[0], input.shape()[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dimension(format!(
            "gamma/beta must have shape [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let spatial = input.shape()[2..].iter().product();
    Ok((n, c, spatial))
}

/// Normalizes each reduction group (a set of flat index runs) to zero mean and
/// unit variance, then applies the per-channel affine transform. Shared by
/// batch norm (group = channel over all samples) and instance norm
/// (group = one sample × channel).
#[allow(clippy::too_many_arguments)]
fn normalize_groups(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: Vec<(usize, Vec<usize>)>, // (channel, base offsets of contiguous runs)
    run: usize,
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let xv = input.values();
    let gv = gamma.values();
    let bv = beta.values();
    let mut out = vec![0.0; xv.len()];
    let mut means = Vec::with_capacity(groups.len());
    let mut vars = Vec::with_capacity(groups.len());
    for (_, bases) in &groups {
        let m = (bases.len() * run) as f64;
        let mut mean = 0.0;
        for &b in bases {
            mean += xv[b..b + run].iter().sum::<f64>();
        }
        mean /= m;
        let mut var = 0.0;
        for &b in bases {
            var += xv[b..b + run].iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
        }
        var /= m;
        means.push(mean);
        vars.push(var);
    }
    for ((c, bases), (&mean, &var)) in groups.iter().zip(means.iter().zip(vars.iter())) {
        let inv_std = 1.0 / (var + eps).sqrt();
        for &b in bases {
            for i in 0..run {
                out[b + i] = gv[*c] * (xv[b + i] - mean) * inv_std + bv[*c];
            }
        }
    }
    drop(xv);
    let (ic, gc) = (input.clone(), gamma.clone());
    let groups_b = groups.clone();
    let (means_b, vars_b) = (means.clone(), vars.clone());
    let c_total = gamma.len();
    let out_t = Tensor::from_op(
        input.shape().to_vec(),
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |gy| {
            let xv = ic.values();
            let gv = gc.values();
            let mut gx = vec![0.0; xv.len()];
            let mut ggamma = vec![0.0; c_total];
            let mut gbeta = vec![0.0; c_total];
            for ((c, bases), (&mean, &var)) in
                groups_b.iter().zip(means_b.iter().zip(vars_b.iter()))
            {
                let m = (bases.len() * run) as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                // Reductions over the group.
                let mut sum_gy = 0.0;
                let mut sum_gy_xhat = 0.0;
                for &b in bases {
                    for i in 0..run {
                        let xhat = (xv[b + i] - mean) * inv_std;
                        sum_gy += gy[b + i];
                        sum_gy_xhat += gy[b + i] * xhat;
                    }
                }
                ggamma[*c] += sum_gy_xhat;
                gbeta[*c] += sum_gy;
                let k1 = sum_gy / m;
                let k2 = sum_gy_xhat / m;
                for &b in bases {
                    for i in 0..run {
                        let xhat = (xv[b + i] - mean) * inv_std;
                        gx[b + i] = gv[*c] * inv_std * (gy[b + i] - k1 - xhat * k2);
                    }
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        }),
    );
    (out_t, means, vars)
}

/// 3D batch normalization. In train mode normalizes with batch statistics per
/// channel over (N, D, H, W) and updates the running stats in place; in eval
/// mode normalizes with the running stats.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm3d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: NormMode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor> {
    let (n, c, spatial) = check_norm_args(input, gamma, beta, eps)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::Dimension(format!(
            "running stats must have shape [{c}]"
        )));
    }
    match mode {
        NormMode::Train => {
            let groups: Vec<(usize, Vec<usize>)> = (0..c)
                .map(|ch| {
                    (
                        ch,
                        (0..n).map(|ni| (ni * c + ch) * spatial).collect(),
                    )
                })
                .collect();
            let (out, means, vars) = normalize_groups(input, gamma, beta, groups, spatial, eps);
            let mut rm = running_mean.to_vec();
            let mut rv = running_var.to_vec();
            for ch in 0..c {
                rm[ch] = (1.0 - momentum) * rm[ch] + momentum * means[ch];
                rv[ch] = (1.0 - momentum) * rv[ch] + momentum * vars[ch];
            }
            running_mean.set_values(rm);
            running_var.set_values(rv);
            Ok(out)
        }
        NormMode::Eval => {
            // Affine map with frozen statistics.
            let rm = running_mean.to_vec();
            let rv = running_var.to_vec();
            let xv = input.values();
            let gv = gamma.values();
            let bv = beta.values();
            let mut out = vec![0.0; xv.len()];
            for ni in 0..n {
                for ch in 0..c {
                    let inv_std = 1.0 / (rv[ch] + eps).sqrt();
                    let base = (ni * c + ch) * spatial;
                    for i in 0..spatial {
                        out[base + i] = gv[ch] * (xv[base + i] - rm[ch]) * inv_std + bv[ch];
                    }
                }
            }
            drop(xv);
            let (ic, gc) = (input.clone(), gamma.clone());
            Ok(Tensor::from_op(
                input.shape().to_vec(),
                out,
                vec![input.clone(), gamma.clone(), beta.clone()],
                Box::new(move |gy| {
                    let xv = ic.values();
                    let gv = gc.values();
                    let mut gx = vec![0.0; xv.len()];
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for ni in 0..n {
                        for ch in 0..c {
                            let inv_std = 1.0 / (rv[ch] + eps).sqrt();
                            let base = (ni * c + ch) * spatial;
                            for i in 0..spatial {
                                let xhat = (xv[base + i] - rm[ch]) * inv_std;
                                gx[base + i] = gy[base + i] * gv[ch] * inv_std;
                                ggamma[ch] += gy[base + i] * xhat;
                                gbeta[ch] += gy[base + i];
                            }
                        }
                    }
                    vec![Some(gx), Some(ggamma), Some(gbeta)]
                }),
            ))
        }
    }
}

/// Instance normalization: per-sample, per-channel statistics over (D, H, W).
/// No running statistics.
pub fn instancenorm3d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (n, c, spatial) = check_norm_args(input, gamma, beta, eps)?;
    let groups: Vec<(usize, Vec<usize>)> = (0..n)
        .flat_map(|ni| (0..c).map(move |ch| (ch, vec![(ni * c + ch) * spatial])))
        .collect();
    let (out, _, _) = normalize_groups(input, gamma, beta, groups, spatial, eps);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine_identity(c: usize) -> (Tensor, Tensor) {
        (Tensor::full(&[c], 1.0), Tensor::zeros(&[c]))
    }

    #[test]
    fn constant_input_maps_to_zeros_in_train_mode() {
        let x = Tensor::from_vec(&[2, 1, 2, 2, 2], vec![7.0; 16]);
        let (g, b) = affine_identity(1);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        let y = batchnorm3d(&x, &g, &b, &rm, &rv, NormMode::Train, 0.1, 1e-5).unwrap();
        assert!(y.to_vec().iter().all(|&v| v.abs() < 1e-12));
        // running mean pulled toward 7
        assert!((rm.to_vec()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn normalizes_known_mean_and_std() {
        // channel values with mean 5, population std 2
        let x = Tensor::from_vec(&[1, 1, 1, 1, 4], vec![3.0, 5.0, 5.0, 7.0]);
        let (g, b) = affine_identity(1);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        let y = batchnorm3d(&x, &g, &b, &rm, &rv, NormMode::Train, 0.1, 1e-12).unwrap();
        let v = y.to_vec();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn instancenorm_constant_to_zeros() {
        let x = Tensor::from_vec(&[1, 2, 2, 2, 2], vec![4.0; 16]);
        let (g, b) = affine_identity(2);
        let y = instancenorm3d(&x, &g, &b, 1e-5).unwrap();
        assert!(y.to_vec().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let (g, b) = affine_identity(1);
        assert!(matches!(
            instancenorm3d(&x, &g, &b, 0.0),
            Err(crate::error::Error::Parameter(_))
        ));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::from_vec(&[1, 1, 1, 1, 2], vec![10.0, 14.0]);
        let (g, b) = affine_identity(1);
        let rm = Tensor::full(&[1], 12.0);
        let rv = Tensor::full(&[1], 4.0);
        let y = batchnorm3d(&x, &g, &b, &rm, &rv, NormMode::Eval, 0.1, 1e-12).unwrap();
        let v = y.to_vec();
        assert!((v[0] + 1.0).abs() < 1e-6);
        assert!((v[1] - 1.0).abs() < 1e-6);
    }
}
