//! Scalar loss functions over voxel tensors.

use super::ops::clamp;
use super::{check_same_shape, Tensor};
use crate::error::Result;

/// Probability clamp bound shared by BCE and the Dice smoothing term.
pub const PROB_EPS: f64 = 1e-7;

/// Binary cross-entropy: -(1/N) * sum(t*log s + (1-t)*log(1-s)).
/// Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before the logs.
pub fn bce_loss(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    check_same_shape(probs, targets, "bce_loss")?;
    let s = clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let n = s.len() as f64;
    let loss: f64 = s
        .values()
        .iter()
        .zip(targets.values().iter())
        .map(|(&si, &ti)| -(ti * si.ln() + (1.0 - ti) * (1.0 - si).ln()))
        .sum::<f64>()
        / n;
    let (sc, tc) = (s.clone(), targets.clone());
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![s, targets.clone()],
        Box::new(move |g| {
            let sv = sc.values();
            let tv = tc.values();
            let gs: Vec<f64> = sv
                .iter()
                .zip(tv.iter())
                .map(|(&si, &ti)| g[0] * (-(ti / si) + (1.0 - ti) / (1.0 - si)) / n)
                .collect();
            vec![Some(gs), None]
        }),
    ))
}

/// Dice loss: 1 - (2*sum(t*s) + smooth) / (sum(t^2) + sum(s^2) + smooth).
pub fn dice_loss(probs: &Tensor, targets: &Tensor, smooth: f64) -> Result<Tensor> {
    check_same_shape(probs, targets, "dice_loss")?;
    let (num, den) = {
        let sv = probs.values();
        let tv = targets.values();
        let inter: f64 = sv.iter().zip(tv.iter()).map(|(s, t)| s * t).sum();
        let s2: f64 = sv.iter().map(|s| s * s).sum();
        let t2: f64 = tv.iter().map(|t| t * t).sum();
        (2.0 * inter + smooth, t2 + s2 + smooth)
    };
    let loss = 1.0 - num / den;
    let (sc, tc) = (probs.clone(), targets.clone());
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![probs.clone(), targets.clone()],
        Box::new(move |g| {
            let sv = sc.values();
            let tv = tc.values();
            // d(num/den)/ds_i = (2 t_i * den - num * 2 s_i) / den^2
            let gs: Vec<f64> = sv
                .iter()
                .zip(tv.iter())
                .map(|(&si, &ti)| -g[0] * (2.0 * ti * den - num * 2.0 * si) / (den * den))
                .collect();
            vec![Some(gs), None]
        }),
    ))
}

/// Mean absolute difference. Subgradient at 0 is 0.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "l1_loss")?;
    let n = a.len() as f64;
    let loss: f64 = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n;
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let av = ac.values();
            let bv = bc.values();
            let ga: Vec<f64> = av
                .iter()
                .zip(bv.iter())
                .map(|(x, y)| g[0] * (x - y).signum_or_zero() / n)
                .collect();
            let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// Mean squared difference.
pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "mse_loss")?;
    let n = a.len() as f64;
    let loss: f64 = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let av = ac.values();
            let bv = bc.values();
            let ga: Vec<f64> = av
                .iter()
                .zip(bv.iter())
                .map(|(x, y)| g[0] * 2.0 * (x - y) / n)
                .collect();
            let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
            vec![Some(ga), Some(gb)]
        }),
    ))
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}
