//! Elementwise ops, reductions and shape plumbing.

use super::{check_same_shape, Tensor};
use crate::error::{Error, Result};

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "add")?;
    let values = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(x, y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        values,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "sub")?;
    let values = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(x, y)| x - y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        values,
        vec![a.clone(), b.clone()],
        Box::new(|g| {
            vec![
                Some(g.to_vec()),
                Some(g.iter().map(|v| -v).collect()),
            ]
        }),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "mul")?;
    let values = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(x, y)| x * y)
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        values,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let av = ac.values();
            let bv = bc.values();
            vec![
                Some(g.iter().zip(bv.iter()).map(|(gi, y)| gi * y).collect()),
                Some(g.iter().zip(av.iter()).map(|(gi, x)| gi * x).collect()),
            ]
        }),
    ))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let values = a.values().iter().map(|x| x * c).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        values,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.iter().map(|gi| gi * c).collect())]),
    )
}

pub fn sum(a: &Tensor) -> Tensor {
    let total: f64 = a.values().iter().sum();
    let n = a.len();
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![a.clone()],
        Box::new(move |g| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean(a: &Tensor) -> Tensor {
    let n = a.len();
    let total: f64 = a.values().iter().sum();
    Tensor::from_op(
        vec![1],
        vec![total / n as f64],
        vec![a.clone()],
        Box::new(move |g| vec![Some(vec![g[0] / n as f64; n])]),
    )
}

/// Clamp with straight-through gradient inside the interval, zero outside.
pub fn clamp(a: &Tensor, lo: f64, hi: f64) -> Tensor {
    let values: Vec<f64> = a.values().iter().map(|x| x.clamp(lo, hi)).collect();
    let ac = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        values,
        vec![a.clone()],
        Box::new(move |g| {
            let av = ac.values();
            vec![Some(
                g.iter()
                    .zip(av.iter())
                    .map(|(gi, x)| if *x >= lo && *x <= hi { *gi } else { 0.0 })
                    .collect(),
            )]
        }),
    )
}

/// Numerically stable ln(1 + e^x); derivative is sigmoid(x).
pub fn softplus(a: &Tensor) -> Tensor {
    let values: Vec<f64> = a
        .values()
        .iter()
        .map(|&x| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() })
        .collect();
    let ac = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        values,
        vec![a.clone()],
        Box::new(move |g| {
            let av = ac.values();
            vec![Some(
                g.iter()
                    .zip(av.iter())
                    .map(|(gi, &x)| gi * sigmoid_scalar(x))
                    .collect(),
            )]
        }),
    )
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Concatenate two (N, C, D, H, W) tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 5 || b.shape().len() != 5 {
        return Err(Error::Dimension(format!(
            "concat_channels expects 5-D tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    if sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Dimension(format!(
            "concat_channels: incompatible shapes {sa:?} and {sb:?}"
        )));
    }
    let (n, ca, cb) = (sa[0], sa[1], sb[1]);
    let spatial: usize = sa[2..].iter().product();
    let mut values = Vec::with_capacity((ca + cb) * n * spatial);
    {
        let av = a.values();
        let bv = b.values();
        for i in 0..n {
            values.extend_from_slice(&av[i * ca * spatial..(i + 1) * ca * spatial]);
            values.extend_from_slice(&bv[i * cb * spatial..(i + 1) * cb * spatial]);
        }
    }
    let out_shape = vec![n, ca + cb, sa[2], sa[3], sa[4]];
    Ok(Tensor::from_op(
        out_shape,
        values,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; n * ca * spatial];
            let mut gb = vec![0.0; n * cb * spatial];
            for i in 0..n {
                let base = i * (ca + cb) * spatial;
                ga[i * ca * spatial..(i + 1) * ca * spatial]
                    .copy_from_slice(&g[base..base + ca * spatial]);
                gb[i * cb * spatial..(i + 1) * cb * spatial]
                    .copy_from_slice(&g[base + ca * spatial..base + (ca + cb) * spatial]);
            }
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// Elementwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

pub fn activation(kind: Activation, a: &Tensor) -> Tensor {
    match kind {
        Activation::Relu => {
            let values: Vec<f64> = a.values().iter().map(|&x| x.max(0.0)).collect();
            let ac = a.clone();
            Tensor::from_op(
                a.shape().to_vec(),
                values,
                vec![a.clone()],
                Box::new(move |g| {
                    let av = ac.values();
                    vec![Some(
                        g.iter()
                            .zip(av.iter())
                            .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                            .collect(),
                    )]
                }),
            )
        }
        Activation::LeakyRelu(slope) => {
            assert!((0.0..1.0).contains(&slope), "leaky_relu slope must be in [0,1)");
            let values: Vec<f64> = a
                .values()
                .iter()
                .map(|&x| if x > 0.0 { x } else { slope * x })
                .collect();
            let ac = a.clone();
            Tensor::from_op(
                a.shape().to_vec(),
                values,
                vec![a.clone()],
                Box::new(move |g| {
                    let av = ac.values();
                    vec![Some(
                        g.iter()
                            .zip(av.iter())
                            .map(|(gi, &x)| if x > 0.0 { *gi } else { slope * gi })
                            .collect(),
                    )]
                }),
            )
        }
        Activation::Sigmoid => {
            let values: Vec<f64> = a.values().iter().map(|&x| sigmoid_scalar(x)).collect();
            let out_values = values.clone();
            Tensor::from_op(
                a.shape().to_vec(),
                values,
                vec![a.clone()],
                Box::new(move |g| {
                    vec![Some(
                        g.iter()
                            .zip(out_values.iter())
                            .map(|(gi, &s)| gi * s * (1.0 - s))
                            .collect(),
                    )]
                }),
            )
        }
        Activation::Tanh => {
            let values: Vec<f64> = a.values().iter().map(|&x| x.tanh()).collect();
            let out_values = values.clone();
            Tensor::from_op(
                a.shape().to_vec(),
                values,
                vec![a.clone()],
                Box::new(move |g| {
                    vec![Some(
                        g.iter()
                            .zip(out_values.iter())
                            .map(|(gi, &t)| gi * (1.0 - t * t))
                            .collect(),
                    )]
                }),
            )
        }
    }
}
