//! 3D convolution, transpose convolution and max pooling.
//!
//! `conv_transpose3d`'s forward pass and `conv3d`'s input gradient share one
//! scatter routine, so the adjoint identity between the two holds bitwise.

use rayon::prelude::*;

use super::{Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    cin: usize,
    cout: usize,
    id: [usize; 3],
    od: [usize; 3],
    k: [usize; 3],
    stride: usize,
    padding: usize,
}

fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if k > padded {
        return Err(Error::Geometry(format!(
            "kernel {k} exceeds padded input {padded}"
        )));
    }
    let span = padded - k;
    if !span.is_multiple_of(stride) {
        return Err(Error::Geometry(format!(
            "non-integer output size: (({input} + 2*{padding}) - {k}) not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

fn check_5d(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().len() != 5 {
        return Err(Error::Dimension(format!(
            "{what} must be 5-D (N,C,D,H,W), got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Gather: out[n,co,z,y,x] = bias[co] + sum over ci,k of
/// x[n,ci, z*s - p + kz, ...] * w[co,ci,kz,ky,kx].
fn conv_gather(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: Geom) -> Vec<f64> {
    let ospatial = g.od[0] * g.od[1] * g.od[2];
    let ispatial = g.id[0] * g.id[1] * g.id[2];
    let ksize = g.k[0] * g.k[1] * g.k[2];
    let mut out = vec![0.0; g.n * g.cout * ospatial];
    out.par_chunks_mut(ospatial).enumerate().for_each(|(chunk, o)| {
        let n = chunk / g.cout;
        let co = chunk % g.cout;
        if let Some(b) = bias {
            o.fill(b[co]);
        }
        if g.stride == 1 {
            // Row-contiguous fast path: for every kernel offset, one
            // vectorizable axpy over the overlapping x-range of each row.
            let p = g.padding as isize;
            for ci in 0..g.cin {
                let xb = (n * g.cin + ci) * ispatial;
                let wb = (co * g.cin + ci) * ksize;
                for oz in 0..g.od[0] {
                    for kz in 0..g.k[0] {
                        let zi = oz as isize - p + kz as isize;
                        if zi < 0 || zi >= g.id[0] as isize {
                            continue;
                        }
                        for oy in 0..g.od[1] {
                            let orow = (oz * g.od[1] + oy) * g.od[2];
                            for ky in 0..g.k[1] {
                                let yi = oy as isize - p + ky as isize;
                                if yi < 0 || yi >= g.id[1] as isize {
                                    continue;
                                }
                                let xrow = xb
                                    + (zi as usize * g.id[1] + yi as usize) * g.id[2];
                                let wrow = wb + (kz * g.k[1] + ky) * g.k[2];
                                for kx in 0..g.k[2] {
                                    let shift = kx as isize - p;
                                    let lo = (-shift).max(0) as usize;
                                    let hi = (g.od[2] as isize)
                                        .min(g.id[2] as isize - shift)
                                        .max(0) as usize;
                                    if hi <= lo {
                                        continue;
                                    }
                                    let wv = w[wrow + kx];
                                    let xoff = xrow + (lo as isize + shift) as usize;
                                    let xs = &x[xoff..xoff + (hi - lo)];
                                    for (ov, xv) in
                                        o[orow + lo..orow + hi].iter_mut().zip(xs)
                                    {
                                        *ov += wv * *xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            return;
        }
        for ci in 0..g.cin {
            let xb = (n * g.cin + ci) * ispatial;
            let wb = (co * g.cin + ci) * ksize;
            for oz in 0..g.od[0] {
                let zi0 = (oz * g.stride) as isize - g.padding as isize;
                for oy in 0..g.od[1] {
                    let yi0 = (oy * g.stride) as isize - g.padding as isize;
                    for ox in 0..g.od[2] {
                        let xi0 = (ox * g.stride) as isize - g.padding as isize;
                        let mut acc = 0.0;
                        for kz in 0..g.k[0] {
                            let zi = zi0 + kz as isize;
                            if zi < 0 || zi >= g.id[0] as isize {
                                continue;
                            }
                            for ky in 0..g.k[1] {
                                let yi = yi0 + ky as isize;
                                if yi < 0 || yi >= g.id[1] as isize {
                                    continue;
                                }
                                let xrow = xb
                                    + (zi as usize * g.id[1] + yi as usize) * g.id[2];
                                let wrow = wb + (kz * g.k[1] + ky) * g.k[2];
                                for kx in 0..g.k[2] {
                                    let xi = xi0 + kx as isize;
                                    if xi < 0 || xi >= g.id[2] as isize {
                                        continue;
                                    }
                                    acc += x[xrow + xi as usize] * w[wrow + kx];
                                }
                            }
                        }
                        o[(oz * g.od[1] + oy) * g.od[2] + ox] += acc;
                    }
                }
            }
        }
    });
    out
}

/// Scatter: out[n,b, z*s - p + kz, ...] += src[n,a,z,y,x] * w[a,b,kz,ky,kx].
///
/// With `src` = upstream gradient and `w` the conv weight (A = Cout, B = Cin)
/// this is conv3d's input gradient; with `src` = input and `w` a transpose-conv
/// weight (A = Cin, B = Cout) it is conv_transpose3d's forward pass.
#[allow(clippy::too_many_arguments)]
fn conv_scatter(
    src: &[f64],
    w: &[f64],
    src_d: [usize; 3],
    out_d: [usize; 3],
    n: usize,
    a_ch: usize,
    b_ch: usize,
    k: [usize; 3],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let sspatial = src_d[0] * src_d[1] * src_d[2];
    let ospatial = out_d[0] * out_d[1] * out_d[2];
    let ksize = k[0] * k[1] * k[2];
    let mut out = vec![0.0; n * b_ch * ospatial];
    out.par_chunks_mut(ospatial).enumerate().for_each(|(chunk, o)| {
        let ni = chunk / b_ch;
        let b = chunk % b_ch;
        if stride == 1 {
            // Row-contiguous fast path mirroring conv_gather's.
            let p = padding as isize;
            for a in 0..a_ch {
                let sb = (ni * a_ch + a) * sspatial;
                let wb = (a * b_ch + b) * ksize;
                for sz in 0..src_d[0] {
                    for kz in 0..k[0] {
                        let oz = sz as isize - p + kz as isize;
                        if oz < 0 || oz >= out_d[0] as isize {
                            continue;
                        }
                        for sy in 0..src_d[1] {
                            let srow = sb + (sz * src_d[1] + sy) * src_d[2];
                            for ky in 0..k[1] {
                                let oy = sy as isize - p + ky as isize;
                                if oy < 0 || oy >= out_d[1] as isize {
                                    continue;
                                }
                                let orow =
                                    (oz as usize * out_d[1] + oy as usize) * out_d[2];
                                let wrow = wb + (kz * k[1] + ky) * k[2];
                                for kx in 0..k[2] {
                                    let shift = kx as isize - p;
                                    let lo = (-shift).max(0) as usize;
                                    let hi = (src_d[2] as isize)
                                        .min(out_d[2] as isize - shift)
                                        .max(0) as usize;
                                    if hi <= lo {
                                        continue;
                                    }
                                    let wv = w[wrow + kx];
                                    let obase = (orow as isize
                                        + lo as isize
                                        + shift) as usize;
                                    let ss = &src[srow + lo..srow + hi];
                                    for (ov, sv) in
                                        o[obase..obase + (hi - lo)].iter_mut().zip(ss)
                                    {
                                        *ov += wv * *sv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            return;
        }
        for a in 0..a_ch {
            let sb = (ni * a_ch + a) * sspatial;
            let wb = (a * b_ch + b) * ksize;
            for sz in 0..src_d[0] {
                let oz0 = (sz * stride) as isize - padding as isize;
                for sy in 0..src_d[1] {
                    let oy0 = (sy * stride) as isize - padding as isize;
                    for sx in 0..src_d[2] {
                        let v = src[sb + (sz * src_d[1] + sy) * src_d[2] + sx];
                        if v == 0.0 {
                            continue;
                        }
                        let ox0 = (sx * stride) as isize - padding as isize;
                        for kz in 0..k[0] {
                            let oz = oz0 + kz as isize;
                            if oz < 0 || oz >= out_d[0] as isize {
                                continue;
                            }
                            for ky in 0..k[1] {
                                let oy = oy0 + ky as isize;
                                if oy < 0 || oy >= out_d[1] as isize {
                                    continue;
                                }
                                let orow =
                                    (oz as usize * out_d[1] + oy as usize) * out_d[2];
                                let wrow = wb + (kz * k[1] + ky) * k[2];
                                for kx in 0..k[2] {
                                    let ox = ox0 + kx as isize;
                                    if ox < 0 || ox >= out_d[2] as isize {
                                        continue;
                                    }
                                    o[orow + ox as usize] += v * w[wrow + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Weight gradient shared by conv3d (x = input, gy = upstream) where
/// gw[co,ci,k] = sum over n, output positions of x[..input pos..] * gy.
fn conv_weight_grad(x: &[f64], gy: &[f64], g: Geom) -> Vec<f64> {
    let ospatial = g.od[0] * g.od[1] * g.od[2];
    let ispatial = g.id[0] * g.id[1] * g.id[2];
    let ksize = g.k[0] * g.k[1] * g.k[2];
    let mut gw = vec![0.0; g.cout * g.cin * ksize];
    gw.par_chunks_mut(g.cin * ksize).enumerate().for_each(|(co, gwc)| {
        for n in 0..g.n {
            let gyb = (n * g.cout + co) * ospatial;
            if g.stride == 1 {
                // Row-contiguous fast path: each kernel tap is a dot product
                // of overlapping gy/x row segments.
                let p = g.padding as isize;
                for ci in 0..g.cin {
                    let xb = (n * g.cin + ci) * ispatial;
                    for oz in 0..g.od[0] {
                        for kz in 0..g.k[0] {
                            let zi = oz as isize - p + kz as isize;
                            if zi < 0 || zi >= g.id[0] as isize {
                                continue;
                            }
                            for oy in 0..g.od[1] {
                                let gyrow = gyb + (oz * g.od[1] + oy) * g.od[2];
                                for ky in 0..g.k[1] {
                                    let yi = oy as isize - p + ky as isize;
                                    if yi < 0 || yi >= g.id[1] as isize {
                                        continue;
                                    }
                                    let xrow = xb
                                        + (zi as usize * g.id[1] + yi as usize)
                                            * g.id[2];
                                    let grow =
                                        ci * ksize + (kz * g.k[1] + ky) * g.k[2];
                                    for kx in 0..g.k[2] {
                                        let shift = kx as isize - p;
                                        let lo = (-shift).max(0) as usize;
                                        let hi = (g.od[2] as isize)
                                            .min(g.id[2] as isize - shift)
                                            .max(0)
                                            as usize;
                                        if hi <= lo {
                                            continue;
                                        }
                                        let xoff =
                                            xrow + (lo as isize + shift) as usize;
                                        let mut acc = 0.0;
                                        for (gv, xv) in gy[gyrow + lo..gyrow + hi]
                                            .iter()
                                            .zip(&x[xoff..xoff + (hi - lo)])
                                        {
                                            acc += gv * xv;
                                        }
                                        gwc[grow + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                continue;
            }
            for ci in 0..g.cin {
                let xb = (n * g.cin + ci) * ispatial;
                for oz in 0..g.od[0] {
                    let zi0 = (oz * g.stride) as isize - g.padding as isize;
                    for oy in 0..g.od[1] {
                        let yi0 = (oy * g.stride) as isize - g.padding as isize;
                        for ox in 0..g.od[2] {
                            let gv = gy[gyb + (oz * g.od[1] + oy) * g.od[2] + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            let xi0 = (ox * g.stride) as isize - g.padding as isize;
                            for kz in 0..g.k[0] {
                                let zi = zi0 + kz as isize;
                                if zi < 0 || zi >= g.id[0] as isize {
                                    continue;
                                }
                                for ky in 0..g.k[1] {
                                    let yi = yi0 + ky as isize;
                                    if yi < 0 || yi >= g.id[1] as isize {
                                        continue;
                                    }
                                    let xrow = xb
                                        + (zi as usize * g.id[1] + yi as usize) * g.id[2];
                                    let grow = ci * ksize + (kz * g.k[1] + ky) * g.k[2];
                                    for kx in 0..g.k[2] {
                                        let xi = xi0 + kx as isize;
                                        if xi < 0 || xi >= g.id[2] as isize {
                                            continue;
                                        }
                                        gwc[grow + kx] += gv * x[xrow + xi as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gw
}

/// 3D convolution. Input (N,Cin,D,H,W), weight (Cout,Cin,kd,kh,kw), bias (Cout).
pub fn conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    check_5d(input, "conv3d input")?;
    check_5d(weight, "conv3d weight")?;
    if stride < 1 {
        return Err(Error::Parameter("conv3d stride must be >= 1".into()));
    }
    let is = input.shape().to_vec();
    let ws = weight.shape().to_vec();
    if is[1] != ws[1] {
        return Err(Error::Dimension(format!(
            "conv3d: input has {} channels but weight expects {}",
            is[1], ws[1]
        )));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::Dimension(format!(
            "conv3d: bias shape {:?} must be [{}]",
            bias.shape(),
            ws[0]
        )));
    }
    let od = [
        conv_out_dim(is[2], ws[2], stride, padding)?,
        conv_out_dim(is[3], ws[3], stride, padding)?,
        conv_out_dim(is[4], ws[4], stride, padding)?,
    ];
    let g = Geom {
        n: is[0],
        cin: is[1],
        cout: ws[0],
        id: [is[2], is[3], is[4]],
        od,
        k: [ws[2], ws[3], ws[4]],
        stride,
        padding,
    };
    let values = conv_gather(&input.values(), &weight.values(), Some(&bias.values()), g);
    let (ic, wc) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(
        vec![g.n, g.cout, od[0], od[1], od[2]],
        values,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |gy| {
            let xv = ic.values();
            let wv = wc.values();
            let gx = conv_scatter(
                gy, &wv, g.od, g.id, g.n, g.cout, g.cin, g.k, g.stride, g.padding,
            );
            let gw = conv_weight_grad(&xv, gy, g);
            let ospatial = g.od[0] * g.od[1] * g.od[2];
            let mut gb = vec![0.0; g.cout];
            for n in 0..g.n {
                for (co, gbv) in gb.iter_mut().enumerate() {
                    let base = (n * g.cout + co) * ospatial;
                    *gbv += gy[base..base + ospatial].iter().sum::<f64>();
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        }),
    ))
}

/// 3D transpose convolution. Input (N,Cin,D,H,W), weight (Cin,Cout,kd,kh,kw),
/// bias (Cout). Output spatial dim = (in - 1)*stride - 2*padding + k.
pub fn conv_transpose3d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    check_5d(input, "conv_transpose3d input")?;
    check_5d(weight, "conv_transpose3d weight")?;
    if stride < 1 {
        return Err(Error::Parameter("conv_transpose3d stride must be >= 1".into()));
    }
    let is = input.shape().to_vec();
    let ws = weight.shape().to_vec();
    if is[1] != ws[0] {
        return Err(Error::Dimension(format!(
            "conv_transpose3d: input has {} channels but weight expects {}",
            is[1], ws[0]
        )));
    }
    let cout = ws[1];
    if bias.shape() != [cout] {
        return Err(Error::Dimension(format!(
            "conv_transpose3d: bias shape {:?} must be [{cout}]",
            bias.shape()
        )));
    }
    let mut od = [0usize; 3];
    for (i, o) in od.iter_mut().enumerate() {
        let k = ws[2 + i];
        let span = (is[2 + i] - 1) * stride + k;
        if span < 2 * padding + 1 {
            return Err(Error::Geometry(format!(
                "conv_transpose3d: padding {padding} too large for output span {span}"
            )));
        }
        *o = span - 2 * padding;
    }
    let id = [is[2], is[3], is[4]];
    let k = [ws[2], ws[3], ws[4]];
    let (n, cin) = (is[0], is[1]);
    let mut values = conv_scatter(
        &input.values(),
        &weight.values(),
        id,
        od,
        n,
        cin,
        cout,
        k,
        stride,
        padding,
    );
    {
        let bv = bias.values();
        let ospatial = od[0] * od[1] * od[2];
        for ni in 0..n {
            for co in 0..cout {
                let base = (ni * cout + co) * ospatial;
                for v in &mut values[base..base + ospatial] {
                    *v += bv[co];
                }
            }
        }
    }
    let (ic, wc) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(
        vec![n, cout, od[0], od[1], od[2]],
        values,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |gy| {
            let xv_ref = ic.values();
            let xv: &[f64] = &xv_ref;
            let wv_ref = wc.values();
            let wv: &[f64] = &wv_ref;
            // Input gradient gathers gy back through the kernel.
            let g = Geom {
                n,
                cin: cout,
                cout: cin,
                id: od,
                od: id,
                k,
                stride,
                padding,
            };
            // conv_gather expects weight layout (Cout_of_gather, Cin_of_gather, k)
            // = (cin, cout, k), which is exactly the transpose-conv layout.
            let gx = conv_gather(gy, wv, None, g);
            // Weight gradient: gw[a,b,k] = sum x[n,a,pos] * gy[n,b, pos*s - p + k].
            let ksize = k[0] * k[1] * k[2];
            let ispatial = id[0] * id[1] * id[2];
            let ospatial = od[0] * od[1] * od[2];
            let mut gw = vec![0.0; cin * cout * ksize];
            gw.par_chunks_mut(cout * ksize).enumerate().for_each(|(a, gwa)| {
                for ni in 0..n {
                    let xb = (ni * cin + a) * ispatial;
                    for b in 0..cout {
                        let gyb = (ni * cout + b) * ospatial;
                        for sz in 0..id[0] {
                            let oz0 = (sz * stride) as isize - padding as isize;
                            for sy in 0..id[1] {
                                let oy0 = (sy * stride) as isize - padding as isize;
                                for sx in 0..id[2] {
                                    let xval = xv[xb + (sz * id[1] + sy) * id[2] + sx];
                                    if xval == 0.0 {
                                        continue;
                                    }
                                    let ox0 = (sx * stride) as isize - padding as isize;
                                    for kz in 0..k[0] {
                                        let oz = oz0 + kz as isize;
                                        if oz < 0 || oz >= od[0] as isize {
                                            continue;
                                        }
                                        for ky in 0..k[1] {
                                            let oy = oy0 + ky as isize;
                                            if oy < 0 || oy >= od[1] as isize {
                                                continue;
                                            }
                                            let gyrow = gyb
                                                + (oz as usize * od[1] + oy as usize)
                                                    * od[2];
                                            let gwrow =
                                                b * ksize + (kz * k[1] + ky) * k[2];
                                            for kx in 0..k[2] {
                                                let ox = ox0 + kx as isize;
                                                if ox < 0 || ox >= od[2] as isize {
                                                    continue;
                                                }
                                                gwa[gwrow + kx] +=
                                                    xval * gy[gyrow + ox as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
            let mut gb = vec![0.0; cout];
            for ni in 0..n {
                for (co, gbv) in gb.iter_mut().enumerate() {
                    let base = (ni * cout + co) * ospatial;
                    *gbv += gy[base..base + ospatial].iter().sum::<f64>();
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        }),
    ))
}

/// 3D max pooling. Gradient routes to the first-encountered argmax per window.
pub fn maxpool3d(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    check_5d(input, "maxpool3d input")?;
    let is = input.shape().to_vec();
    let (n, c) = (is[0], is[1]);
    let id = [is[2], is[3], is[4]];
    let mut od = [0usize; 3];
    for (i, o) in od.iter_mut().enumerate() {
        if id[i] < kernel || !(id[i] - kernel).is_multiple_of(stride) {
            return Err(Error::Geometry(format!(
                "maxpool3d: dim {} not coverable by kernel {kernel} stride {stride}",
                id[i]
            )));
        }
        *o = (id[i] - kernel) / stride + 1;
    }
    let ispatial = id[0] * id[1] * id[2];
    let ospatial = od[0] * od[1] * od[2];
    let xv = input.values();
    let mut values = vec![0.0; n * c * ospatial];
    let mut argmax = vec![0usize; n * c * ospatial];
    for nc in 0..n * c {
        let xb = nc * ispatial;
        for oz in 0..od[0] {
            for oy in 0..od[1] {
                for ox in 0..od[2] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kz in 0..kernel {
                        let zi = oz * stride + kz;
                        for ky in 0..kernel {
                            let yi = oy * stride + ky;
                            for kx in 0..kernel {
                                let xi = ox * stride + kx;
                                let idx = (zi * id[1] + yi) * id[2] + xi;
                                let v = xv[xb + idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let oidx = nc * ospatial + (oz * od[1] + oy) * od[2] + ox;
                    values[oidx] = best;
                    argmax[oidx] = best_idx;
                }
            }
        }
    }
    drop(xv);
    let total_in = n * c * ispatial;
    Ok(Tensor::from_op(
        vec![n, c, od[0], od[1], od[2]],
        values,
        vec![input.clone()],
        Box::new(move |gy| {
            let mut gx = vec![0.0; total_in];
            for (oidx, &iidx) in argmax.iter().enumerate() {
                let nc = oidx / ospatial;
                gx[nc * ispatial + iidx] += gy[oidx];
            }
            vec![Some(gx)]
        }),
    ))
}
