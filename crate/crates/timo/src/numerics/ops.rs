use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::tally::{self, Bucket};

/// GELU tanh-approximation constants, fixed so cross-implementation
/// diffs stay below 1e-3.
pub const GELU_TANH_COEFF: f64 = 0.7978845608028654; // sqrt(2/pi)
pub const GELU_CUBIC_COEFF: f64 = 0.044715;

/// Matrix product `a · b` with fixed k-ascending accumulation per output
/// element.
///
/// `a` is `[..batch.., M, K]`; `b` is either `[K, N]` (broadcast over the
/// batch) or `[..batch.., K, N]` with identical leading extents.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let ar = a.rank();
    let br = b.rank();
    if ar < 2 || br < 2 {
        return Err(Error::dim(format!(
            "matmul requires rank >= 2, got {ar} and {br}"
        )));
    }
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    if k != kb {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch: usize = a.shape()[..ar - 2].iter().product();
    let b_batched = br > 2;
    if b_batched && a.shape()[..ar - 2] != b.shape()[..br - 2] {
        return Err(Error::dim(format!(
            "matmul batch extents differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }

    let mut out_shape = a.shape()[..ar - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = Tensor::zeros(&out_shape);

    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for bi in 0..batch {
        let ab = &ad[bi * m * k..(bi + 1) * m * k];
        let bb = if b_batched {
            &bd[bi * k * n..(bi + 1) * k * n]
        } else {
            bd
        };
        let ob = &mut od[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let arow = &ab[i * k..(i + 1) * k];
            let orow = &mut ob[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &bb[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    tally::add(2 * (batch * m * k * n) as u128);
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// Transpose of a rank-2 tensor.
pub fn transpose2d<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rank() != 2 {
        return Err(Error::dim(format!(
            "transpose2d requires rank 2, got {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    let ad = a.data();
    let od = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            od[j * m + i] = ad[i * n + j];
        }
    }
    Ok(out)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_lastdim<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let r = x.rank();
    let l = x.shape()[r - 1];
    if l == 0 {
        return Err(Error::dim("softmax over empty last dim".to_string()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(l) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = E::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    {
        let _g = tally::scope(Bucket::Softmax);
        tally::add(5 * x.numel() as u128);
    }
    out.ensure_finite("softmax")?;
    Ok(out)
}

/// Backward of [`softmax_lastdim`]: `dx = y ⊙ (dy − Σ_row dy⊙y)`.
pub fn softmax_lastdim_backward<E: Element>(y: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
    if y.shape() != dy.shape() {
        return Err(Error::dim("softmax backward shape mismatch".to_string()));
    }
    let l = y.shape()[y.rank() - 1];
    let mut dx = y.zeros_like();
    for ((yrow, dyrow), dxrow) in y
        .data()
        .chunks(l)
        .zip(dy.data().chunks(l))
        .zip(dx.data_mut().chunks_mut(l))
    {
        let mut dot = E::zero();
        for (&yv, &dyv) in yrow.iter().zip(dyrow) {
            dot = dot + yv * dyv;
        }
        for ((&yv, &dyv), d) in yrow.iter().zip(dyrow).zip(dxrow.iter_mut()) {
            *d = yv * (dyv - dot);
        }
    }
    Ok(dx)
}

/// Elementwise median along axis 0; even-length series return the LOWER
/// of the two middle order statistics. Also returns the selected source
/// index per output element for gradient routing.
pub fn lower_median_axis0_with_indices<E: Element>(
    x: &Tensor<E>,
) -> Result<(Tensor<E>, Vec<u32>)> {
    if x.rank() < 1 || x.shape()[0] == 0 {
        return Err(Error::dim("median over empty axis".to_string()));
    }
    x.ensure_finite("median input")?;
    let t = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    let out_shape = if x.rank() == 1 {
        vec![1]
    } else {
        x.shape()[1..].to_vec()
    };
    let mut out = Tensor::zeros(&out_shape);
    let mut sel = vec![0u32; rest];
    let xd = x.data();
    let od = out.data_mut();
    let mut order: Vec<usize> = Vec::with_capacity(t);
    for j in 0..rest {
        order.clear();
        order.extend(0..t);
        // stable tie-break by source index keeps selection deterministic
        order.sort_by(|&p, &q| {
            xd[p * rest + j]
                .partial_cmp(&xd[q * rest + j])
                .expect("finite values")
                .then(p.cmp(&q))
        });
        let pick = order[(t - 1) / 2];
        od[j] = xd[pick * rest + j];
        sel[j] = pick as u32;
    }
    Ok((out, sel))
}

/// Elementwise lower median along axis 0.
pub fn lower_median_axis0<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    Ok(lower_median_axis0_with_indices(x)?.0)
}

/// Route the median's adjoint back to the selected source elements.
pub fn lower_median_axis0_backward<E: Element>(
    x_shape: &[usize],
    sel: &[u32],
    dout: &Tensor<E>,
) -> Result<Tensor<E>> {
    let rest: usize = x_shape[1..].iter().product();
    if sel.len() != rest || dout.numel() != rest {
        return Err(Error::dim("median backward shape mismatch".to_string()));
    }
    let mut dx = Tensor::zeros(x_shape);
    let dd = dx.data_mut();
    for (j, (&s, &g)) in sel.iter().zip(dout.data()).enumerate() {
        dd[s as usize * rest + j] = g;
    }
    Ok(dx)
}

/// 2-D cross-correlation of one image `[Cin, H, W]` with kernels
/// `[Cout, Cin, k, k]`, symmetric zero padding.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (cin, h, wd) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim(format!("conv2d input must be rank 3, got {s:?}"))),
    };
    let (cout, cin_w, k) = match w.shape() {
        [co, ci, kh, kw] if kh == kw => (*co, *ci, *kh),
        s => {
            return Err(Error::dim(format!(
                "conv2d weight must be [Cout,Cin,k,k], got {s:?}"
            )))
        }
    };
    if cin != cin_w {
        return Err(Error::dim(format!(
            "conv2d channel mismatch: input {cin}, weight {cin_w}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim("conv2d bias must be [Cout]".to_string()));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d stride must be positive".to_string()));
    }
    if k > h + 2 * pad || k > wd + 2 * pad {
        return Err(Error::dim(format!(
            "kernel {k} larger than padded input {}x{}",
            h + 2 * pad,
            wd + 2 * pad
        )));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;

    let mut out = Tensor::zeros(&[cout, ho, wo]);
    let xd = x.data();
    let wdt = w.data();
    let od = out.data_mut();
    for co in 0..cout {
        let b = bias.data()[co];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b;
                for ci in 0..cin {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc = acc
                                + xd[(ci * h + iy as usize) * wd + ix as usize]
                                    * wdt[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
                od[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    {
        let _g = tally::scope(Bucket::Conv);
        tally::add((2 * cout * ho * wo * cin * k * k + cout * ho * wo) as u128);
    }
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Backward of [`conv2d`]; returns `(dx, dw, db)`.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    stride: usize,
    pad: usize,
    dout: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (dout.shape()[1], dout.shape()[2]);
    if dout.shape()[0] != cout {
        return Err(Error::dim("conv2d backward channel mismatch".to_string()));
    }
    let mut dx = x.zeros_like();
    let mut dw = w.zeros_like();
    let mut db = Tensor::zeros(&[cout]);
    let xd = x.data();
    let wdt = w.data();
    let dod = dout.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dod[(co * ho + oy) * wo + ox];
                dbd[co] = dbd[co] + g;
                for ci in 0..cin {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = (ci * h + iy as usize) * wd + ix as usize;
                            let wi = ((co * cin + ci) * k + ky) * k + kx;
                            dxd[xi] = dxd[xi] + g * wdt[wi];
                            dwd[wi] = dwd[wi] + g * xd[xi];
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Per-token normalization over the last axis followed by an affine map.
pub fn layer_norm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    Ok(layer_norm_with_cache(x, gamma, beta, eps)?.0)
}

/// Cache for [`layer_norm_backward`]: normalized values and inverse std
/// per token.
pub struct LayerNormCache<E: Element> {
    pub xhat: Tensor<E>,
    pub invstd: Vec<E>,
}

pub fn layer_norm_with_cache<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, LayerNormCache<E>)> {
    let r = x.rank();
    let d = x.shape()[r - 1];
    if d == 0 {
        return Err(Error::dim("layer_norm over empty channel axis".to_string()));
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim(format!(
            "layer_norm affine params must be [{d}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let tokens = x.numel() / d;
    let eps = E::from_f64(eps);
    let inv_d = E::from_f64(1.0 / d as f64);
    let mut out = x.zeros_like();
    let mut xhat = x.zeros_like();
    let mut invstd = Vec::with_capacity(tokens);
    let gd = gamma.data();
    let bd = beta.data();
    for ((xrow, orow), hrow) in x
        .data()
        .chunks(d)
        .zip(out.data_mut().chunks_mut(d))
        .zip(xhat.data_mut().chunks_mut(d))
    {
        let mut mean = E::zero();
        for &v in xrow {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = E::zero();
        for &v in xrow {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let istd = (var + eps).sqrt().recip();
        invstd.push(istd);
        for (j, &v) in xrow.iter().enumerate() {
            let xh = (v - mean) * istd;
            hrow[j] = xh;
            orow[j] = xh * gd[j] + bd[j];
        }
    }
    {
        let _g = tally::scope(Bucket::Norm);
        tally::add(7 * x.numel() as u128);
    }
    out.ensure_finite("layer_norm")?;
    Ok((out, LayerNormCache { xhat, invstd }))
}

/// Backward of [`layer_norm`]; returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<E: Element>(
    cache: &LayerNormCache<E>,
    gamma: &Tensor<E>,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let d = gamma.numel();
    let mut dx = dy.zeros_like();
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let inv_d = E::from_f64(1.0 / d as f64);
    let gd = gamma.data();
    for (ti, ((hrow, dyrow), dxrow)) in cache
        .xhat
        .data()
        .chunks(d)
        .zip(dy.data().chunks(d))
        .zip(dx.data_mut().chunks_mut(d))
        .enumerate()
    {
        let istd = cache.invstd[ti];
        let mut sum_dxhat = E::zero();
        let mut sum_dxhat_xhat = E::zero();
        for (j, (&xh, &g)) in hrow.iter().zip(dyrow).enumerate() {
            dgamma.data_mut()[j] = dgamma.data_mut()[j] + g * xh;
            dbeta.data_mut()[j] = dbeta.data_mut()[j] + g;
            let dxh = g * gd[j];
            sum_dxhat = sum_dxhat + dxh;
            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh;
        }
        let mean_dxhat = sum_dxhat * inv_d;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
        for (j, (&xh, &g)) in hrow.iter().zip(dyrow).enumerate() {
            let dxh = g * gd[j];
            dxrow[j] = istd * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// GELU with the tanh approximation.
pub fn gelu<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let c = E::from_f64(GELU_TANH_COEFF);
    let a = E::from_f64(GELU_CUBIC_COEFF);
    let half = E::from_f64(0.5);
    let out = x.map(|v| half * v * (E::one() + (c * (v + a * v * v * v)).tanh()));
    tally::add(10 * x.numel() as u128);
    out.ensure_finite("gelu")?;
    Ok(out)
}

/// Backward of [`gelu`] (needs the forward input).
pub fn gelu_backward<E: Element>(x: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != dy.shape() {
        return Err(Error::dim("gelu backward shape mismatch".to_string()));
    }
    let c = E::from_f64(GELU_TANH_COEFF);
    let a = E::from_f64(GELU_CUBIC_COEFF);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let mut dx = x.zeros_like();
    for ((&v, &g), d) in x.data().iter().zip(dy.data()).zip(dx.data_mut()) {
        let t = (c * (v + a * v * v * v)).tanh();
        let du = c * (E::one() + three * a * v * v);
        let deriv = half * (E::one() + t) + half * v * (E::one() - t * t) * du;
        *d = g * deriv;
    }
    Ok(dx)
}

pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    tally::add(x.numel() as u128);
    x.map(|v| if v > E::zero() { v } else { E::zero() })
}

pub fn relu_backward<E: Element>(x: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != dy.shape() {
        return Err(Error::dim("relu backward shape mismatch".to_string()));
    }
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= E::zero() {
            *d = E::zero();
        }
    }
    Ok(dx)
}
