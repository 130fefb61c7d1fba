use super::{extract_head, insert_head, AttentionParams, DiffHead, GyroscopeIndexSet, TokenGrid};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::numerics::{
    lower_median_axis0_backward, lower_median_axis0_with_indices, matmul, relu, relu_backward,
    softmax_lastdim, softmax_lastdim_backward, transpose2d, Element, Tensor,
};
use crate::nn::BatchNormCache;
use crate::tally::{self, Bucket};

pub(crate) struct DstgaHeadCache<E: Element> {
    qh3: Tensor<E>,
    kh3: Tensor<E>,
    vh: Tensor<E>,
    sel_q: Vec<u32>,
    sel_k: Vec<u32>,
    mq: Tensor<E>,
    mk: Tensor<E>,
    /// Flattened difference sequence `[T·Np², D']`, input to the
    /// channel-reducing projection.
    dt: Tensor<E>,
    /// Batch-norm output (= ReLU input), `[T·Np²]`.
    bn_y: Tensor<E>,
    bn_cache: BatchNormCache<E>,
    attn: Tensor<E>,
}

pub struct DstgaCache<E: Element> {
    pub(crate) x_flat: Tensor<E>,
    concat: Tensor<E>,
    heads: Vec<DstgaHeadCache<E>>,
    idx: GyroscopeIndexSet,
}

impl<E: Element> DstgaCache<E> {
    /// Post-softmax attention per head, `[N, T+Np²−1]` each.
    pub fn attention_maps(&self) -> Vec<&Tensor<E>> {
        self.heads.iter().map(|h| &h.attn).collect()
    }
}

/// Temporal-invariant spatial similarity for one head: the median
/// similarity `I = M_Q·M_Kᵀ/√D'` plus the per-timestamp broadcast
/// discrepancy column, returned as `S ∈ [T, Np², Np²]`.
pub fn dstga_spatial_similarity<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    head: &DiffHead<E>,
    mode: Mode,
) -> Result<Tensor<E>> {
    let (t, np, hd) = match q.shape() {
        [t, np1, np2, hd] if np1 == np2 => (*t, *np1, *hd),
        s => {
            return Err(Error::dim(format!(
                "spatial similarity expects [T,Np,Np,D'], got {s:?}"
            )))
        }
    };
    if q.shape() != k.shape() {
        return Err(Error::dim("Q and K shapes differ".to_string()));
    }
    let p = np * np;
    let q3 = q.clone().reshape(&[t, p, hd])?;
    let k3 = k.clone().reshape(&[t, p, hd])?;
    let scale = E::from_f64(1.0 / (hd as f64).sqrt());
    let parts = spatial_parts(&q3, &k3, head, mode, scale)?;
    let mut s = Tensor::zeros(&[t, p, p]);
    let sd = s.data_mut();
    let id = parts.i_mat.data();
    let dv = parts.d_vec.data();
    for ti in 0..t {
        for r in 0..p {
            let shift = dv[ti * p + r];
            let srow = &mut sd[(ti * p + r) * p..(ti * p + r + 1) * p];
            for (o, &iv) in srow.iter_mut().zip(&id[r * p..(r + 1) * p]) {
                *o = iv + shift;
            }
        }
    }
    s.ensure_finite("spatial similarity")?;
    Ok(s)
}

struct SpatialParts<E: Element> {
    mq: Tensor<E>,
    mk: Tensor<E>,
    sel_q: Vec<u32>,
    sel_k: Vec<u32>,
    i_mat: Tensor<E>,
    dt: Tensor<E>,
    bn_y: Tensor<E>,
    bn_cache: BatchNormCache<E>,
    /// ReLU output, `[T·Np²]`.
    d_vec: Tensor<E>,
}

fn spatial_parts<E: Element>(
    q3: &Tensor<E>,
    k3: &Tensor<E>,
    head: &DiffHead<E>,
    mode: Mode,
    scale: E,
) -> Result<SpatialParts<E>> {
    let (t, p, hd) = (q3.shape()[0], q3.shape()[1], q3.shape()[2]);
    let (mq, sel_q) = lower_median_axis0_with_indices(q3)?;
    let (mk, sel_k) = lower_median_axis0_with_indices(k3)?;

    let i_mat = {
        let _g = tally::scope(Bucket::ScoreSpatial);
        matmul(&mq, &transpose2d(&mk)?)?.scale(scale)
    };

    let _g = tally::scope(Bucket::Projections);
    let m = t * p;
    let mut dt = Tensor::zeros(&[m, hd]);
    {
        let qd = q3.data();
        let md = mq.data();
        let dd = dt.data_mut();
        for ti in 0..t {
            for r in 0..p {
                for c in 0..hd {
                    dd[(ti * p + r) * hd + c] = qd[(ti * p + r) * hd + c] - md[r * hd + c];
                }
            }
        }
        tally::add((m * hd) as u128);
    }
    let z = head.proj.forward(&dt)?.reshape(&[m])?;
    let (bn_y, bn_cache) = head.bn.forward(&z, mode)?;
    let d_vec = relu(&bn_y);
    Ok(SpatialParts {
        mq,
        mk,
        sel_q,
        sel_k,
        i_mat,
        dt,
        bn_y,
        bn_cache,
        d_vec,
    })
}

/// Differential gyroscope attention.
pub fn dstga<E: Element>(
    x: &TokenGrid<E>,
    params: &AttentionParams<E>,
    mode: Mode,
) -> Result<TokenGrid<E>> {
    Ok(forward(x, params, mode)?.0)
}

pub(crate) fn forward<E: Element>(
    x: &TokenGrid<E>,
    params: &AttentionParams<E>,
    mode: Mode,
) -> Result<(TokenGrid<E>, DstgaCache<E>)> {
    let diff = params
        .diff
        .as_ref()
        .ok_or_else(|| Error::config("differential attention without projections".to_string()))?;
    let t = x.t();
    let np = x.np();
    let p = np * np;
    let n = x.num_tokens();
    let d = x.dim();
    let hd = params.head_dim();
    let scale = params.score_scale();
    let idx = GyroscopeIndexSet::build(t, np)?;
    let u = idx.set_size();
    let x_flat = x.to_flat();

    let (q, k, v) = {
        let _g = tally::scope(Bucket::Projections);
        (
            params.wq.forward(&x_flat)?,
            params.wk.forward(&x_flat)?,
            params.wv.forward(&x_flat)?,
        )
    };

    let mut concat = Tensor::zeros(&[n, d]);
    let mut head_caches = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh3 = extract_head(&q, h, hd).reshape(&[t, p, hd])?;
        let kh3 = extract_head(&k, h, hd).reshape(&[t, p, hd])?;
        let vh = extract_head(&v, h, hd);

        let parts = spatial_parts(&qh3, &kh3, &diff[h], mode, scale)?;

        let mut scores = Tensor::zeros(&[n, u]);
        {
            let sd = scores.data_mut();
            let id = parts.i_mat.data();
            let dv = parts.d_vec.data();
            let qd = qh3.data();
            let kd = kh3.data();
            for ti in 0..t {
                for r in 0..p {
                    let pos = ti * p + r;
                    let srow = &mut sd[pos * u..(pos + 1) * u];
                    let shift = dv[pos];
                    for (o, &iv) in srow[..p].iter_mut().zip(&id[r * p..(r + 1) * p]) {
                        *o = iv + shift;
                    }
                    let qrow = &qd[pos * hd..(pos + 1) * hd];
                    let mut col = p;
                    for to in 0..t {
                        if to == ti {
                            continue;
                        }
                        let krow = &kd[(to * p + r) * hd..(to * p + r + 1) * hd];
                        let mut acc = E::zero();
                        for (&a, &b) in qrow.iter().zip(krow) {
                            acc = acc + a * b;
                        }
                        srow[col] = acc * scale;
                        col += 1;
                    }
                }
            }
        }
        {
            let _g = tally::scope(Bucket::Projections);
            tally::add((t * p * p) as u128); // broadcast addition building S
        }
        {
            let _g = tally::scope(Bucket::ScoreTemporal);
            tally::add(2 * (n * (t - 1) * hd) as u128);
        }
        scores.ensure_finite("dstga scores")?;

        let a = softmax_lastdim(&scores)?;

        let mut oh = Tensor::zeros(&[n, hd]);
        {
            let ad = a.data();
            let vd = vh.data();
            let od = oh.data_mut();
            for pos in 0..n {
                let arow = &ad[pos * u..(pos + 1) * u];
                let orow = &mut od[pos * hd..(pos + 1) * hd];
                for (&w, &ki) in arow.iter().zip(idx.row(pos)) {
                    let vrow = &vd[ki as usize * hd..(ki as usize + 1) * hd];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o = *o + w * vv;
                    }
                }
            }
        }
        {
            let _g = tally::scope(Bucket::ValueAgg);
            tally::add(2 * (n * u * hd) as u128);
        }

        insert_head(&mut concat, &oh, h);
        head_caches.push(DstgaHeadCache {
            qh3,
            kh3,
            vh,
            sel_q: parts.sel_q,
            sel_k: parts.sel_k,
            mq: parts.mq,
            mk: parts.mk,
            dt: parts.dt,
            bn_y: parts.bn_y,
            bn_cache: parts.bn_cache,
            attn: a,
        });
    }

    let out = {
        let _g = tally::scope(Bucket::Projections);
        params.wo.forward(&concat)?
    };
    Ok((
        TokenGrid::from_flat(t, np, d, out)?,
        DstgaCache {
            x_flat,
            concat,
            heads: head_caches,
            idx,
        },
    ))
}

pub(crate) fn backward<E: Element>(
    params: &mut AttentionParams<E>,
    cache: &DstgaCache<E>,
    dout: &TokenGrid<E>,
) -> Result<TokenGrid<E>> {
    let t = cache.idx.t();
    let np = cache.idx.np();
    let p = np * np;
    let n = cache.x_flat.shape()[0];
    let d = cache.x_flat.shape()[1];
    let hd = params.head_dim();
    let u = cache.idx.set_size();
    let scale = params.score_scale();
    let dout_flat = dout.to_flat();

    let dconcat = params.wo.backward(&cache.concat, &dout_flat)?;

    let diff = params
        .diff
        .as_mut()
        .ok_or_else(|| Error::config("differential attention without projections".to_string()))?;

    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    for h in 0..params.heads {
        let hc = &cache.heads[h];
        let doh = extract_head(&dconcat, h, hd);
        let a = &hc.attn;

        // dA and scatter into dV
        let mut da = Tensor::zeros(&[n, u]);
        let mut dvh = Tensor::zeros(&[n, hd]);
        {
            let ad = a.data();
            let vd = hc.vh.data();
            let dohd = doh.data();
            let dad = da.data_mut();
            let dvd = dvh.data_mut();
            for pos in 0..n {
                let dorow = &dohd[pos * hd..(pos + 1) * hd];
                let arow = &ad[pos * u..(pos + 1) * u];
                let darow = &mut dad[pos * u..(pos + 1) * u];
                for ((dav, &w), &ki) in darow.iter_mut().zip(arow).zip(cache.idx.row(pos)) {
                    let ki = ki as usize;
                    let vrow = &vd[ki * hd..(ki + 1) * hd];
                    let mut acc = E::zero();
                    for (&g, &vv) in dorow.iter().zip(vrow) {
                        acc = acc + g * vv;
                    }
                    *dav = acc;
                    let dvrow = &mut dvd[ki * hd..(ki + 1) * hd];
                    for (dvv, &g) in dvrow.iter_mut().zip(dorow) {
                        *dvv = *dvv + w * g;
                    }
                }
            }
        }

        let ds = softmax_lastdim_backward(a, &da)?;

        // split the score adjoint into spatial (I + broadcast shift) and
        // temporal parts
        let mut di = Tensor::zeros(&[p, p]);
        let mut dd_vec = Tensor::zeros(&[t * p]);
        let mut dq3 = Tensor::zeros(&[t, p, hd]);
        let mut dk3 = Tensor::zeros(&[t, p, hd]);
        {
            let dsd = ds.data();
            let did = di.data_mut();
            let ddd = dd_vec.data_mut();
            let qd = hc.qh3.data();
            let kd = hc.kh3.data();
            let dqd = dq3.data_mut();
            let dkd = dk3.data_mut();
            for ti in 0..t {
                for r in 0..p {
                    let pos = ti * p + r;
                    let dsrow = &dsd[pos * u..(pos + 1) * u];
                    let mut row_sum = E::zero();
                    for (j, &g) in dsrow[..p].iter().enumerate() {
                        did[r * p + j] = did[r * p + j] + g;
                        row_sum = row_sum + g;
                    }
                    ddd[pos] = ddd[pos] + row_sum;
                    let qrow_start = pos * hd;
                    let mut col = p;
                    for to in 0..t {
                        if to == ti {
                            continue;
                        }
                        let g = dsrow[col] * scale;
                        col += 1;
                        let krow_start = (to * p + r) * hd;
                        for c in 0..hd {
                            dqd[qrow_start + c] = dqd[qrow_start + c] + g * kd[krow_start + c];
                            dkd[krow_start + c] = dkd[krow_start + c] + g * qd[qrow_start + c];
                        }
                    }
                }
            }
        }

        // discrepancy path: ReLU -> BN -> projection -> difference
        let drelu = relu_backward(&hc.bn_y, &dd_vec)?;
        let dz = diff[h].bn.backward(&hc.bn_cache, &drelu)?;
        let dz_mat = dz.reshape(&[t * p, 1])?;
        let ddt = diff[h].proj.backward(&hc.dt, &dz_mat)?;

        // D_t = Q_t − M_Q
        let mut dmq = Tensor::zeros(&[p, hd]);
        {
            let ddtd = ddt.data();
            let dqd = dq3.data_mut();
            let dmqd = dmq.data_mut();
            for ti in 0..t {
                for r in 0..p {
                    for c in 0..hd {
                        let g = ddtd[(ti * p + r) * hd + c];
                        dqd[(ti * p + r) * hd + c] = dqd[(ti * p + r) * hd + c] + g;
                        dmqd[r * hd + c] = dmqd[r * hd + c] - g;
                    }
                }
            }
        }

        // I = M_Q·M_Kᵀ·scale
        let di_scaled = di.scale(scale);
        dmq.accumulate(&matmul(&di_scaled, &hc.mk)?)?;
        let dmk = matmul(&transpose2d(&di_scaled)?, &hc.mq)?;

        dq3.accumulate(&lower_median_axis0_backward(
            &[t, p, hd],
            &hc.sel_q,
            &dmq,
        )?)?;
        dk3.accumulate(&lower_median_axis0_backward(
            &[t, p, hd],
            &hc.sel_k,
            &dmk,
        )?)?;

        let dqh = dq3.reshape(&[n, hd])?;
        let dkh = dk3.reshape(&[n, hd])?;
        insert_head(&mut dq, &dqh, h);
        insert_head(&mut dk, &dkh, h);
        insert_head(&mut dv, &dvh, h);
    }

    let mut dx = params.wq.backward(&cache.x_flat, &dq)?;
    dx.accumulate(&params.wk.backward(&cache.x_flat, &dk)?)?;
    dx.accumulate(&params.wv.backward(&cache.x_flat, &dv)?)?;
    TokenGrid::from_flat(t, np, d, dx)
}
