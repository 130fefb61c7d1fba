use super::{extract_head, insert_head, AttentionParams, GyroscopeIndexSet, TokenGrid};
use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_lastdim, softmax_lastdim_backward, transpose2d, Element, Tensor};
use crate::tally::{self, Bucket};

pub struct StgaCache<E: Element> {
    pub(crate) x_flat: Tensor<E>,
    pub(crate) q: Tensor<E>,
    pub(crate) k: Tensor<E>,
    pub(crate) v: Tensor<E>,
    /// Post-softmax attention per head, `[N, U]` each.
    pub(crate) attn: Vec<Tensor<E>>,
    pub(crate) concat: Tensor<E>,
    pub(crate) idx: GyroscopeIndexSet,
}

impl<E: Element> StgaCache<E> {
    pub fn attention_maps(&self) -> Vec<&Tensor<E>> {
        self.attn.iter().collect()
    }
}

/// Gyroscope attention: every query attends to the `T + Np² − 1` keys
/// sharing its temporal plane or spatial line.
pub fn stga<E: Element>(
    x: &TokenGrid<E>,
    params: &AttentionParams<E>,
    idx: &GyroscopeIndexSet,
) -> Result<TokenGrid<E>> {
    Ok(forward(x, params, idx)?.0)
}

pub(crate) fn forward<E: Element>(
    x: &TokenGrid<E>,
    params: &AttentionParams<E>,
    idx: &GyroscopeIndexSet,
) -> Result<(TokenGrid<E>, StgaCache<E>)> {
    if idx.t() != x.t() || idx.np() != x.np() {
        return Err(Error::dim(format!(
            "gyroscope set built for T={}, Np={} but grid is T={}, Np={}",
            idx.t(),
            idx.np(),
            x.t(),
            x.np()
        )));
    }
    let n = x.num_tokens();
    let d = x.dim();
    let hd = params.head_dim();
    let u = idx.set_size();
    let plane = x.np() * x.np();
    let scale = params.score_scale();
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
    let mut attn = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = extract_head(&q, h, hd);
        let kh = extract_head(&k, h, hd);
        let vh = extract_head(&v, h, hd);

        let mut scores = Tensor::zeros(&[n, u]);
        {
            let qd = qh.data();
            let kd = kh.data();
            let sd = scores.data_mut();
            for p in 0..n {
                let qrow = &qd[p * hd..(p + 1) * hd];
                let row = idx.row(p);
                let srow = &mut sd[p * u..(p + 1) * u];
                for (s, &ki) in srow.iter_mut().zip(row) {
                    let krow = &kd[ki as usize * hd..(ki as usize + 1) * hd];
                    let mut acc = E::zero();
                    for (&a, &b) in qrow.iter().zip(krow) {
                        acc = acc + a * b;
                    }
                    *s = acc * scale;
                }
            }
        }
        {
            let _g = tally::scope(Bucket::ScoreSpatial);
            tally::add(2 * (n * plane * hd) as u128);
        }
        {
            let _g = tally::scope(Bucket::ScoreTemporal);
            tally::add(2 * (n * (x.t() - 1) * hd) as u128);
        }
        scores.ensure_finite("stga scores")?;

        let a = softmax_lastdim(&scores)?;

        let mut oh = Tensor::zeros(&[n, hd]);
        {
            let ad = a.data();
            let vd = vh.data();
            let od = oh.data_mut();
            for p in 0..n {
                let arow = &ad[p * u..(p + 1) * u];
                let orow = &mut od[p * hd..(p + 1) * hd];
                for (&w, &ki) in arow.iter().zip(idx.row(p)) {
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
        attn.push(a);
    }

    let out = {
        let _g = tally::scope(Bucket::Projections);
        params.wo.forward(&concat)?
    };
    Ok((
        TokenGrid::from_flat(x.t(), x.np(), d, out)?,
        StgaCache {
            x_flat,
            q,
            k,
            v,
            attn,
            concat,
            idx: idx.clone(),
        },
    ))
}

pub(crate) fn backward<E: Element>(
    params: &mut AttentionParams<E>,
    cache: &StgaCache<E>,
    dout: &TokenGrid<E>,
) -> Result<TokenGrid<E>> {
    let n = cache.x_flat.shape()[0];
    let d = cache.x_flat.shape()[1];
    let hd = params.head_dim();
    let u = cache.idx.set_size();
    let scale = params.score_scale();
    let dout_flat = dout.to_flat();

    let dconcat = params.wo.backward(&cache.concat, &dout_flat)?;

    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    for h in 0..params.heads {
        let qh = extract_head(&cache.q, h, hd);
        let kh = extract_head(&cache.k, h, hd);
        let vh = extract_head(&cache.v, h, hd);
        let doh = extract_head(&dconcat, h, hd);
        let a = &cache.attn[h];

        // dA and scatter into dV
        let mut da = Tensor::zeros(&[n, u]);
        let mut dvh = Tensor::zeros(&[n, hd]);
        {
            let ad = a.data();
            let vd = vh.data();
            let dohd = doh.data();
            let dad = da.data_mut();
            let dvd = dvh.data_mut();
            for p in 0..n {
                let dorow = &dohd[p * hd..(p + 1) * hd];
                let arow = &ad[p * u..(p + 1) * u];
                let darow = &mut dad[p * u..(p + 1) * u];
                for ((dav, &w), &ki) in darow.iter_mut().zip(arow).zip(cache.idx.row(p)) {
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

        let dscores = softmax_lastdim_backward(a, &da)?.scale(scale);

        let mut dqh = Tensor::zeros(&[n, hd]);
        let mut dkh = Tensor::zeros(&[n, hd]);
        {
            let qd = qh.data();
            let kd = kh.data();
            let dsd = dscores.data();
            let dqd = dqh.data_mut();
            let dkd = dkh.data_mut();
            for p in 0..n {
                let qrow = &qd[p * hd..(p + 1) * hd];
                let dqrow_start = p * hd;
                let dsrow = &dsd[p * u..(p + 1) * u];
                for (&ds, &ki) in dsrow.iter().zip(cache.idx.row(p)) {
                    let ki = ki as usize;
                    let krow = &kd[ki * hd..(ki + 1) * hd];
                    for j in 0..hd {
                        dqd[dqrow_start + j] = dqd[dqrow_start + j] + ds * krow[j];
                        dkd[ki * hd + j] = dkd[ki * hd + j] + ds * qrow[j];
                    }
                }
            }
        }

        insert_head(&mut dq, &dqh, h);
        insert_head(&mut dk, &dkh, h);
        insert_head(&mut dv, &dvh, h);
    }

    let mut dx = params.wq.backward(&cache.x_flat, &dq)?;
    dx.accumulate(&params.wk.backward(&cache.x_flat, &dk)?)?;
    dx.accumulate(&params.wv.backward(&cache.x_flat, &dv)?)?;
    TokenGrid::from_flat(dout.t(), dout.np(), d, dx)
}

/// Brute-force reference: full `N×N` attention with scores outside the
/// gyroscope set forced to −∞ before the softmax. Mathematically
/// identical to [`stga`].
pub fn stga_oracle<E: Element>(
    x: &TokenGrid<E>,
    params: &AttentionParams<E>,
) -> Result<TokenGrid<E>> {
    let n = x.num_tokens();
    let d = x.dim();
    let hd = params.head_dim();
    let scale = params.score_scale();
    let idx = GyroscopeIndexSet::build(x.t(), x.np())?;
    let x_flat = x.to_flat();

    let q = params.wq.forward(&x_flat)?;
    let k = params.wk.forward(&x_flat)?;
    let v = params.wv.forward(&x_flat)?;

    let mut concat = Tensor::zeros(&[n, d]);
    for h in 0..params.heads {
        let qh = extract_head(&q, h, hd);
        let kh = extract_head(&k, h, hd);
        let vh = extract_head(&v, h, hd);
        let mut scores = matmul(&qh, &transpose2d(&kh)?)?.scale(scale);
        {
            let sd = scores.data_mut();
            for p in 0..n {
                for key in 0..n {
                    if !idx.is_member(p, key) {
                        sd[p * n + key] = E::neg_infinity();
                    }
                }
            }
        }
        let a = softmax_lastdim(&scores)?;
        let oh = matmul(&a, &vh)?;
        insert_head(&mut concat, &oh, h);
    }
    let out = params.wo.forward(&concat)?;
    TokenGrid::from_flat(x.t(), x.np(), d, out)
}

/// Post-softmax oracle attention matrices per head (for inspecting where
/// the mass lands), `[N, N]` each.
pub fn stga_oracle_attention<E: Element>(
    x: &TokenGrid<E>,
    params: &AttentionParams<E>,
) -> Result<Vec<Tensor<E>>> {
    let n = x.num_tokens();
    let hd = params.head_dim();
    let scale = params.score_scale();
    let idx = GyroscopeIndexSet::build(x.t(), x.np())?;
    let x_flat = x.to_flat();
    let q = params.wq.forward(&x_flat)?;
    let k = params.wk.forward(&x_flat)?;
    let mut maps = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = extract_head(&q, h, hd);
        let kh = extract_head(&k, h, hd);
        let mut scores = matmul(&qh, &transpose2d(&kh)?)?.scale(scale);
        let sd = scores.data_mut();
        for p in 0..n {
            for key in 0..n {
                if !idx.is_member(p, key) {
                    sd[p * n + key] = E::neg_infinity();
                }
            }
        }
        maps.push(softmax_lastdim(&scores)?);
    }
    Ok(maps)
}
