use super::{extract_head, insert_head, AttentionParams, TokenGrid};
use crate::error::Result;
use crate::numerics::{
    matmul, softmax_lastdim, softmax_lastdim_backward, transpose2d, Element, Tensor,
};
use crate::tally::{self, Bucket};

pub struct MhsaCache<E: Element> {
    pub(crate) x_flat: Tensor<E>,
    pub(crate) q: Tensor<E>,
    pub(crate) k: Tensor<E>,
    pub(crate) v: Tensor<E>,
    /// Post-softmax attention per head, `[N, N]` each.
    pub(crate) attn: Vec<Tensor<E>>,
    pub(crate) concat: Tensor<E>,
    pub(crate) t: usize,
    pub(crate) np: usize,
}

impl<E: Element> MhsaCache<E> {
    pub fn attention_maps(&self) -> Vec<&Tensor<E>> {
        self.attn.iter().collect()
    }
}

/// Full self-attention over all `N = T·Np²` tokens.
pub fn mhsa<E: Element>(x: &TokenGrid<E>, params: &AttentionParams<E>) -> Result<TokenGrid<E>> {
    Ok(forward(x, params)?.0)
}

pub(crate) fn forward<E: Element>(
    x: &TokenGrid<E>,
    params: &AttentionParams<E>,
) -> Result<(TokenGrid<E>, MhsaCache<E>)> {
    let n = x.num_tokens();
    let d = x.dim();
    let hd = params.head_dim();
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
        let scores = {
            let _g = tally::scope(Bucket::ScoreSpatial);
            matmul(&qh, &transpose2d(&kh)?)?.scale(scale)
        };
        let a = softmax_lastdim(&scores)?;
        let oh = {
            let _g = tally::scope(Bucket::ValueAgg);
            matmul(&a, &vh)?
        };
        insert_head(&mut concat, &oh, h);
        attn.push(a);
    }

    let out = {
        let _g = tally::scope(Bucket::Projections);
        params.wo.forward(&concat)?
    };
    Ok((
        TokenGrid::from_flat(x.t(), x.np(), d, out)?,
        MhsaCache {
            x_flat,
            q,
            k,
            v,
            attn,
            concat,
            t: x.t(),
            np: x.np(),
        },
    ))
}

pub(crate) fn backward<E: Element>(
    params: &mut AttentionParams<E>,
    cache: &MhsaCache<E>,
    dout: &TokenGrid<E>,
) -> Result<TokenGrid<E>> {
    let n = cache.x_flat.shape()[0];
    let d = cache.x_flat.shape()[1];
    let hd = params.head_dim();
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

        let da = matmul(&doh, &transpose2d(&vh)?)?;
        let dvh = matmul(&transpose2d(a)?, &doh)?;
        let dscores = softmax_lastdim_backward(a, &da)?.scale(scale);
        let dqh = matmul(&dscores, &kh)?;
        let dkh = matmul(&transpose2d(&dscores)?, &qh)?;

        insert_head(&mut dq, &dqh, h);
        insert_head(&mut dk, &dkh, h);
        insert_head(&mut dv, &dvh, h);
    }

    let mut dx = params.wq.backward(&cache.x_flat, &dq)?;
    dx.accumulate(&params.wk.backward(&cache.x_flat, &dk)?)?;
    dx.accumulate(&params.wv.backward(&cache.x_flat, &dv)?)?;
    TokenGrid::from_flat(cache.t, cache.np, d, dx)
}
