use crate::attention::TokenGrid;
use crate::encoder::{
    add_positional, patch_embed, patch_embed_backward, EncoderParams, PatchCache, FINAL_STRIDE,
    PATCH_STRIDE,
};
use crate::error::{Error, Result};
use crate::numerics::{DualTensor, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tokens per mask-unit side at stage 1 (32 px unit / 4 px token).
pub const UNIT_TOKENS: usize = FINAL_STRIDE / PATCH_STRIDE;

/// Boolean occupancy over 1×32×32-pixel mask units.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub t: usize,
    /// Units per spatial side (H/32).
    pub units_side: usize,
    /// `[T × side × side]`, true = masked.
    pub units: Vec<bool>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn total_units(&self) -> usize {
        self.units.len()
    }

    pub fn masked_count(&self) -> usize {
        self.units.iter().filter(|&&m| m).count()
    }

    pub fn is_masked(&self, t: usize, uy: usize, ux: usize) -> bool {
        self.units[(t * self.units_side + uy) * self.units_side + ux]
    }

    /// Masked units in canonical order (t-major, then row-major).
    pub fn masked_units(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.masked_count());
        for t in 0..self.t {
            for uy in 0..self.units_side {
                for ux in 0..self.units_side {
                    if self.is_masked(t, uy, ux) {
                        out.push((t, uy, ux));
                    }
                }
            }
        }
        out
    }
}

/// Uniformly random unit subset of exact size `round(ratio · total)`,
/// reproducible from the seed.
pub fn sample_mask_plan(t: usize, h: usize, w: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if h != w {
        return Err(Error::dim(format!("square inputs required, got {h}x{w}")));
    }
    if h % FINAL_STRIDE != 0 {
        return Err(Error::dim(format!(
            "spatial size {h} must be divisible by {FINAL_STRIDE}"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("ratio {ratio} outside [0, 1]")));
    }
    let side = h / FINAL_STRIDE;
    let total = t * side * side;
    let k = (ratio * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..k {
        let j = rng.random_range(i..total);
        order.swap(i, j);
    }
    let mut units = vec![false; total];
    for &u in &order[..k] {
        units[u] = true;
    }
    Ok(MaskPlan {
        t,
        units_side: side,
        units,
        ratio,
        seed,
    })
}

pub struct ApplyMaskCache {
    pub patch: PatchCache<f64>,
    /// Flat stage-1 token indices that were replaced by the mask token.
    pub masked_tokens: Vec<usize>,
}

/// Patch-embed the frames, replace every stage-1 token inside a masked
/// unit with the learned mask token, then add the positional encoding.
pub fn apply_mask(
    frames: &Tensor<f64>,
    plan: &MaskPlan,
    mask_token: &Tensor<f64>,
    params: &EncoderParams<f64>,
) -> Result<(TokenGrid<f64>, ApplyMaskCache)> {
    let (mut grid, patch) = patch_embed(frames, params)?;
    let np = grid.np();
    let d = grid.dim();
    if plan.t != grid.t() || plan.units_side * UNIT_TOKENS != np {
        return Err(Error::dim(format!(
            "mask plan geometry (T={}, side={}) does not match token grid (T={}, Np={})",
            plan.t,
            plan.units_side,
            grid.t(),
            np
        )));
    }
    if mask_token.shape() != [d] {
        return Err(Error::dim(format!(
            "mask token must be [{d}], got {:?}",
            mask_token.shape()
        )));
    }
    let mut masked_tokens = Vec::new();
    {
        let data = grid.data_mut().data_mut();
        for (t, uy, ux) in plan.masked_units() {
            for dy in 0..UNIT_TOKENS {
                for dx in 0..UNIT_TOKENS {
                    let y = uy * UNIT_TOKENS + dy;
                    let x = ux * UNIT_TOKENS + dx;
                    let tok = (t * np + y) * np + x;
                    data[tok * d..(tok + 1) * d].copy_from_slice(mask_token.data());
                    masked_tokens.push(tok);
                }
            }
        }
    }
    let grid = add_positional(&grid)?;
    Ok((grid, ApplyMaskCache {
        patch,
        masked_tokens,
    }))
}

/// Backward through [`apply_mask`]: masked positions feed the mask-token
/// adjoint, unmasked ones flow into the patch stem.
pub fn apply_mask_backward(
    params: &mut EncoderParams<f64>,
    mask_token: &mut DualTensor<f64>,
    cache: &ApplyMaskCache,
    dgrid: &TokenGrid<f64>,
) -> Result<Tensor<f64>> {
    let d = dgrid.dim();
    let mut dtokens = dgrid.clone();
    {
        let data = dtokens.data_mut().data_mut();
        for &tok in &cache.masked_tokens {
            let row = &mut data[tok * d..(tok + 1) * d];
            for (g, v) in mask_token.grad.data_mut().iter_mut().zip(row.iter()) {
                *g += *v;
            }
            row.fill(0.0);
        }
    }
    patch_embed_backward(params, &cache.patch, &dtokens)
}

/// Per-unit normalized reconstruction targets: each masked unit's
/// 32·32·C pixels flattened (channel-major, then row-major), shifted to
/// zero mean and scaled to unit variance.
pub fn reconstruction_target(
    frames: &Tensor<f64>,
    plan: &MaskPlan,
    eps: f64,
) -> Result<Vec<Tensor<f64>>> {
    let [_, c, h, w] = match frames.shape() {
        [t, c, h, w] => [*t, *c, *h, *w],
        s => return Err(Error::dim(format!("frames must be [T,C,H,W], got {s:?}"))),
    };
    let side = FINAL_STRIDE;
    let mut out = Vec::with_capacity(plan.masked_count());
    for (t, uy, ux) in plan.masked_units() {
        let mut vals = Vec::with_capacity(c * side * side);
        for ci in 0..c {
            for py in 0..side {
                for px in 0..side {
                    let y = uy * side + py;
                    let x = ux * side + px;
                    vals.push(frames.data()[((t * c + ci) * h + y) * w + x]);
                }
            }
        }
        let n = vals.len() as f64;
        let mean: f64 = vals.iter().sum::<f64>() / n;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for v in vals.iter_mut() {
            *v = (*v - mean) * inv;
        }
        out.push(Tensor::from_vec(&[c * side * side], vals)?);
    }
    Ok(out)
}

/// Mean squared error over masked elements only.
pub fn mim_loss(predictions: &[Tensor<f64>], targets: &[Tensor<f64>]) -> Result<f64> {
    Ok(mim_loss_with_grad(predictions, targets)?.0)
}

/// MSE plus per-prediction adjoints `2(p − t)/N` with `N` the number of
/// masked elements.
pub fn mim_loss_with_grad(
    predictions: &[Tensor<f64>],
    targets: &[Tensor<f64>],
) -> Result<(f64, Vec<Tensor<f64>>)> {
    if predictions.len() != targets.len() {
        return Err(Error::dim(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let total: usize = targets.iter().map(|t| t.numel()).sum();
    if total == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(predictions.len());
    for (p, t) in predictions.iter().zip(targets) {
        if p.shape() != t.shape() {
            return Err(Error::dim(format!(
                "prediction shape {:?} vs target {:?}",
                p.shape(),
                t.shape()
            )));
        }
        let mut g = p.zeros_like();
        for ((&pv, &tv), gv) in p.data().iter().zip(t.data()).zip(g.data_mut()) {
            let d = pv - tv;
            loss += d * d;
            *gv = 2.0 * d / total as f64;
        }
        grads.push(g);
    }
    Ok((loss / total as f64, grads))
}
