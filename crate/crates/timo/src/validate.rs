//! Validation harnesses shared by the test suites and the CLI: seeded
//! oracle-equivalence sweeps and finite-difference gradient checks for
//! the attention mechanisms, transformer blocks, and small encoders.

use crate::attention::{
    attention_backward, attention_forward, stga_oracle, AttentionParams, AttnKind,
    GyroscopeIndexSet, TokenGrid,
};
use crate::encoder::{
    block_backward, block_forward, encoder_backward, encoder_forward, BlockParams, EncoderParams,
    FfnParams, ModelConfig, StageConfig, Variant,
};
use crate::error::Result;
use crate::nn::{zero_grads, LayerNormParams, LinearParams, Mode, ParamVisit};
use crate::numerics::{grad_check, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

pub fn random_grid(t: usize, np: usize, dim: usize, rng: &mut ChaCha8Rng) -> TokenGrid<f64> {
    TokenGrid::new(t, np, dim, random_tensor(&[t, np, np, dim], rng)).expect("shape is consistent")
}

/// Max |stga − stga_oracle| over `trials` seeded random instances.
pub fn stga_oracle_deviation(
    t: usize,
    np: usize,
    dim: usize,
    heads: usize,
    seed: u64,
    trials: usize,
) -> Result<f64> {
    let idx = GyroscopeIndexSet::build(t, np)?;
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let params = AttentionParams::<f64>::init(AttnKind::Stga, dim, heads, &mut rng)?;
        let x = random_grid(t, np, dim, &mut rng);
        let fast = crate::attention::stga(&x, &params, &idx)?;
        let oracle = stga_oracle(&x, &params)?;
        for (a, b) in fast.data().data().iter().zip(oracle.data().data()) {
            let d = (a - b).abs();
            if d > worst {
                worst = d;
            }
        }
    }
    Ok(worst)
}

fn half_sumsq(t: &Tensor<f64>) -> f64 {
    0.5 * t.data().iter().map(|v| v * v).sum::<f64>()
}

/// Learnable tensors of a parameter tree as (name, value, grad) triples.
///
/// `visit_tensors` and `visit_learnables` traverse leaves in the same
/// order; buffers (running statistics) appear only in the former and are
/// filtered out by name.
pub fn named_learnables<P: ParamVisit<f64>>(p: &P) -> Vec<(String, Tensor<f64>, Tensor<f64>)> {
    let mut names = Vec::new();
    p.visit_tensors("", &mut |name, _| {
        if !name.contains("running") {
            names.push(name);
        }
    });
    let mut pairs = Vec::new();
    p.visit_learnables(&mut |d| pairs.push((d.value.clone(), d.grad.clone())));
    assert_eq!(names.len(), pairs.len(), "learnable walk order mismatch");
    names
        .into_iter()
        .zip(pairs)
        .map(|(n, (v, g))| (n, v, g))
        .collect()
}

/// Overwrite the `i`-th learnable tensor (in traversal order).
fn set_learnable<P: ParamVisit<f64>>(p: &mut P, i: usize, value: &Tensor<f64>) {
    let mut j = 0;
    p.visit_learnables_mut(&mut |d| {
        if j == i {
            d.value = value.clone();
        }
        j += 1;
    });
}

/// Move every learnable to a generic position by adding uniform noise.
///
/// Default initialization leaves biases at exactly zero, which parks
/// ReLU inputs on their kink for median-selected rows of differential
/// attention; central differences straddle the kink and disagree with
/// the subgradient even though the backward pass is consistent.
pub fn jitter_learnables<P: ParamVisit<f64>>(p: &mut P, rng: &mut ChaCha8Rng) {
    p.visit_learnables_mut(&mut |d| {
        for v in d.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    });
}

/// Gradient check for one attention mechanism on a seeded random
/// instance: worst relative error over the input and every learnable
/// parameter tensor (loss = 0.5·Σ out²).
pub fn gradcheck_attention(
    kind: AttnKind,
    t: usize,
    np: usize,
    dim: usize,
    heads: usize,
    seed: u64,
    eps: f64,
    mode: Mode,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = AttentionParams::<f64>::init(kind, dim, heads, &mut rng)?;
    jitter_learnables(&mut params, &mut rng);
    let params = params;
    let x = random_grid(t, np, dim, &mut rng);

    let (out, cache) = attention_forward(&x, &params, mode)?;
    let mut pgrads = params.clone();
    zero_grads(&mut pgrads);
    let dout = TokenGrid::new(x.t(), x.np(), x.dim(), out.data().clone())?;
    let dx = attention_backward(&mut pgrads, &cache, &dout)?;

    let mut worst = grad_check(
        |probe| {
            let grid = TokenGrid::new(x.t(), x.np(), x.dim(), probe.clone())?;
            let (o, _) = attention_forward(&grid, &params, mode)?;
            Ok(half_sumsq(o.data()))
        },
        x.data(),
        dx.data(),
        eps,
    )?;

    for (i, (_name, value, analytic)) in named_learnables(&pgrads).into_iter().enumerate() {
        let err = grad_check(
            |probe| {
                let mut p2 = params.clone();
                set_learnable(&mut p2, i, probe);
                let (o, _) = attention_forward(&x, &p2, mode)?;
                Ok(half_sumsq(o.data()))
            },
            &value,
            &analytic,
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient check for one pre-norm block (attention of the given kind
/// plus FFN and both norms) on a seeded random instance.
pub fn gradcheck_block(
    kind: AttnKind,
    t: usize,
    np: usize,
    dim: usize,
    heads: usize,
    seed: u64,
    eps: f64,
    mode: Mode,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BlockParams {
        norm1: LayerNormParams::identity(dim),
        attn: AttentionParams::<f64>::init(kind, dim, heads, &mut rng)?,
        norm2: LayerNormParams::identity(dim),
        ffn: FfnParams {
            fc1: LinearParams::init(dim, 4 * dim, &mut rng),
            fc2: LinearParams::init(4 * dim, dim, &mut rng),
        },
    };
    jitter_learnables(&mut params, &mut rng);
    let params = params;
    let x = random_grid(t, np, dim, &mut rng);

    let (out, cache) = block_forward(&x, &params, mode)?;
    let mut pgrads = params.clone();
    zero_grads(&mut pgrads);
    let dout = TokenGrid::new(x.t(), x.np(), x.dim(), out.data().clone())?;
    let dx = block_backward(&mut pgrads, &cache, &dout)?;

    let mut worst = grad_check(
        |probe| {
            let grid = TokenGrid::new(x.t(), x.np(), x.dim(), probe.clone())?;
            let (o, _) = block_forward(&grid, &params, mode)?;
            Ok(half_sumsq(o.data()))
        },
        x.data(),
        dx.data(),
        eps,
    )?;
    for (i, (_name, value, analytic)) in named_learnables(&pgrads).into_iter().enumerate() {
        let err = grad_check(
            |probe| {
                let mut p2 = params.clone();
                set_learnable(&mut p2, i, probe);
                let (o, _) = block_forward(&x, &p2, mode)?;
                Ok(half_sumsq(o.data()))
            },
            &value,
            &analytic,
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Two-block toy encoder used by the gradient suite: stage 1 runs
/// gyroscope attention, stage 2 the differential variant, stages 3 and 4
/// are downsample-only.
pub fn tiny_gradcheck_config() -> ModelConfig {
    let mk = |dim, heads, depth, attn| StageConfig {
        dim,
        heads,
        depth,
        attn,
    };
    ModelConfig {
        variant: Variant::Custom,
        stages: [
            mk(4, 1, 1, AttnKind::Stga),
            mk(8, 2, 1, AttnKind::Dstga),
            mk(8, 2, 0, AttnKind::Mhsa),
            mk(8, 2, 0, AttnKind::Mhsa),
        ],
        mlp_ratio: 4,
        in_channels: 1,
    }
}

/// Gradient check through a full small encoder (patch stem, positional
/// encoding, blocks, downsampling) with loss 0.5·Σᵢ‖Fᵢ‖² over all four
/// stage features; checks the pixel input and every learnable tensor.
pub fn gradcheck_encoder(t: usize, size: usize, seed: u64, eps: f64, mode: Mode) -> Result<f64> {
    let config = tiny_gradcheck_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EncoderParams::<f64>::init(&config, &mut rng)?;
    jitter_learnables(&mut params, &mut rng);
    let params = params;
    let x = random_tensor(&[t, config.in_channels, size, size], &mut rng);

    let loss_of = |out: &crate::encoder::EncoderOutput<f64>| -> f64 {
        out.features.iter().map(|f| half_sumsq(f.data())).sum()
    };

    let (out, cache) = encoder_forward(&x, &params, mode)?;
    let mut pgrads = params.clone();
    zero_grads(&mut pgrads);
    let d_feats: Vec<TokenGrid<f64>> = out
        .features
        .iter()
        .map(|f| TokenGrid::new(f.t(), f.np(), f.dim(), f.data().clone()).unwrap())
        .collect();
    let dx = encoder_backward(
        &mut pgrads,
        &cache,
        [
            Some(&d_feats[0]),
            Some(&d_feats[1]),
            Some(&d_feats[2]),
            Some(&d_feats[3]),
        ],
    )?;

    let mut worst = grad_check(
        |probe| {
            let (o, _) = encoder_forward(probe, &params, mode)?;
            Ok(loss_of(&o))
        },
        &x,
        &dx,
        eps,
    )?;
    for (i, (_name, value, analytic)) in named_learnables(&pgrads).into_iter().enumerate() {
        let err = grad_check(
            |probe| {
                let mut p2 = params.clone();
                set_learnable(&mut p2, i, probe);
                let (o, _) = encoder_forward(&x, &p2, mode)?;
                Ok(loss_of(&o))
            },
            &value,
            &analytic,
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
