//! Four-stage hierarchical encoder: convolutional patch embedding,
//! spatiotemporal positional encoding, pre-norm transformer blocks with
//! a configurable attention mechanism per stage, and strided-conv
//! downsampling between stages.

mod checkpoint;
mod convert;
mod count;
mod posenc;
#[cfg(test)]
mod tests;

pub use checkpoint::{load_params, read_named_tensors, save_params, write_named_tensors};
pub use convert::convert_for_finetune;
pub use count::{count_parameters, ParamBreakdown};
pub use posenc::positional_encoding;

use crate::attention::{
    attention_backward, attention_forward, attn_string, parse_attn_string, AttentionParams,
    AttnCache, AttnKind, TokenGrid,
};
use crate::error::{Error, Result};
use crate::nn::{
    Conv2dParams, LayerNormParams, LinearParams, Mode, ParamVisit,
};
use crate::numerics::{gelu, gelu_backward, DualTensor, Element, LayerNormCache, Tensor};
use crate::tally::{self, Bucket};
use rand_chacha::ChaCha8Rng;

pub const MLP_RATIO: usize = 4;
pub const NUM_STAGES: usize = 4;
/// Spatial stride of the patch embedding (two stride-2 convolutions).
pub const PATCH_STRIDE: usize = 4;
/// Total spatial stride at the deepest stage.
pub const FINAL_STRIDE: usize = 32;

/// Per-stage channel width, head count, depth, and attention mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub attn: AttnKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Base,
    Large,
    Huge,
    Tiny,
    Custom,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Large => "large",
            Variant::Huge => "huge",
            Variant::Tiny => "tiny",
            Variant::Custom => "custom",
        }
    }
}

/// Whole-model configuration: four stages plus embedding parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stages: [StageConfig; 4],
    pub mlp_ratio: usize,
    pub in_channels: usize,
}

fn stages_from(dims: [usize; 4], heads: [usize; 4], depths: [usize; 4]) -> [StageConfig; 4] {
    let mut out = [StageConfig {
        dim: 0,
        heads: 1,
        depth: 0,
        attn: AttnKind::Mhsa,
    }; 4];
    for i in 0..4 {
        out[i] = StageConfig {
            dim: dims[i],
            heads: heads[i],
            depth: depths[i],
            attn: AttnKind::Mhsa,
        };
    }
    out
}

impl ModelConfig {
    pub fn base(in_channels: usize) -> Self {
        ModelConfig {
            variant: Variant::Base,
            stages: stages_from([128, 256, 512, 1024], [4, 8, 16, 32], [2, 2, 18, 2]),
            mlp_ratio: MLP_RATIO,
            in_channels,
        }
    }

    pub fn large(in_channels: usize) -> Self {
        ModelConfig {
            variant: Variant::Large,
            stages: stages_from([384, 768, 960, 1536], [6, 12, 24, 48], [2, 2, 18, 2]),
            mlp_ratio: MLP_RATIO,
            in_channels,
        }
    }

    pub fn huge(in_channels: usize) -> Self {
        ModelConfig {
            variant: Variant::Huge,
            stages: stages_from([512, 1024, 1280, 2048], [8, 16, 32, 64], [3, 3, 22, 3]),
            mlp_ratio: MLP_RATIO,
            in_channels,
        }
    }

    /// Desk-scale configuration for toy pretraining runs and tests.
    pub fn tiny(in_channels: usize) -> Self {
        ModelConfig {
            variant: Variant::Tiny,
            stages: stages_from([16, 32, 64, 128], [2, 4, 4, 4], [1, 1, 1, 1]),
            mlp_ratio: MLP_RATIO,
            in_channels,
        }
    }

    pub fn by_name(name: &str, in_channels: usize) -> Result<Self> {
        match name {
            "base" => Ok(Self::base(in_channels)),
            "large" => Ok(Self::large(in_channels)),
            "huge" => Ok(Self::huge(in_channels)),
            "tiny" => Ok(Self::tiny(in_channels)),
            other => Err(Error::config(format!(
                "unknown variant \"{other}\" (expected base, large, huge, or tiny)"
            ))),
        }
    }

    pub fn attn_string(&self) -> String {
        let kinds = [
            self.stages[0].attn,
            self.stages[1].attn,
            self.stages[2].attn,
            self.stages[3].attn,
        ];
        attn_string(&kinds)
    }

    pub fn with_attn_string(mut self, s: &str) -> Result<Self> {
        let kinds = parse_attn_string(s)?;
        for (stage, kind) in self.stages.iter_mut().zip(kinds) {
            stage.attn = kind;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive".to_string()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.dim == 0 || s.heads == 0 || s.dim % s.heads != 0 {
                return Err(Error::config(format!(
                    "stage {}: dim {} must be a positive multiple of heads {}",
                    i + 1,
                    s.dim,
                    s.heads
                )));
            }
            if s.dim % 4 != 0 {
                return Err(Error::config(format!(
                    "stage {}: dim {} must be divisible by 4 for the positional encoding",
                    i + 1,
                    s.dim
                )));
            }
        }
        if self.stages[0].dim % 2 != 0 {
            return Err(Error::config(
                "stage 1 dim must be even for the two-conv patch stem".to_string(),
            ));
        }
        Ok(())
    }
}

/// Two-convolution patch stem: 7×7 stride-2 pad-3 into half the stage-1
/// width, then 2×2 stride-2 up to the full width.
#[derive(Debug, Clone)]
pub struct PatchEmbedParams<E: Element> {
    pub conv1: Conv2dParams<E>,
    pub conv2: Conv2dParams<E>,
}

#[derive(Debug, Clone)]
pub struct FfnParams<E: Element> {
    pub fc1: LinearParams<E>,
    pub fc2: LinearParams<E>,
}

#[derive(Debug, Clone)]
pub struct BlockParams<E: Element> {
    pub norm1: LayerNormParams<E>,
    pub attn: AttentionParams<E>,
    pub norm2: LayerNormParams<E>,
    pub ffn: FfnParams<E>,
}

#[derive(Debug, Clone)]
pub struct EncoderParams<E: Element> {
    pub config: ModelConfig,
    pub patch: PatchEmbedParams<E>,
    pub stages: Vec<Vec<BlockParams<E>>>,
    pub downsamples: Vec<Conv2dParams<E>>,
}

impl<E: Element> EncoderParams<E> {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d1 = config.stages[0].dim;
        let mid = d1 / 2;
        let patch = PatchEmbedParams {
            conv1: Conv2dParams::init(config.in_channels, mid, 7, 2, 3, rng),
            conv2: Conv2dParams::init(mid, d1, 2, 2, 0, rng),
        };
        let mut stages = Vec::with_capacity(4);
        for s in &config.stages {
            let mut blocks = Vec::with_capacity(s.depth);
            for _ in 0..s.depth {
                blocks.push(BlockParams {
                    norm1: LayerNormParams::identity(s.dim),
                    attn: AttentionParams::init(s.attn, s.dim, s.heads, rng)?,
                    norm2: LayerNormParams::identity(s.dim),
                    ffn: FfnParams {
                        fc1: LinearParams::init(s.dim, config.mlp_ratio * s.dim, rng),
                        fc2: LinearParams::init(config.mlp_ratio * s.dim, s.dim, rng),
                    },
                });
            }
            stages.push(blocks);
        }
        let mut downsamples = Vec::with_capacity(3);
        for i in 0..3 {
            downsamples.push(Conv2dParams::init(
                config.stages[i].dim,
                config.stages[i + 1].dim,
                3,
                2,
                1,
                rng,
            ));
        }
        Ok(EncoderParams {
            config: config.clone(),
            patch,
            stages,
            downsamples,
        })
    }
}

impl<E: Element> ParamVisit<E> for BlockParams<E> {
    fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.norm1.visit_tensors(&format!("{prefix}.norm1"), f);
        self.attn.visit_tensors(&format!("{prefix}.attn"), f);
        self.norm2.visit_tensors(&format!("{prefix}.norm2"), f);
        self.ffn.fc1.visit_tensors(&format!("{prefix}.ffn.fc1"), f);
        self.ffn.fc2.visit_tensors(&format!("{prefix}.ffn.fc2"), f);
    }

    fn visit_tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.norm1.visit_tensors_mut(&format!("{prefix}.norm1"), f);
        self.attn.visit_tensors_mut(&format!("{prefix}.attn"), f);
        self.norm2.visit_tensors_mut(&format!("{prefix}.norm2"), f);
        self.ffn
            .fc1
            .visit_tensors_mut(&format!("{prefix}.ffn.fc1"), f);
        self.ffn
            .fc2
            .visit_tensors_mut(&format!("{prefix}.ffn.fc2"), f);
    }

    fn visit_learnables(&self, f: &mut dyn FnMut(&DualTensor<E>)) {
        self.norm1.visit_learnables(f);
        self.attn.visit_learnables(f);
        self.norm2.visit_learnables(f);
        self.ffn.fc1.visit_learnables(f);
        self.ffn.fc2.visit_learnables(f);
    }

    fn visit_learnables_mut(&mut self, f: &mut dyn FnMut(&mut DualTensor<E>)) {
        self.norm1.visit_learnables_mut(f);
        self.attn.visit_learnables_mut(f);
        self.norm2.visit_learnables_mut(f);
        self.ffn.fc1.visit_learnables_mut(f);
        self.ffn.fc2.visit_learnables_mut(f);
    }
}

impl<E: Element> ParamVisit<E> for EncoderParams<E> {
    fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.patch.conv1.visit_tensors(&p("patch_embed.conv1"), f);
        self.patch.conv2.visit_tensors(&p("patch_embed.conv2"), f);
        for (i, blocks) in self.stages.iter().enumerate() {
            for (j, b) in blocks.iter().enumerate() {
                b.visit_tensors(&p(&format!("stage{}.block{}", i + 1, j)), f);
            }
        }
        for (i, ds) in self.downsamples.iter().enumerate() {
            ds.visit_tensors(&p(&format!("downsample{}", i + 1)), f);
        }
    }

    fn visit_tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        let pfx = prefix.to_string();
        let p = |s: &str| {
            if pfx.is_empty() {
                s.to_string()
            } else {
                format!("{pfx}.{s}")
            }
        };
        self.patch
            .conv1
            .visit_tensors_mut(&p("patch_embed.conv1"), f);
        self.patch
            .conv2
            .visit_tensors_mut(&p("patch_embed.conv2"), f);
        for (i, blocks) in self.stages.iter_mut().enumerate() {
            for (j, b) in blocks.iter_mut().enumerate() {
                b.visit_tensors_mut(&p(&format!("stage{}.block{}", i + 1, j)), f);
            }
        }
        for (i, ds) in self.downsamples.iter_mut().enumerate() {
            ds.visit_tensors_mut(&p(&format!("downsample{}", i + 1)), f);
        }
    }

    fn visit_learnables(&self, f: &mut dyn FnMut(&DualTensor<E>)) {
        self.patch.conv1.visit_learnables(f);
        self.patch.conv2.visit_learnables(f);
        for blocks in &self.stages {
            for b in blocks {
                b.visit_learnables(f);
            }
        }
        for ds in &self.downsamples {
            ds.visit_learnables(f);
        }
    }

    fn visit_learnables_mut(&mut self, f: &mut dyn FnMut(&mut DualTensor<E>)) {
        self.patch.conv1.visit_learnables_mut(f);
        self.patch.conv2.visit_learnables_mut(f);
        for blocks in &mut self.stages {
            for b in blocks {
                b.visit_learnables_mut(f);
            }
        }
        for ds in &mut self.downsamples {
            ds.visit_learnables_mut(f);
        }
    }
}

/// `[T, D, Np, Np]` channel-first frames to a `[T, Np, Np, D]` grid.
fn channelfirst_to_grid<E: Element>(x: &Tensor<E>) -> Result<TokenGrid<E>> {
    let (t, d, np) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[t, np, np, d]);
    let xd = x.data();
    let od = out.data_mut();
    for ti in 0..t {
        for c in 0..d {
            for i in 0..np {
                for j in 0..np {
                    od[(((ti * np + i) * np + j) * d) + c] = xd[((ti * d + c) * np + i) * np + j];
                }
            }
        }
    }
    TokenGrid::new(t, np, d, out)
}

fn grid_to_channelfirst<E: Element>(g: &TokenGrid<E>) -> Tensor<E> {
    let (t, np, d) = (g.t(), g.np(), g.dim());
    let mut out = Tensor::zeros(&[t, d, np, np]);
    let xd = g.data().data();
    let od = out.data_mut();
    for ti in 0..t {
        for c in 0..d {
            for i in 0..np {
                for j in 0..np {
                    od[((ti * d + c) * np + i) * np + j] = xd[(((ti * np + i) * np + j) * d) + c];
                }
            }
        }
    }
    out
}

pub struct PatchCache<E: Element> {
    x: Tensor<E>,
    mid: Tensor<E>,
}

/// Per-frame convolutional embedding: `[T, C, H, W]` to a stage-1 token
/// grid at stride 4 (no positional encoding yet).
pub fn patch_embed<E: Element>(
    x: &Tensor<E>,
    params: &EncoderParams<E>,
) -> Result<(TokenGrid<E>, PatchCache<E>)> {
    let [t, c, h, w] = match x.shape() {
        [t, c, h, w] => [*t, *c, *h, *w],
        s => return Err(Error::dim(format!("patch embed expects [T,C,H,W], got {s:?}"))),
    };
    if c != params.config.in_channels {
        return Err(Error::dim(format!(
            "input has {c} channels, config expects {}",
            params.config.in_channels
        )));
    }
    if h != w {
        return Err(Error::dim(format!("square inputs required, got {h}x{w}")));
    }
    if h % PATCH_STRIDE != 0 {
        return Err(Error::dim(format!(
            "spatial size {h} must be divisible by {PATCH_STRIDE}"
        )));
    }
    let _ = t;
    let mid = params.patch.conv1.forward_frames(x)?;
    let tokens = params.patch.conv2.forward_frames(&mid)?;
    let grid = channelfirst_to_grid(&tokens)?;
    Ok((
        grid,
        PatchCache {
            x: x.clone(),
            mid,
        },
    ))
}

/// Backward through the patch stem; accumulates conv adjoints and
/// returns the adjoint of the pixel input.
pub fn patch_embed_backward<E: Element>(
    params: &mut EncoderParams<E>,
    cache: &PatchCache<E>,
    dtokens: &TokenGrid<E>,
) -> Result<Tensor<E>> {
    let dtokens_cf = grid_to_channelfirst(dtokens);
    let dmid = params.patch.conv2.backward_frames(&cache.mid, &dtokens_cf)?;
    params.patch.conv1.backward_frames(&cache.x, &dmid)
}

/// Add the fixed positional encoding to a token grid.
pub fn add_positional<E: Element>(grid: &TokenGrid<E>) -> Result<TokenGrid<E>> {
    let pe = positional_encoding::<E>(grid.t(), grid.np(), grid.dim())?;
    TokenGrid::new(grid.t(), grid.np(), grid.dim(), grid.data().add(&pe)?)
}

pub struct BlockCache<E: Element> {
    x_flat: Tensor<E>,
    ln1: LayerNormCache<E>,
    attn: AttnCache<E>,
    h: Tensor<E>,
    ln2: LayerNormCache<E>,
    ln2_out: Tensor<E>,
    ffn_pre: Tensor<E>,
    ffn_mid: Tensor<E>,
    t: usize,
    np: usize,
}

/// Pre-norm residual block: `x + Attn(LN(x))`, then `+ FFN(LN(·))`.
pub fn block_forward<E: Element>(
    x: &TokenGrid<E>,
    params: &BlockParams<E>,
    mode: Mode,
) -> Result<(TokenGrid<E>, BlockCache<E>)> {
    let (t, np, d) = (x.t(), x.np(), x.dim());
    let x_flat = x.to_flat();
    let (ln1_out, ln1) = params.norm1.forward_with_cache(&x_flat)?;
    let ln1_grid = TokenGrid::from_flat(t, np, d, ln1_out)?;
    let (attn_out, attn) = attention_forward(&ln1_grid, &params.attn, mode)?;
    let h = {
        let _g = tally::scope(Bucket::Norm);
        tally::add(x_flat.numel() as u128);
        x_flat.add(&attn_out.to_flat())?
    };
    let (ln2_out, ln2) = params.norm2.forward_with_cache(&h)?;
    let (ffn_pre, ffn_mid, ffn_out) = {
        let _g = tally::scope(Bucket::Ffn);
        let pre = params.ffn.fc1.forward(&ln2_out)?;
        let mid = gelu(&pre)?;
        let out = params.ffn.fc2.forward(&mid)?;
        (pre, mid, out)
    };
    let out = {
        let _g = tally::scope(Bucket::Norm);
        tally::add(h.numel() as u128);
        h.add(&ffn_out)?
    };
    Ok((
        TokenGrid::from_flat(t, np, d, out)?,
        BlockCache {
            x_flat,
            ln1,
            attn,
            h,
            ln2,
            ln2_out,
            ffn_pre,
            ffn_mid,
            t,
            np,
        },
    ))
}

pub fn block_backward<E: Element>(
    params: &mut BlockParams<E>,
    cache: &BlockCache<E>,
    dout: &TokenGrid<E>,
) -> Result<TokenGrid<E>> {
    let (t, np) = (cache.t, cache.np);
    let d = dout.dim();
    let dout_flat = dout.to_flat();

    // out = h + ffn(ln2(h))
    let dffn_mid = params.ffn.fc2.backward(&cache.ffn_mid, &dout_flat)?;
    let dffn_pre = gelu_backward(&cache.ffn_pre, &dffn_mid)?;
    let dln2_out = params.ffn.fc1.backward(&cache.ln2_out, &dffn_pre)?;
    let mut dh = params.norm2.backward(&cache.ln2, &dln2_out)?;
    dh.accumulate(&dout_flat)?;

    // h = x + attn(ln1(x))
    let dattn = TokenGrid::from_flat(t, np, d, dh.clone())?;
    let dln1_out = attention_backward(&mut params.attn, &cache.attn, &dattn)?;
    let mut dx = params.norm1.backward(&cache.ln1, &dln1_out.to_flat())?;
    dx.accumulate(&dh)?;
    TokenGrid::from_flat(t, np, d, dx)
}

/// Features from all four stages, at spatial strides 4, 8, 16, 32.
pub struct EncoderOutput<E: Element> {
    pub features: [TokenGrid<E>; 4],
}

pub struct StagesCache<E: Element> {
    blocks: Vec<Vec<BlockCache<E>>>,
    /// Channel-first inputs to each downsampling conv.
    ds_inputs: Vec<Tensor<E>>,
}

/// Run the four stages (blocks + downsampling) on a stage-1 token grid
/// that already carries its positional encoding.
pub fn stages_forward<E: Element>(
    grid: &TokenGrid<E>,
    params: &EncoderParams<E>,
    mode: Mode,
) -> Result<(EncoderOutput<E>, StagesCache<E>)> {
    let mut block_caches = Vec::with_capacity(4);
    let mut ds_inputs = Vec::with_capacity(3);
    let mut features: Vec<TokenGrid<E>> = Vec::with_capacity(4);
    let mut current = grid.clone();
    for (i, blocks) in params.stages.iter().enumerate() {
        let mut caches = Vec::with_capacity(blocks.len());
        for b in blocks {
            let (next, cache) = block_forward(&current, b, mode)?;
            caches.push(cache);
            current = next;
        }
        block_caches.push(caches);
        features.push(current.clone());
        if i < 3 {
            if current.np() % 2 != 0 {
                return Err(Error::dim(format!(
                    "stage {} spatial side {} is odd; cannot downsample",
                    i + 1,
                    current.np()
                )));
            }
            let cf = grid_to_channelfirst(&current);
            let down = params.downsamples[i].forward_frames(&cf)?;
            ds_inputs.push(cf);
            current = channelfirst_to_grid(&down)?;
        }
    }
    let features: [TokenGrid<E>; 4] = features
        .try_into()
        .map_err(|_| Error::dim("expected exactly four stages".to_string()))?;
    Ok((
        EncoderOutput { features },
        StagesCache {
            blocks: block_caches,
            ds_inputs,
        },
    ))
}

/// Backward through the stages given adjoints for any subset of the four
/// stage outputs; returns the adjoint of the stage-1 input grid.
pub fn stages_backward<E: Element>(
    params: &mut EncoderParams<E>,
    cache: &StagesCache<E>,
    d_features: [Option<&TokenGrid<E>>; 4],
) -> Result<TokenGrid<E>> {
    let mut dcurrent: Option<TokenGrid<E>> = None;
    for i in (0..4).rev() {
        // adjoint arriving from the downsample above this stage's output
        let mut d = match dcurrent.take() {
            Some(dnext) => {
                let dnext_cf = grid_to_channelfirst(&dnext);
                let dcf = params.downsamples[i].backward_frames(&cache.ds_inputs[i], &dnext_cf)?;
                Some(channelfirst_to_grid(&dcf)?)
            }
            None => None,
        };
        if let Some(extra) = d_features[i] {
            d = Some(match d {
                Some(mut acc) => {
                    acc.data_mut().accumulate(extra.data())?;
                    acc
                }
                None => extra.clone(),
            });
        }
        let Some(mut dstage) = d else {
            // nothing above this stage contributes
            dcurrent = None;
            continue;
        };
        for (b, bc) in params.stages[i]
            .iter_mut()
            .zip(&cache.blocks[i])
            .rev()
        {
            dstage = block_backward(b, bc, &dstage)?;
        }
        dcurrent = Some(dstage);
    }
    dcurrent.ok_or_else(|| Error::dim("no stage adjoints were provided".to_string()))
}

pub struct EncoderCache<E: Element> {
    pub patch: PatchCache<E>,
    pub stages: StagesCache<E>,
}

/// Full encoder: patch embedding, positional encoding, four stages.
pub fn encoder_forward<E: Element>(
    x: &Tensor<E>,
    params: &EncoderParams<E>,
    mode: Mode,
) -> Result<(EncoderOutput<E>, EncoderCache<E>)> {
    let h = x.shape()[2];
    if h % FINAL_STRIDE != 0 {
        return Err(Error::dim(format!(
            "input side {h} must be divisible by {FINAL_STRIDE}"
        )));
    }
    let (tokens, patch) = patch_embed(x, params)?;
    let grid = add_positional(&tokens)?;
    let (out, stages) = stages_forward(&grid, params, mode)?;
    Ok((out, EncoderCache { patch, stages }))
}

/// Backward through the full encoder; returns the pixel-input adjoint.
pub fn encoder_backward<E: Element>(
    params: &mut EncoderParams<E>,
    cache: &EncoderCache<E>,
    d_features: [Option<&TokenGrid<E>>; 4],
) -> Result<Tensor<E>> {
    let dgrid = stages_backward(params, &cache.stages, d_features)?;
    // the positional encoding is a constant shift
    patch_embed_backward(params, &cache.patch, &dgrid)
}
