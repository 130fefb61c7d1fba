//! The three attention mechanisms over spatiotemporal token grids:
//! full multi-head self-attention, gyroscope attention restricted to the
//! plane-plus-line key set, and its differential approximation that
//! replaces per-timestamp spatial scores with a median-anchored
//! similarity plus a learned discrepancy shift.

mod dstga;
mod gyroscope;
mod mhsa;
mod stga;
#[cfg(test)]
mod tests;

pub use dstga::{dstga, dstga_spatial_similarity, DstgaCache};
pub use gyroscope::GyroscopeIndexSet;
pub use mhsa::{mhsa, MhsaCache};
pub use stga::{stga, stga_oracle, stga_oracle_attention, StgaCache};

use crate::error::{Error, Result};
use crate::nn::{BatchNormScalar, LinearParams, Mode, ParamVisit};
use crate::numerics::{DualTensor, Element, Tensor};
use rand_chacha::ChaCha8Rng;

/// Tokens arranged as `[T, Np, Np, D]`; flattening is t-major then
/// row-major spatial, so the same buffer reads as `[T·Np², D]`.
#[derive(Debug, Clone)]
pub struct TokenGrid<E: Element> {
    t: usize,
    np: usize,
    dim: usize,
    data: Tensor<E>,
}

impl<E: Element> TokenGrid<E> {
    pub fn new(t: usize, np: usize, dim: usize, data: Tensor<E>) -> Result<Self> {
        if data.shape() != [t, np, np, dim] {
            return Err(Error::dim(format!(
                "token grid expects [{t}, {np}, {np}, {dim}], got {:?}",
                data.shape()
            )));
        }
        Ok(TokenGrid { t, np, dim, data })
    }

    pub fn zeros(t: usize, np: usize, dim: usize) -> Self {
        TokenGrid {
            t,
            np,
            dim,
            data: Tensor::zeros(&[t, np, np, dim]),
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn np(&self) -> usize {
        self.np
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_tokens(&self) -> usize {
        self.t * self.np * self.np
    }

    pub fn data(&self) -> &Tensor<E> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Tensor<E> {
        &mut self.data
    }

    pub fn into_tensor(self) -> Tensor<E> {
        self.data
    }

    /// The same tokens viewed as a `[N, D]` matrix.
    pub fn to_flat(&self) -> Tensor<E> {
        self.data
            .clone()
            .reshape(&[self.num_tokens(), self.dim])
            .expect("grid numel is invariant")
    }

    /// Rebuild a grid from a `[N, D]` matrix in canonical order.
    pub fn from_flat(t: usize, np: usize, dim: usize, flat: Tensor<E>) -> Result<Self> {
        let data = flat.reshape(&[t, np, np, dim])?;
        Ok(TokenGrid { t, np, dim, data })
    }
}

/// Attention mechanism selector; the letters match the four-letter
/// configuration strings ("M-M-M-M", "D-D-M-M", ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    /// Full multi-head self-attention.
    Mhsa,
    /// Spatiotemporal gyroscope attention.
    Stga,
    /// Differential spatiotemporal gyroscope attention.
    Dstga,
}

impl AttnKind {
    pub fn letter(self) -> char {
        match self {
            AttnKind::Mhsa => 'M',
            AttnKind::Stga => 'S',
            AttnKind::Dstga => 'D',
        }
    }

    pub fn from_letter(c: char) -> Result<Self> {
        match c {
            'M' => Ok(AttnKind::Mhsa),
            'S' => Ok(AttnKind::Stga),
            'D' => Ok(AttnKind::Dstga),
            other => Err(Error::config(format!(
                "attention letter must be one of M, S, D; got '{other}'"
            ))),
        }
    }
}

/// Parse a four-letter configuration string such as "D-D-M-M".
pub fn parse_attn_string(s: &str) -> Result<[AttnKind; 4]> {
    let parts: Vec<&str> = s.split('-').collect();
    if parts.len() != 4 || parts.iter().any(|p| p.len() != 1) {
        return Err(Error::config(format!(
            "attention configuration must be 4 letters from {{M,S,D}} joined by '-', got \"{s}\""
        )));
    }
    let mut kinds = [AttnKind::Mhsa; 4];
    for (i, p) in parts.iter().enumerate() {
        kinds[i] = AttnKind::from_letter(p.chars().next().unwrap())?;
    }
    Ok(kinds)
}

pub fn attn_string(kinds: &[AttnKind; 4]) -> String {
    kinds
        .iter()
        .map(|k| k.letter().to_string())
        .collect::<Vec<_>>()
        .join("-")
}

/// Per-head channel-reducing projection used by differential attention:
/// a `D' → 1` linear followed by batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct DiffHead<E: Element> {
    pub proj: LinearParams<E>,
    pub bn: BatchNormScalar<E>,
}

impl<E: Element> DiffHead<E> {
    pub fn init(head_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        DiffHead {
            proj: LinearParams::init(head_dim, 1, rng),
            bn: BatchNormScalar::identity(),
        }
    }

    /// All-zero projection weights (the degenerate configuration where
    /// the discrepancy term vanishes).
    pub fn zeroed(head_dim: usize) -> Self {
        DiffHead {
            proj: LinearParams::zeros(head_dim, 1),
            bn: BatchNormScalar::identity(),
        }
    }
}

impl<E: Element> ParamVisit<E> for DiffHead<E> {
    fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.proj.visit_tensors(&format!("{prefix}.proj"), f);
        self.bn.visit_tensors(&format!("{prefix}.bn"), f);
    }

    fn visit_tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.proj.visit_tensors_mut(&format!("{prefix}.proj"), f);
        self.bn.visit_tensors_mut(&format!("{prefix}.bn"), f);
    }

    fn visit_learnables(&self, f: &mut dyn FnMut(&DualTensor<E>)) {
        self.proj.visit_learnables(f);
        self.bn.visit_learnables(f);
    }

    fn visit_learnables_mut(&mut self, f: &mut dyn FnMut(&mut DualTensor<E>)) {
        self.proj.visit_learnables_mut(f);
        self.bn.visit_learnables_mut(f);
    }
}

/// Q/K/V/O projections plus, for differential attention only, one
/// [`DiffHead`] per head.
#[derive(Debug, Clone)]
pub struct AttentionParams<E: Element> {
    pub kind: AttnKind,
    pub heads: usize,
    pub wq: LinearParams<E>,
    pub wk: LinearParams<E>,
    pub wv: LinearParams<E>,
    pub wo: LinearParams<E>,
    /// Present iff `kind == Dstga`, one entry per head.
    pub diff: Option<Vec<DiffHead<E>>>,
}

impl<E: Element> AttentionParams<E> {
    pub fn init(kind: AttnKind, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "dim {dim} must be divisible by heads {heads}"
            )));
        }
        let head_dim = dim / heads;
        let diff = match kind {
            AttnKind::Dstga => Some((0..heads).map(|_| DiffHead::init(head_dim, rng)).collect()),
            _ => None,
        };
        Ok(AttentionParams {
            kind,
            heads,
            wq: LinearParams::init(dim, dim, rng),
            wk: LinearParams::init(dim, dim, rng),
            wv: LinearParams::init(dim, dim, rng),
            wo: LinearParams::init(dim, dim, rng),
            diff,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.d_in()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn score_scale(&self) -> E {
        E::from_f64(1.0 / (self.head_dim() as f64).sqrt())
    }

    /// Replace the projection heads with all-zero ones (test hook for
    /// the degenerate discrepancy-free configuration).
    pub fn zero_diff_heads(&mut self) {
        let hd = self.head_dim();
        if let Some(diff) = &mut self.diff {
            for d in diff.iter_mut() {
                *d = DiffHead::zeroed(hd);
            }
        }
    }

    fn check_input(&self, x: &TokenGrid<E>) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(Error::dim(format!(
                "token dim {} does not match attention dim {}",
                x.dim(),
                self.dim()
            )));
        }
        if self.kind == AttnKind::Dstga && self.diff.as_ref().map(Vec::len) != Some(self.heads) {
            return Err(Error::config(
                "differential attention needs one projection per head".to_string(),
            ));
        }
        Ok(())
    }
}

impl<E: Element> ParamVisit<E> for AttentionParams<E> {
    fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.wq.visit_tensors(&format!("{prefix}.wq"), f);
        self.wk.visit_tensors(&format!("{prefix}.wk"), f);
        self.wv.visit_tensors(&format!("{prefix}.wv"), f);
        self.wo.visit_tensors(&format!("{prefix}.wo"), f);
        if let Some(diff) = &self.diff {
            for (h, d) in diff.iter().enumerate() {
                d.visit_tensors(&format!("{prefix}.pi.head{h}"), f);
            }
        }
    }

    fn visit_tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.wq.visit_tensors_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_tensors_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_tensors_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_tensors_mut(&format!("{prefix}.wo"), f);
        if let Some(diff) = &mut self.diff {
            for (h, d) in diff.iter_mut().enumerate() {
                d.visit_tensors_mut(&format!("{prefix}.pi.head{h}"), f);
            }
        }
    }

    fn visit_learnables(&self, f: &mut dyn FnMut(&DualTensor<E>)) {
        self.wq.visit_learnables(f);
        self.wk.visit_learnables(f);
        self.wv.visit_learnables(f);
        self.wo.visit_learnables(f);
        if let Some(diff) = &self.diff {
            for d in diff {
                d.visit_learnables(f);
            }
        }
    }

    fn visit_learnables_mut(&mut self, f: &mut dyn FnMut(&mut DualTensor<E>)) {
        self.wq.visit_learnables_mut(f);
        self.wk.visit_learnables_mut(f);
        self.wv.visit_learnables_mut(f);
        self.wo.visit_learnables_mut(f);
        if let Some(diff) = &mut self.diff {
            for d in diff {
                d.visit_learnables_mut(f);
            }
        }
    }
}

/// Forward cache for [`attention_backward`].
pub enum AttnCache<E: Element> {
    Mhsa(MhsaCache<E>),
    Stga(StgaCache<E>),
    Dstga(DstgaCache<E>),
}

impl<E: Element> AttnCache<E> {
    /// Post-softmax attention per head (rows are probability vectors).
    pub fn attention_maps(&self) -> Vec<&Tensor<E>> {
        match self {
            AttnCache::Mhsa(c) => c.attention_maps(),
            AttnCache::Stga(c) => c.attention_maps(),
            AttnCache::Dstga(c) => c.attention_maps(),
        }
    }
}

/// Run the attention mechanism selected by `params.kind`.
pub fn attention_forward<E: Element>(
    x: &TokenGrid<E>,
    params: &AttentionParams<E>,
    mode: Mode,
) -> Result<(TokenGrid<E>, AttnCache<E>)> {
    params.check_input(x)?;
    match params.kind {
        AttnKind::Mhsa => {
            let (out, cache) = mhsa::forward(x, params)?;
            Ok((out, AttnCache::Mhsa(cache)))
        }
        AttnKind::Stga => {
            let idx = GyroscopeIndexSet::build(x.t(), x.np())?;
            let (out, cache) = stga::forward(x, params, &idx)?;
            Ok((out, AttnCache::Stga(cache)))
        }
        AttnKind::Dstga => {
            let (out, cache) = dstga::forward(x, params, mode)?;
            Ok((out, AttnCache::Dstga(cache)))
        }
    }
}

/// Backward through [`attention_forward`]: accumulates parameter
/// adjoints in `params` and returns the input adjoint.
pub fn attention_backward<E: Element>(
    params: &mut AttentionParams<E>,
    cache: &AttnCache<E>,
    dout: &TokenGrid<E>,
) -> Result<TokenGrid<E>> {
    match cache {
        AttnCache::Mhsa(c) => mhsa::backward(params, c, dout),
        AttnCache::Stga(c) => stga::backward(params, c, dout),
        AttnCache::Dstga(c) => dstga::backward(params, c, dout),
    }
}

/// Extract head `h` of a `[N, D]` projection as a contiguous `[N, D']`.
pub(crate) fn extract_head<E: Element>(x: &Tensor<E>, h: usize, head_dim: usize) -> Tensor<E> {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let mut out = Tensor::zeros(&[n, head_dim]);
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..n {
        od[i * head_dim..(i + 1) * head_dim]
            .copy_from_slice(&xd[i * d + h * head_dim..i * d + (h + 1) * head_dim]);
    }
    out
}

/// Scatter head `h` back into a `[N, D]` buffer.
pub(crate) fn insert_head<E: Element>(dst: &mut Tensor<E>, src: &Tensor<E>, h: usize) {
    let n = dst.shape()[0];
    let d = dst.shape()[1];
    let hd = src.shape()[1];
    let dd = dst.data_mut();
    let sd = src.data();
    for i in 0..n {
        dd[i * d + h * hd..i * d + (h + 1) * hd].copy_from_slice(&sd[i * hd..(i + 1) * hd]);
    }
}
