use super::ModelConfig;
use crate::attention::AttnKind;

/// Learnable-scalar counts by component; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub patch_embed: u64,
    pub stages: [u64; 4],
    pub downsamples: u64,
    pub total: u64,
}

/// Exact learnable-scalar count of the encoder (buffers such as
/// batch-norm running statistics are not learnable and not counted).
pub fn count_parameters(config: &ModelConfig) -> ParamBreakdown {
    let c = config.in_channels as u64;
    let d1 = config.stages[0].dim as u64;
    let mid = d1 / 2;
    let patch_embed = (49 * c * mid + mid) + (4 * mid * d1 + d1);

    let r = config.mlp_ratio as u64;
    let mut stages = [0u64; 4];
    for (i, s) in config.stages.iter().enumerate() {
        let d = s.dim as u64;
        let h = s.heads as u64;
        let hd = d / h;
        let qkvo = 4 * (d * d + d);
        let norms = 2 * (2 * d);
        let ffn = (d * (r * d) + r * d) + ((r * d) * d + d);
        let pi = match s.attn {
            // per head: D'→1 linear (weights + bias) and BN affine (γ, β)
            AttnKind::Dstga => h * (hd + 1 + 2),
            _ => 0,
        };
        stages[i] = s.depth as u64 * (qkvo + norms + ffn + pi);
    }

    let mut downsamples = 0u64;
    for i in 0..3 {
        let din = config.stages[i].dim as u64;
        let dout = config.stages[i + 1].dim as u64;
        downsamples += 9 * din * dout + dout;
    }

    let total = patch_embed + stages.iter().sum::<u64>() + downsamples;
    ParamBreakdown {
        patch_embed,
        stages,
        downsamples,
        total,
    }
}
