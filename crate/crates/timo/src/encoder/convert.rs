use super::EncoderParams;
use crate::attention::{parse_attn_string, AttnKind, DiffHead};
use crate::error::{Error, Result};
use crate::numerics::Element;
use rand_chacha::ChaCha8Rng;

/// Pretrain-to-finetune surgery: reuse the attention weights of an
/// encoder pretrained with MHSA everywhere, switch the requested stages
/// to gyroscope or differential attention, and randomly initialize the
/// projection parameters that have no pretrained counterpart.
pub fn convert_for_finetune<E: Element>(
    pretrained: &EncoderParams<E>,
    attn: &str,
    rng: &mut ChaCha8Rng,
) -> Result<EncoderParams<E>> {
    if pretrained.config.attn_string() != "M-M-M-M" {
        return Err(Error::config(format!(
            "expected parameters pretrained with M-M-M-M, got {}",
            pretrained.config.attn_string()
        )));
    }
    let kinds = parse_attn_string(attn)?;
    let mut out = pretrained.clone();
    for (i, kind) in kinds.iter().enumerate() {
        out.config.stages[i].attn = *kind;
        let heads = out.config.stages[i].heads;
        let head_dim = out.config.stages[i].dim / heads;
        for block in &mut out.stages[i] {
            block.attn.kind = *kind;
            block.attn.diff = match kind {
                AttnKind::Dstga => {
                    Some((0..heads).map(|_| DiffHead::init(head_dim, rng)).collect())
                }
                _ => None,
            };
        }
    }
    Ok(out)
}
