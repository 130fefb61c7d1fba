use super::mask::{
    apply_mask, apply_mask_backward, mim_loss_with_grad, reconstruction_target, sample_mask_plan,
    MaskPlan,
};
use super::optim::{AdamWConfig, OptimizerState};
use crate::attention::TokenGrid;
use crate::encoder::{stages_backward, stages_forward, EncoderParams, ModelConfig, FINAL_STRIDE};
use crate::error::{Error, Result};
use crate::nn::{zero_grads, LinearParams, Mode, ParamVisit};
use crate::numerics::{DualTensor, Tensor};
use crate::sampler::{derive_seed, generate_synthetic_sits, SitsParams};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const TARGET_NORM_EPS: f64 = 1e-6;

/// Encoder plus the mask token and the linear reconstruction head that
/// maps each stage-4 token of a masked unit to its normalized pixels.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub encoder: EncoderParams<f64>,
    pub mask_token: DualTensor<f64>,
    pub head: LinearParams<f64>,
}

impl PretrainModel {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.attn_string() != "M-M-M-M" {
            return Err(Error::config(format!(
                "pretraining uses MHSA in all stages, got {}",
                config.attn_string()
            )));
        }
        let encoder = EncoderParams::init(config, rng)?;
        let d1 = config.stages[0].dim;
        let d4 = config.stages[3].dim;
        let unit_pixels = FINAL_STRIDE * FINAL_STRIDE * config.in_channels;
        let mut mask_token = Tensor::zeros(&[d1]);
        for v in mask_token.data_mut() {
            *v = rand::Rng::random_range(rng, -0.02..0.02);
        }
        Ok(PretrainModel {
            encoder,
            mask_token: DualTensor::new(mask_token),
            head: LinearParams::init(d4, unit_pixels, rng),
        })
    }
}

impl ParamVisit<f64> for PretrainModel {
    fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<f64>)) {
        self.encoder.visit_tensors(prefix, f);
        let name = if prefix.is_empty() {
            "mask_token".to_string()
        } else {
            format!("{prefix}.mask_token")
        };
        f(name, &self.mask_token.value);
        let head_prefix = if prefix.is_empty() {
            "head".to_string()
        } else {
            format!("{prefix}.head")
        };
        self.head.visit_tensors(&head_prefix, f);
    }

    fn visit_tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<f64>)) {
        self.encoder.visit_tensors_mut(prefix, f);
        let name = if prefix.is_empty() {
            "mask_token".to_string()
        } else {
            format!("{prefix}.mask_token")
        };
        f(name, &mut self.mask_token.value);
        let head_prefix = if prefix.is_empty() {
            "head".to_string()
        } else {
            format!("{prefix}.head")
        };
        self.head.visit_tensors_mut(&head_prefix, f);
    }

    fn visit_learnables(&self, f: &mut dyn FnMut(&DualTensor<f64>)) {
        self.encoder.visit_learnables(f);
        f(&self.mask_token);
        self.head.visit_learnables(f);
    }

    fn visit_learnables_mut(&mut self, f: &mut dyn FnMut(&mut DualTensor<f64>)) {
        self.encoder.visit_learnables_mut(f);
        f(&mut self.mask_token);
        self.head.visit_learnables_mut(f);
    }
}

/// One batch of frames with mask plans and normalized targets.
pub struct MimBatch {
    pub frames: Vec<Tensor<f64>>,
    pub plans: Vec<MaskPlan>,
    pub targets: Vec<Vec<Tensor<f64>>>,
}

impl MimBatch {
    /// Build plans (one per item, seeds derived from `seed`) and
    /// normalized targets for the masked units.
    pub fn build(frames: Vec<Tensor<f64>>, ratio: f64, seed: u64) -> Result<Self> {
        let mut plans = Vec::with_capacity(frames.len());
        let mut targets = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let [t, _, h, w] = match f.shape() {
                [t, c, h, w] => [*t, *c, *h, *w],
                s => return Err(Error::dim(format!("frames must be [T,C,H,W], got {s:?}"))),
            };
            let plan = sample_mask_plan(t, h, w, ratio, derive_seed(seed, i as u64))?;
            targets.push(reconstruction_target(f, &plan, TARGET_NORM_EPS)?);
            plans.push(plan);
        }
        Ok(MimBatch {
            frames,
            plans,
            targets,
        })
    }
}

/// Forward the masked pipeline for one item and return the per-unit
/// predictions plus everything needed for the backward pass.
struct ItemForward {
    preds: Vec<Tensor<f64>>,
    gathered: Tensor<f64>,
    mask_cache: super::mask::ApplyMaskCache,
    stages_cache: crate::encoder::StagesCache<f64>,
    stage4_shape: (usize, usize, usize),
}

fn forward_item(model: &PretrainModel, frames: &Tensor<f64>, plan: &MaskPlan) -> Result<ItemForward> {
    let (grid, mask_cache) = apply_mask(frames, plan, &model.mask_token.value, &model.encoder)?;
    let (out, stages_cache) = stages_forward(&grid, &model.encoder, Mode::Eval)?;
    let s4 = &out.features[3];
    let (t4, np4, d4) = (s4.t(), s4.np(), s4.dim());
    if np4 != plan.units_side {
        return Err(Error::dim(format!(
            "stage-4 side {np4} does not match mask-unit side {}",
            plan.units_side
        )));
    }
    let masked = plan.masked_units();
    let mut gathered = Tensor::zeros(&[masked.len(), d4]);
    for (row, &(t, uy, ux)) in masked.iter().enumerate() {
        let tok = (t * np4 + uy) * np4 + ux;
        gathered.data_mut()[row * d4..(row + 1) * d4]
            .copy_from_slice(&s4.data().data()[tok * d4..(tok + 1) * d4]);
    }
    let flat_preds = model.head.forward(&gathered)?;
    let unit_len = flat_preds.shape()[1];
    let preds = flat_preds
        .data()
        .chunks(unit_len)
        .map(|c| Tensor::from_vec(&[unit_len], c.to_vec()).expect("chunk length"))
        .collect();
    Ok(ItemForward {
        preds,
        gathered,
        mask_cache,
        stages_cache,
        stage4_shape: (t4, np4, d4),
    })
}

/// One training step over a batch: forward, masked-MSE loss, hand-rolled
/// backward, and an AdamW update. Aborts on non-finite loss.
pub fn train_step(
    model: &mut PretrainModel,
    batch: &MimBatch,
    opt: &mut OptimizerState,
) -> Result<(f64, f64)> {
    let loss = loss_and_grads(model, batch)?;
    let lr = opt.apply(model)?;
    Ok((loss, lr))
}

/// Forward and backward over a batch, leaving adjoints accumulated in
/// the model (no optimizer update).
pub fn loss_and_grads(model: &mut PretrainModel, batch: &MimBatch) -> Result<f64> {
    zero_grads(model);

    let mut fwds = Vec::with_capacity(batch.frames.len());
    for (frames, plan) in batch.frames.iter().zip(&batch.plans) {
        fwds.push(forward_item(model, frames, plan)?);
    }

    let all_preds: Vec<Tensor<f64>> = fwds.iter().flat_map(|f| f.preds.clone()).collect();
    let all_targets: Vec<Tensor<f64>> = batch.targets.iter().flatten().cloned().collect();
    let (loss, dpreds) = mim_loss_with_grad(&all_preds, &all_targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss is not finite".to_string()));
    }

    let mut offset = 0;
    for (fwd, plan) in fwds.iter().zip(&batch.plans) {
        let k = fwd.preds.len();
        let unit_len = if k > 0 { fwd.preds[0].numel() } else { 0 };
        let mut dflat = Tensor::zeros(&[k, unit_len]);
        for (row, g) in dpreds[offset..offset + k].iter().enumerate() {
            dflat.data_mut()[row * unit_len..(row + 1) * unit_len].copy_from_slice(g.data());
        }
        offset += k;

        let dgathered = model.head.backward(&fwd.gathered, &dflat)?;

        let (t4, np4, d4) = fwd.stage4_shape;
        let mut dstage4 = TokenGrid::zeros(t4, np4, d4);
        for (row, &(t, uy, ux)) in plan.masked_units().iter().enumerate() {
            let tok = (t * np4 + uy) * np4 + ux;
            dstage4.data_mut().data_mut()[tok * d4..(tok + 1) * d4]
                .copy_from_slice(&dgathered.data()[row * d4..(row + 1) * d4]);
        }

        let dgrid = stages_backward(
            &mut model.encoder,
            &fwd.stages_cache,
            [None, None, None, Some(&dstage4)],
        )?;
        apply_mask_backward(
            &mut model.encoder,
            &mut model.mask_token,
            &fwd.mask_cache,
            &dgrid,
        )?;
    }

    Ok(loss)
}

/// Desk-scale pretraining run configuration.
#[derive(Debug, Clone)]
pub struct ToyRunConfig {
    pub steps: usize,
    pub seed: u64,
    pub t: usize,
    pub size: usize,
    pub channels: usize,
    pub batch: usize,
    pub dataset: usize,
    pub ratio: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        ToyRunConfig {
            steps: 200,
            seed: 0,
            t: 3,
            size: 64,
            channels: 4,
            batch: 2,
            dataset: 8,
            ratio: 0.75,
            base_lr: 2e-3,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct ToyRunReport {
    pub rows: Vec<TrainRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Seeded toy masked-image-modeling run on synthetic SITS. Fully
/// deterministic: the same config reproduces the loss curve bitwise.
pub fn pretrain_toy(cfg: &ToyRunConfig) -> Result<ToyRunReport> {
    let config = ModelConfig::tiny(cfg.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = PretrainModel::init(&config, &mut rng)?;
    let opt_cfg = AdamWConfig::with_schedule(cfg.base_lr, cfg.weight_decay, cfg.steps as u64);
    let mut opt = OptimizerState::new(opt_cfg, &model);

    let sits_params = SitsParams {
        season_amp: 0.15,
        noise_sigma: 0.02,
        change_step: Some(cfg.t / 2),
        change_amp: 0.2,
    };
    let mut dataset = Vec::with_capacity(cfg.dataset);
    for i in 0..cfg.dataset {
        let s = generate_synthetic_sits(
            cfg.t,
            cfg.channels,
            cfg.size,
            cfg.size,
            derive_seed(cfg.seed, 1000 + i as u64),
            &sits_params,
        )?;
        dataset.push(s.data.cast::<f64>());
    }

    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut frames = Vec::with_capacity(cfg.batch);
        for b in 0..cfg.batch {
            frames.push(dataset[(step * cfg.batch + b) % cfg.dataset].clone());
        }
        let batch = MimBatch::build(frames, cfg.ratio, derive_seed(cfg.seed, 2000 + step as u64))?;
        let (loss, lr) = train_step(&mut model, &batch, &mut opt)?;
        rows.push(TrainRow {
            step: step as u64,
            lr,
            loss,
        });
    }
    let initial_loss = rows.first().map(|r| r.loss).unwrap_or(0.0);
    let final_loss = rows.last().map(|r| r.loss).unwrap_or(0.0);
    Ok(ToyRunReport {
        rows,
        initial_loss,
        final_loss,
    })
}

/// Write a training report as CSV with columns step, lr, loss.
pub fn write_training_report(report: &ToyRunReport, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,lr,loss")?;
    for r in &report.rows {
        writeln!(w, "{},{:.17e},{:.17e}", r.step, r.lr, r.loss)?;
    }
    w.flush()?;
    Ok(())
}
