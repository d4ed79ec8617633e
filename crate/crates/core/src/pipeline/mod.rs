//! Two-stage training: contrastive pre-training of the image encoder, then
//! transfer of its features into the point encoder with the image encoder
//! held fixed.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod sampling;
pub mod stage1;
pub mod stage2;

use std::path::Path;

use crate::data::formats::write_metrics;
use crate::error::{Error, Result};
use crate::numcore::{Gradients, OptimizerState, Var};

pub use augment::{augment_image, AugmentationSpec};
pub use checkpoint::Checkpoint;
pub use config::{G2dHead, ModelConfig, PairPolicy, Stage, TrainConfig};
pub use model::{Model, MODULES};
pub use sampling::sample_pixel_point_batch;
pub use stage1::{pretrain_stage1, resume_stage1};
pub use stage2::{pretrain_stage2, pretrain_stage2_observed, resume_stage2, Stage2Batch, Stage2Losses};

pub const LOSS_LOG_HEADER: [&str; 6] = ["epoch", "step", "loss_total", "loss_glb", "loss_pnt", "lr"];

/// One optimisation step. Epochs and steps count from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub global: f64,
    pub pointwise: f64,
    pub lr: f64,
}

impl LossRecord {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.step.to_string(),
            self.total.to_string(),
            self.global.to_string(),
            self.pointwise.to_string(),
            self.lr.to_string(),
        ]
    }
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = log.iter().map(LossRecord::csv_row).collect();
    write_metrics(path, &LOSS_LOG_HEADER, &rows)
}

/// Mean `loss_total` of each epoch, in epoch order.
pub fn epoch_means(log: &[LossRecord]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in log {
        match out.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                *s += r.total;
                *n += 1;
            }
            _ => out.push((r.epoch, r.total, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    /// Records of the epochs run by this call only.
    pub log: Vec<LossRecord>,
    /// Per module, the sum over steps of the gradient's Euclidean norm.
    pub grad_norms: [f64; 6],
}

/// Applies one optimizer step to every module in `bound`, at rate `lr`.
/// Returns the gradient norm of each module.
fn apply_gradients(
    model: &mut Model,
    optimizers: &mut [OptimizerState],
    bound: &[(usize, Vec<Var>)],
    grads: &mut Gradients,
    lr: f64,
    norms: &mut [f64; 6],
) -> Result<()> {
    for (k, vars) in bound {
        let g: Vec<_> = vars.iter().map(|&v| grads.take(v)).collect();
        let sq: f64 = g.iter().flatten().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum();
        if !sq.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in module {}", MODULES[*k])));
        }
        norms[*k] += sq.sqrt();
        optimizers[*k].lr = lr;
        optimizers[*k].step(model.params_mut(*k).values_mut(), &g)?;
    }
    Ok(())
}
