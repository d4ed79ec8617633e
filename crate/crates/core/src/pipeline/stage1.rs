//! Stage 1: two augmentations of each of `k` renders, pulled together
//! against the other `2k − 2` in the batch.

use rand::seq::SliceRandom;

use crate::data::{Dataset, Split};
use crate::encoders::{images_to_tensor, Mode};
use crate::error::{Error, Result};
use crate::losses::pair_contrastive_var_tolerant;
use crate::numcore::Tape;
use crate::renderer::Image;
use crate::seeding::{stream, tag};

use super::augment::augment_image;
use super::checkpoint::Checkpoint;
use super::config::{Stage, TrainConfig};
use super::model::{Model, F2D, G2D, MODULES};
use super::{apply_gradients, LossRecord, StageOutput};

/// Every train-split render as `(object index, view)`, in dataset order.
fn image_pool(ds: &Dataset) -> Vec<(usize, usize)> {
    ds.objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.split == Split::Train)
        .flat_map(|(i, o)| (0..o.views.len()).map(move |j| (i, j)))
        .collect()
}

pub fn pretrain_stage1(ds: &Dataset, cfg: &TrainConfig) -> Result<StageOutput> {
    cfg.validate()?;
    if cfg.stage != Stage::One {
        return Err(Error::contract("stage-1 training needs a stage-1 config"));
    }
    let start = Checkpoint {
        stage: Stage::One,
        epoch: 0,
        config: cfg.clone(),
        model: Model::new(cfg.model.clone(), cfg.seed)?,
        optimizers: MODULES.iter().map(|_| cfg.new_optimizer()).collect(),
        rng: stream(cfg.seed, &[tag::SHUFFLE, 1]),
    };
    run(ds, start, cfg.epochs)
}

/// Continues `ckpt` until `epochs` epochs are complete, under its own config.
pub fn resume_stage1(ds: &Dataset, mut ckpt: Checkpoint, epochs: usize) -> Result<StageOutput> {
    if ckpt.stage != Stage::One {
        return Err(Error::contract("resume_stage1 given a stage-2 checkpoint"));
    }
    // the stored config reflects the target actually trained to
    ckpt.config.epochs = epochs;
    run(ds, ckpt, epochs)
}

fn run(ds: &Dataset, mut state: Checkpoint, epochs: usize) -> Result<StageOutput> {
    let cfg = state.config.clone();
    let mc = &cfg.model.f2d;
    if (ds.config.width, ds.config.height) != (mc.width, mc.height) {
        return Err(Error::contract(format!(
            "renders are {}x{}, encoder expects {}x{}",
            ds.config.width, ds.config.height, mc.width, mc.height
        )));
    }
    let pool = image_pool(ds);
    let k = cfg.batch_size;
    if pool.is_empty() || k > pool.len() {
        return Err(Error::contract(format!("batch of {k} images from a pool of {}", pool.len())));
    }
    let sim = cfg.sim()?;
    let steps = pool.len() / k;
    let flat = mc.flat_dim();
    let mut log = Vec::new();
    let mut norms = [0.0; 6];

    for epoch in state.epoch..epochs {
        let lr = cfg.schedule.lr(cfg.lr, epoch)?;
        let momentum = cfg.bn_momentum(epoch);
        // each epoch permutes the canonical order, so a resumed run sees
        // the same permutations as an uninterrupted one
        let mut order = pool.clone();
        order.shuffle(&mut state.rng);
        for step in 0..steps {
            let items = &order[step * k..(step + 1) * k];
            let mut views: Vec<Image> = Vec::with_capacity(2 * k);
            for a in 0..2u64 {
                for (i, &(o, j)) in items.iter().enumerate() {
                    let mut rng = stream(cfg.augmentation.seed, &[tag::AUGMENT, epoch as u64, step as u64, i as u64, a]);
                    views.push(augment_image(&ds.objects[o].views[j], &cfg.augmentation, &mut rng));
                }
            }
            let refs: Vec<&Image> = views.iter().collect();
            let x = images_to_tensor(&refs)?;

            let model = &state.model;
            let mut tape = Tape::new();
            let pf = model.f2d.params.bind(&mut tape, true);
            let pg = model.g2d.params.bind(&mut tape, true);
            let xv = tape.constant(x);
            let (fmap, stats) = model.f2d.forward(&mut tape, &pf, xv, Mode::Train)?;
            let h = tape.reshape(fmap, [2 * k, flat])?;
            let z = model.g2d.forward(&mut tape, &pg, h)?;
            let first: Vec<usize> = (0..k).collect();
            let second: Vec<usize> = (k..2 * k).collect();
            let za = tape.gather_rows(z, &first)?;
            let zb = tape.gather_rows(z, &second)?;
            let loss = pair_contrastive_var_tolerant(&mut tape, za, zb, sim)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("stage-1 loss {value} at epoch {} step {}", epoch + 1, step + 1)));
            }
            let mut grads = tape.backward(loss)?;
            apply_gradients(&mut state.model, &mut state.optimizers, &[(F2D, pf), (G2D, pg)], &mut grads, lr, &mut norms)?;
            state.model.f2d.params.update_running(&stats, momentum)?;
            log.push(LossRecord { epoch: epoch + 1, step: step + 1, total: value, global: 0.0, pointwise: 0.0, lr });
        }
        state.epoch = epoch + 1;
    }
    Ok(StageOutput { checkpoint: state, log, grad_norms: norms })
}
