//! Stage 2: the point encoder learns to match the image encoder, globally
//! (pooled over views and points) and per pixel-point correspondence.

use rand::seq::SliceRandom;

use crate::data::{Dataset, Split};
use crate::encoders::{clouds_to_tensor, encode_image, images_to_tensor, Mode};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::losses::{combined_var, global_transfer_var, pair_contrastive_var_tolerant, LossWeights, SimilarityConfig};
use crate::numcore::{BatchStats, Tape, Tensor, Var};
use crate::renderer::{CorrespondenceSet, Image};
use crate::seeding::{stream, tag};

use super::checkpoint::Checkpoint;
use super::config::{G2dHead, Stage, TrainConfig};
use super::model::{Model, F2D, F3D, G2D, G2D_T, G3D, MODULES, U2D};
use super::sampling::sample_pixel_point_batch;
use super::{apply_gradients, LossRecord, StageOutput};

/// Inputs of one stage-2 step over `B` objects with `m` views each.
#[derive(Clone, Debug)]
pub struct Stage2Batch {
    /// `[B, L, 3]`.
    pub clouds: Tensor,
    /// Renders `[B·m, 3, H, W]`, object-major; used when the image encoder
    /// runs inside the step.
    pub images: Option<Tensor>,
    /// Precomputed image features `[B·m, C1, H1, W1]`; used otherwise.
    pub features: Option<Tensor>,
    pub views: usize,
    /// `(image row, v, u)` of each pair's pixel.
    pub pixels: Vec<(usize, usize, usize)>,
    /// Row of each pair's point in the `[B·L, C2]` point features.
    pub points: Vec<usize>,
}

impl Stage2Batch {
    /// Assembles a batch from per-object data. `entries` index `set`, whose
    /// `object_id`s index `objects`.
    pub fn build(
        objects: &[(&PointCloud, &[Image], Option<&Tensor>)],
        set: &CorrespondenceSet,
        entries: &[usize],
        position: impl Fn(usize) -> Option<usize>,
    ) -> Result<Self> {
        let first = objects.first().ok_or_else(|| Error::contract("stage-2 batch without objects"))?;
        let m = first.1.len();
        if m == 0 || objects.iter().any(|o| o.1.len() != m) {
            return Err(Error::contract("every object in a stage-2 batch needs the same positive number of views"));
        }
        let clouds: Vec<&PointCloud> = objects.iter().map(|o| o.0).collect();
        let l = clouds[0].len();
        let clouds = clouds_to_tensor(&clouds)?;
        let cached: Option<Vec<&Tensor>> = objects.iter().map(|o| o.2).collect();
        let (images, features) = match cached {
            Some(fs) => {
                let s = fs[0].shape().to_vec();
                let data: Vec<f64> = fs.iter().flat_map(|t| t.data().iter().copied()).collect();
                (None, Some(Tensor::new([objects.len() * m, s[1], s[2], s[3]], data)?))
            }
            None => {
                let refs: Vec<&Image> = objects.iter().flat_map(|o| o.1.iter()).collect();
                (Some(images_to_tensor(&refs)?), None)
            }
        };
        let mut pixels = Vec::with_capacity(entries.len());
        let mut points = Vec::with_capacity(entries.len());
        for &i in entries {
            let e = set.entries.get(i).ok_or_else(|| Error::contract(format!("entry {i} outside set of {}", set.len())))?;
            let b = position(e.object_id).ok_or_else(|| Error::contract(format!("entry {i}: object {} not in batch", e.object_id)))?;
            if e.view_id >= m || e.point_index >= l {
                return Err(Error::contract(format!("entry {i}: view {} / point {} out of range", e.view_id, e.point_index)));
            }
            pixels.push((b * m + e.view_id, e.pixel_v, e.pixel_u));
            points.push(b * l + e.point_index);
        }
        Ok(Self { clouds, images, features, views: m, pixels, points })
    }

    pub fn objects(&self) -> usize {
        self.clouds.shape()[0]
    }
}

/// Tape vars of one stage-2 objective evaluation.
pub struct Stage2Losses {
    pub total: Var,
    pub global: Var,
    pub pointwise: Var,
    /// Batch statistics of the point encoder, for the running buffers.
    pub f3d_stats: Vec<BatchStats>,
}

/// The stage-2 objective. `bound[k]` holds the vars of module `k`
/// (see [`MODULES`]); `head` selects the image-side global head.
pub fn stage2_objective(
    tape: &mut Tape,
    model: &Model,
    bound: &[Vec<Var>],
    head: usize,
    batch: &Stage2Batch,
    sim: SimilarityConfig,
    weights: LossWeights,
) -> Result<Stage2Losses> {
    let b = batch.objects();
    let m = batch.views;
    let fmap = match (&batch.features, &batch.images) {
        (Some(f), _) => tape.constant(f.clone()),
        (None, Some(x)) => {
            let xv = tape.constant(x.clone());
            model.f2d.forward(tape, &bound[F2D], xv, Mode::Eval)?.0
        }
        (None, None) => return Err(Error::contract("stage-2 batch has neither images nor features")),
    };
    let flat = model.config.f2d.flat_dim();
    let per_view = tape.reshape(fmap, [b, m, flat])?;
    let pooled2d = tape.max_pool(per_view, 1)?;
    let head_net = if head == G2D { &model.g2d } else { &model.g2d_t };
    let z2g = head_net.forward(tape, &bound[head], pooled2d)?;

    let clouds = tape.constant(batch.clouds.clone());
    let (rows, f3d_stats) = model.f3d.forward_rows(tape, &bound[F3D], clouds, Mode::Train)?;
    let l = batch.clouds.shape()[1];
    let c2 = model.f3d.config.out_channels();
    let per_point = tape.reshape(rows, [b, l, c2])?;
    let pooled3d = tape.max_pool(per_point, 1)?;
    let z3g = model.g3d.forward(tape, &bound[G3D], pooled3d)?;
    let global = global_transfer_var(tape, z2g, z3g)?;

    let z2p = model.u2d.forward_pixels(tape, &bound[U2D], fmap, &batch.pixels)?;
    let sel = tape.gather_rows(rows, &batch.points)?;
    let z3p = model.g3d.forward(tape, &bound[G3D], sel)?;
    let pointwise = pair_contrastive_var_tolerant(tape, z2p, z3p, sim)?;
    let total = combined_var(tape, global, pointwise, weights)?;
    Ok(Stage2Losses { total, global, pointwise, f3d_stats })
}

fn head_index(cfg: &TrainConfig) -> usize {
    match cfg.g2d_head {
        G2dHead::Separate => G2D_T,
        G2dHead::Shared => G2D,
    }
}

/// Which modules receive gradients under `cfg`.
pub fn trainable(cfg: &TrainConfig) -> [bool; 6] {
    let mut t = [false; 6];
    t[F3D] = true;
    t[G3D] = true;
    t[U2D] = cfg.weights.pointwise > 0.0;
    t[head_index(cfg)] = cfg.weights.global > 0.0 && cfg.train_g2d;
    t[F2D] = cfg.finetune_f2d;
    t
}

pub fn pretrain_stage2(ds: &Dataset, stage1: &Checkpoint, cfg: &TrainConfig) -> Result<StageOutput> {
    pretrain_stage2_observed(ds, stage1, cfg, &mut |_, _| Ok(()))
}

/// As [`pretrain_stage2`], calling `observer(epoch, model)` before the
/// first epoch and after every completed one.
pub fn pretrain_stage2_observed(
    ds: &Dataset,
    stage1: &Checkpoint,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(usize, &Model) -> Result<()>,
) -> Result<StageOutput> {
    cfg.validate()?;
    if cfg.stage != Stage::Two {
        return Err(Error::contract("stage-2 training needs a stage-2 config"));
    }
    if stage1.stage != Stage::One {
        return Err(Error::contract("stage 2 must start from a stage-1 checkpoint"));
    }
    if stage1.config.model != cfg.model {
        return Err(Error::contract(format!(
            "checkpoint model {:?} does not match configured model {:?}",
            stage1.config.model, cfg.model
        )));
    }
    let mut model = stage1.model.clone();
    model.g2d_t = model.g2d.clone();
    let start = Checkpoint {
        stage: Stage::Two,
        epoch: 0,
        config: cfg.clone(),
        model,
        optimizers: MODULES.iter().map(|_| cfg.new_optimizer()).collect(),
        rng: stream(cfg.seed, &[tag::SHUFFLE, 2]),
    };
    run(ds, start, cfg.epochs, observer)
}

pub fn resume_stage2(
    ds: &Dataset,
    mut ckpt: Checkpoint,
    epochs: usize,
    observer: &mut dyn FnMut(usize, &Model) -> Result<()>,
) -> Result<StageOutput> {
    if ckpt.stage != Stage::Two {
        return Err(Error::contract("resume_stage2 given a stage-1 checkpoint"));
    }
    // the stored config reflects the target actually trained to
    ckpt.config.epochs = epochs;
    run(ds, ckpt, epochs, observer)
}

fn run(ds: &Dataset, mut state: Checkpoint, epochs: usize, observer: &mut dyn FnMut(usize, &Model) -> Result<()>) -> Result<StageOutput> {
    let cfg = state.config.clone();
    let mc = &cfg.model.f2d;
    if (ds.config.width, ds.config.height) != (mc.width, mc.height) {
        return Err(Error::contract(format!(
            "renders are {}x{}, encoder expects {}x{}",
            ds.config.width, ds.config.height, mc.width, mc.height
        )));
    }
    let pool: Vec<usize> = (0..ds.objects.len()).filter(|&i| ds.objects[i].split == Split::Train).collect();
    if pool.is_empty() {
        return Err(Error::contract("no training objects"));
    }
    let sim = cfg.sim()?;
    let head = head_index(&cfg);
    let train = trainable(&cfg);
    // `steps` batches whose sizes differ by at most one
    let steps = pool.len().div_ceil(cfg.batch_size.min(pool.len()));
    let bounds: Vec<usize> = (0..=steps).map(|s| s * pool.len() / steps).collect();
    let k = if cfg.pairs_per_epoch > 0 { (cfg.pairs_per_epoch / steps).max(1) } else { cfg.pair_batch };

    // frozen image encoder: its features are fixed for the whole stage
    let cache: Vec<Option<Tensor>> = if cfg.finetune_f2d {
        vec![None; ds.objects.len()]
    } else {
        let mut c = vec![None; ds.objects.len()];
        for &i in &pool {
            let refs: Vec<&Image> = ds.objects[i].views.iter().collect();
            c[i] = Some(encode_image(&state.model.f2d, &images_to_tensor(&refs)?)?);
        }
        c
    };

    let mut log = Vec::new();
    let mut norms = [0.0; 6];
    if state.epoch == 0 {
        observer(0, &state.model)?;
    }
    for epoch in state.epoch..epochs {
        let lr = cfg.schedule.lr(cfg.lr, epoch)?;
        let momentum = cfg.bn_momentum(epoch);
        let mut order = pool.clone();
        order.shuffle(&mut state.rng);
        for step in 0..steps {
            let chunk = &order[bounds[step]..bounds[step + 1]];
            let mut set = CorrespondenceSet::default();
            for &i in chunk {
                set.entries.extend(ds.objects[i].correspondences.entries.iter().map(|e| {
                    let mut e = *e;
                    e.object_id = i;
                    e
                }));
            }
            let mut rng = stream(cfg.seed, &[tag::PAIRS, epoch as u64, step as u64]);
            let entries = sample_pixel_point_batch(&set, k, cfg.pair_policy, &mut rng)?;
            let objects: Vec<_> = chunk.iter().map(|&i| (&ds.objects[i].cloud, ds.objects[i].views.as_slice(), cache[i].as_ref())).collect();
            let batch = Stage2Batch::build(&objects, &set, &entries, |id| chunk.iter().position(|&i| i == id))?;

            let model = &state.model;
            let mut tape = Tape::new();
            let bound: Vec<Vec<Var>> = (0..MODULES.len()).map(|m| model.params(m).bind(&mut tape, train[m])).collect();
            let losses = stage2_objective(&mut tape, model, &bound, head, &batch, sim, cfg.weights)?;
            let total = tape.value(losses.total).item()?;
            let global = tape.value(losses.global).item()?;
            let pointwise = tape.value(losses.pointwise).item()?;
            if !total.is_finite() {
                return Err(Error::Numeric(format!("stage-2 loss {total} at epoch {} step {}", epoch + 1, step + 1)));
            }
            let stats = losses.f3d_stats;
            let mut grads = tape.backward(losses.total)?;
            let active: Vec<(usize, Vec<Var>)> = bound.into_iter().enumerate().filter(|(m, _)| train[*m]).collect();
            apply_gradients(&mut state.model, &mut state.optimizers, &active, &mut grads, lr, &mut norms)?;
            state.model.f3d.params.update_running(&stats, momentum)?;
            log.push(LossRecord { epoch: epoch + 1, step: step + 1, total, global, pointwise, lr });
        }
        state.epoch = epoch + 1;
        observer(state.epoch, &state.model)?;
    }
    Ok(StageOutput { checkpoint: state, log, grad_norms: norms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check_many;
    use crate::pipeline::stage1::pretrain_stage1;
    use crate::pipeline::stage1::tests::{tiny_data, tiny_model, tiny_stage1};

    fn tiny_stage2(epochs: usize, seed: u64, lg: f64, lp: f64) -> TrainConfig {
        let mut c = TrainConfig::stage2().with_seed(seed);
        c.epochs = epochs;
        c.batch_size = 4;
        c.pair_batch = 12;
        c.weights = LossWeights::new(lg, lp).unwrap();
        c.model = tiny_model();
        c
    }

    fn stage1(ds: &Dataset) -> Checkpoint {
        pretrain_stage1(ds, &tiny_stage1(1, 0)).unwrap().checkpoint
    }

    #[test]
    fn logged_total_is_weighted_sum() {
        let ds = tiny_data(4);
        let s1 = stage1(&ds);
        for (lg, lp) in [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.3, 2.0)] {
            let out = pretrain_stage2(&ds, &s1, &tiny_stage2(2, 1, lg, lp)).unwrap();
            assert_eq!(out.log.len(), 2 * 3);
            for r in &out.log {
                assert!((r.total - (lg * r.global + lp * r.pointwise)).abs() <= 1e-12);
                assert!(r.global > 0.0 && r.pointwise > 0.0);
            }
        }
    }

    #[test]
    fn global_only_never_touches_u2d() {
        let ds = tiny_data(5);
        let s1 = stage1(&ds);
        let out = pretrain_stage2(&ds, &s1, &tiny_stage2(2, 2, 1.0, 0.0)).unwrap();
        assert_eq!(out.grad_norms[U2D], 0.0);
        assert_eq!(out.checkpoint.model.u2d, s1.model.u2d);
        assert!(out.grad_norms[F3D] > 0.0 && out.grad_norms[G2D_T] > 0.0);
        let out = pretrain_stage2(&ds, &s1, &tiny_stage2(2, 2, 0.0, 1.0)).unwrap();
        assert_eq!(out.grad_norms[G2D_T], 0.0);
        assert!(out.grad_norms[U2D] > 0.0);
    }

    #[test]
    fn image_encoder_stays_frozen() {
        let ds = tiny_data(6);
        let s1 = stage1(&ds);
        let mut seen = Vec::new();
        let out = pretrain_stage2_observed(&ds, &s1, &tiny_stage2(3, 3, 1.0, 1.0), &mut |e, m| {
            assert_eq!(m.f2d, s1.model.f2d);
            assert_eq!(m.g2d, s1.model.g2d);
            seen.push(e);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert_eq!(out.grad_norms[F2D], 0.0);
        assert_ne!(out.checkpoint.model.f3d, s1.model.f3d);
    }

    #[test]
    fn resume_is_bit_exact() {
        let ds = tiny_data(7);
        let s1 = stage1(&ds);
        let full = pretrain_stage2(&ds, &s1, &tiny_stage2(4, 4, 1.0, 1.0)).unwrap();
        let half = pretrain_stage2(&ds, &s1, &tiny_stage2(2, 4, 1.0, 1.0)).unwrap();
        let ckpt = Checkpoint::decode(&half.checkpoint.encode()).unwrap();
        let rest = resume_stage2(&ds, ckpt, 4, &mut |_, _| Ok(())).unwrap();
        let tail: Vec<_> = full.log.iter().filter(|r| r.epoch > 2).cloned().collect();
        assert_eq!(rest.log, tail);
        assert_eq!(rest.checkpoint.model, full.checkpoint.model);
    }

    #[test]
    fn mismatched_checkpoint_rejected() {
        let ds = tiny_data(8);
        let s1 = stage1(&ds);
        let mut c = tiny_stage2(1, 0, 1.0, 1.0);
        c.model.embed_dim = 6;
        assert!(matches!(pretrain_stage2(&ds, &s1, &c), Err(Error::Contract(_))));
        assert!(pretrain_stage2(&ds, &s1, &tiny_stage1(1, 0)).is_err());
    }

    #[test]
    fn finetuning_moves_the_image_encoder() {
        let ds = tiny_data(9);
        let s1 = stage1(&ds);
        let mut c = tiny_stage2(1, 0, 1.0, 1.0);
        c.finetune_f2d = true;
        let out = pretrain_stage2(&ds, &s1, &c).unwrap();
        assert_ne!(out.checkpoint.model.f2d, s1.model.f2d);
        // frozen and fine-tuned runs agree on the first step's losses
        let frozen = pretrain_stage2(&ds, &s1, &tiny_stage2(1, 0, 1.0, 1.0)).unwrap();
        assert!((out.log[0].total - frozen.log[0].total).abs() < 1e-12);
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let ds = tiny_data(10);
        let model = Model::new(tiny_model(), 3).unwrap();
        let objs: Vec<_> = [0usize, 5].iter().map(|&i| (&ds.objects[i].cloud, ds.objects[i].views.as_slice(), None)).collect();
        let mut set = CorrespondenceSet::default();
        for (pos, &i) in [0usize, 5].iter().enumerate() {
            set.entries.extend(ds.objects[i].correspondences.entries.iter().map(|e| {
                let mut e = *e;
                e.object_id = pos;
                e
            }));
        }
        let entries = sample_pixel_point_batch(&set, 6, super::super::PairPolicy::CrossObject, &mut stream(0, &[1])).unwrap();
        let batch = Stage2Batch::build(&objs, &set, &entries, Some).unwrap();
        let sim = SimilarityConfig::new(0.5).unwrap();
        let w = LossWeights::default();
        let mods = [U2D, F3D, G3D, G2D_T];
        let points: Vec<Tensor> = mods.iter().flat_map(|&m| model.params(m).values().to_vec()).collect();
        let sizes: Vec<usize> = mods.iter().map(|&m| model.params(m).values().len()).collect();
        let worst = grad_check_many(
            |tape, vars| {
                let mut bound: Vec<Vec<Var>> = (0..MODULES.len()).map(|m| model.params(m).bind(tape, false)).collect();
                let mut at = 0;
                for (&m, &n) in mods.iter().zip(&sizes) {
                    bound[m] = vars[at..at + n].to_vec();
                    at += n;
                }
                Ok(stage2_objective(tape, &model, &bound, G2D_T, &batch, sim, w)?.total)
            },
            &points,
            1e-5,
            Some(12),
        )
        .unwrap();
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }
}
