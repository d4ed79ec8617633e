//! Finite-difference checks of every differentiable piece, from single ops
//! up to a full stage-2 step on two objects.

use rand::Rng;

use crate::data::shapes::ShapeClass;
use crate::data::{generate_dataset, DataConfig};
use crate::encoders::{Encoder2DConfig, Mode};
use crate::error::Result;
use crate::losses::{combined_var, exp_cosine_sim_var, global_transfer_var, pair_contrastive_var, LossWeights, SimilarityConfig};
use crate::numcore::{grad_check_many, Tape, Tensor, Var};
use crate::pipeline::model::{G2D, G2D_T, F2D, F3D, G3D, U2D};
use crate::pipeline::stage2::stage2_objective;
use crate::pipeline::{sample_pixel_point_batch, Model, ModelConfig, PairPolicy, Stage2Batch, MODULES};
use crate::renderer::CorrespondenceSet;
use crate::seeding::stream;

/// Step of the central differences.
pub const GRAD_EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.error <= GRAD_TOL
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, &[0x6772]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches length")
}

/// Contracts `y` with fixed random weights, so every output coordinate
/// carries a distinct gradient.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(random(t.shape(y), seed));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn check(name: &'static str, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, points: &[Tensor], max_coords: Option<usize>) -> Result<GradCase> {
    Ok(GradCase { name, error: grad_check_many(f, points, GRAD_EPS, max_coords)? })
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        f2d: Encoder2DConfig { widths: vec![4, 8], width: 16, height: 16 },
        f3d_widths: vec![8, 16],
        head_hidden: 16,
        embed_dim: 8,
    }
}

/// Runs every case. An `Err` means a case could not be evaluated at all.
pub fn gradient_suite() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let x = random(&[2, 3, 6, 6], 1);

    out.push(check("conv2d", |t, v| { let y = t.conv2d(v[0], v[1], 2, 1)?; weighted_sum(t, y, 3) }, &[x.clone(), random(&[4, 3, 3, 3], 2)], None)?);
    let (g, b) = (random(&[3], 4), random(&[3], 5));
    out.push(check(
        "batch_norm/train",
        |t, v| { let (y, _) = t.batch_norm(v[0], v[1], v[2], None)?; weighted_sum(t, y, 6) },
        &[x.clone(), g.clone(), b.clone()],
        None,
    )?);
    let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    out.push(check(
        "batch_norm/eval",
        |t, v| { let (y, _) = t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)))?; weighted_sum(t, y, 6) },
        &[x.clone(), g, b],
        None,
    )?);
    out.push(check("max_pool", |t, v| { let y = t.max_pool(v[0], 1)?; weighted_sum(t, y, 8) }, std::slice::from_ref(&x), None)?);
    let cloud_rows = random(&[2, 5, 4], 9);
    out.push(check("max_pool/points", |t, v| { let y = t.max_pool(v[0], 1)?; weighted_sum(t, y, 10) }, &[cloud_rows], None)?);
    out.push(check("upsample2x", |t, v| { let y = t.upsample2x(v[0])?; weighted_sum(t, y, 7) }, std::slice::from_ref(&x), None)?);
    out.push(check("relu", |t, v| { let y = t.relu(v[0]); weighted_sum(t, y, 11) }, &[x], None)?);
    let a = random(&[3, 4], 12);
    out.push(check("normalize_rows", |t, v| { let y = t.normalize_rows(v[0])?; weighted_sum(t, y, 13) }, std::slice::from_ref(&a), None)?);
    out.push(check(
        "matmul",
        |t, v| { let y = t.matmul_t(v[0], v[1], false, true)?; weighted_sum(t, y, 14) },
        &[a, random(&[5, 4], 15)],
        None,
    )?);

    let sim = SimilarityConfig::new(0.5)?;
    out.push(check("psi", |t, v| exp_cosine_sim_var(t, v[0], v[1], sim), &[random(&[8], 16), random(&[8], 17)], None)?);
    let (za, zb) = (random(&[3, 5], 18), random(&[3, 5], 19));
    // the 2D contrastive loss sees one [2k, d] matrix split into halves
    let z = Tensor::new([6, 5], za.data().iter().chain(zb.data()).copied().collect())?;
    out.push(check(
        "loss_2d_ntxent",
        |t, v| {
            let first = t.gather_rows(v[0], &[0, 1, 2])?;
            let second = t.gather_rows(v[0], &[3, 4, 5])?;
            pair_contrastive_var(t, first, second, sim)
        },
        &[z],
        None,
    )?);
    out.push(check("loss_global", |t, v| global_transfer_var(t, v[0], v[1]), &[za.clone(), zb.clone()], None)?);
    out.push(check("loss_pointwise", |t, v| pair_contrastive_var(t, v[0], v[1], sim), &[za.clone(), zb.clone()], None)?);
    let w = LossWeights::new(0.7, 1.3)?;
    out.push(check(
        "loss_combined",
        |t, v| {
            let g = global_transfer_var(t, v[0], v[1])?;
            let p = pair_contrastive_var(t, v[0], v[1], sim)?;
            combined_var(t, g, p, w)
        },
        &[za, zb],
        None,
    )?);

    let (stage1, stage2) = end_to_end(sim)?;
    out.push(stage1);
    out.push(stage2);
    Ok(out)
}

/// Whole-network cases on a two-object dataset, probing a spread of
/// coordinates of every parameter tensor.
fn end_to_end(sim: SimilarityConfig) -> Result<(GradCase, GradCase)> {
    let ds = generate_dataset(&DataConfig {
        classes: vec![ShapeClass::Sphere, ShapeClass::Cube],
        per_class: 1,
        points: 32,
        surface_samples: 256,
        views: 2,
        width: 16,
        height: 16,
        test_fraction: 0.0,
        seed: 5,
        ..DataConfig::default()
    })?;
    let model = Model::new(tiny_model(), 3)?;

    let images: Vec<&crate::renderer::Image> = ds.objects.iter().map(|o| &o.views[0]).chain(ds.objects.iter().map(|o| &o.views[1])).collect();
    let x = crate::encoders::images_to_tensor(&images)?;
    let flat = model.config.f2d.flat_dim();
    let s1_points: Vec<Tensor> = [F2D, G2D].iter().flat_map(|&m| model.params(m).values().to_vec()).collect();
    let n_f2d = model.params(F2D).values().len();
    let stage1 = check(
        "end_to_end/stage1",
        |t, v| {
            let xv = t.constant(x.clone());
            let (fmap, _) = model.f2d.forward(t, &v[..n_f2d], xv, Mode::Train)?;
            let h = t.reshape(fmap, [4, flat])?;
            let z = model.g2d.forward(t, &v[n_f2d..], h)?;
            let first = t.gather_rows(z, &[0, 1])?;
            let second = t.gather_rows(z, &[2, 3])?;
            pair_contrastive_var(t, first, second, sim)
        },
        &s1_points,
        Some(12),
    )?;

    let objs: Vec<_> = ds.objects.iter().map(|o| (&o.cloud, o.views.as_slice(), None)).collect();
    let mut set = CorrespondenceSet::default();
    for (pos, o) in ds.objects.iter().enumerate() {
        set.entries.extend(o.correspondences.entries.iter().map(|e| {
            let mut e = *e;
            e.object_id = pos;
            e
        }));
    }
    let entries = sample_pixel_point_batch(&set, 6, PairPolicy::CrossObject, &mut stream(0, &[1]))?;
    let batch = Stage2Batch::build(&objs, &set, &entries, Some)?;
    let mods = [U2D, F3D, G3D, G2D_T];
    let points: Vec<Tensor> = mods.iter().flat_map(|&m| model.params(m).values().to_vec()).collect();
    let sizes: Vec<usize> = mods.iter().map(|&m| model.params(m).values().len()).collect();
    let stage2 = check(
        "end_to_end/stage2",
        |tape, vars| {
            let mut bound: Vec<Vec<Var>> = (0..MODULES.len()).map(|m| model.params(m).bind(tape, false)).collect();
            let mut at = 0;
            for (&m, &n) in mods.iter().zip(&sizes) {
                bound[m] = vars[at..at + n].to_vec();
                at += n;
            }
            Ok(stage2_objective(tape, &model, &bound, G2D_T, &batch, sim, LossWeights::default())?.total)
        },
        &points,
        Some(12),
    )?;
    Ok((stage1, stage2))
}
