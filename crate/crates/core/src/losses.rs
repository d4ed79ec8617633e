//! Similarity kernel and the four training objectives, defined over
//! already-projected embedding vectors.
//!
//! Every loss has a tape form (for training) and a plain `f64` form that
//! records the same ops on a throwaway tape.

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Temperature of the exponential cosine similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityConfig {
    tau: f64,
}

impl SimilarityConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::contract(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// Weights of the global and point-wise transfer terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub global: f64,
    pub pointwise: f64,
}

impl LossWeights {
    pub fn new(global: f64, pointwise: f64) -> Result<Self> {
        if global < 0.0 || pointwise < 0.0 || !global.is_finite() || !pointwise.is_finite() {
            return Err(Error::contract(format!("loss weights must be finite and non-negative, got ({global}, {pointwise})")));
        }
        if global == 0.0 && pointwise == 0.0 {
            return Err(Error::contract("at least one loss weight must be positive"));
        }
        Ok(Self { global, pointwise })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { global: 1.0, pointwise: 1.0 }
    }
}

/// `k` positive pairs. For the image objective these are the two
/// augmentations of each image; for the transfer objective the pixel and
/// point embeddings of each correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

pub type EmbeddingBatch2D = PairBatch;
pub type PixelPointBatch = PairBatch;

impl PairBatch {
    pub fn new(first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<Self> {
        if first.is_empty() || first.len() != second.len() {
            return Err(Error::contract(format!("pair batch needs k >= 1 matched pairs, got {} and {}", first.len(), second.len())));
        }
        let d = first[0].len();
        if d == 0 || first.iter().chain(&second).any(|v| v.len() != d) {
            return Err(Error::dim("pair_batch", "embeddings do not share one positive dimension"));
        }
        Ok(Self { first, second })
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    fn tensors(&self) -> Result<(Tensor, Tensor)> {
        let k = self.len();
        let d = self.first[0].len();
        Ok((
            Tensor::new([k, d], self.first.concat())?,
            Tensor::new([k, d], self.second.concat())?,
        ))
    }
}

fn as_row(tape: &mut Tape, v: Var) -> Result<Var> {
    let d = tape.value(v).len();
    tape.reshape(v, [1, d])
}

/// `exp(cos(u, v) / τ)` on the tape.
pub fn exp_cosine_sim_var(tape: &mut Tape, u: Var, v: Var, sim: SimilarityConfig) -> Result<Var> {
    let (u, v) = (as_row(tape, u)?, as_row(tape, v)?);
    let un = tape.normalize_rows(u)?;
    let vn = tape.normalize_rows(v)?;
    let prod = tape.mul(un, vn)?;
    let cos = tape.sum(prod);
    let scaled = tape.scale(cos, 1.0 / sim.tau);
    tape.exp(scaled)
}

pub fn exp_cosine_sim(u: &[f64], v: &[f64], sim: SimilarityConfig) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::dim("exp_cosine_sim", format!("lengths {} and {}", u.len(), v.len())));
    }
    let mut tape = Tape::new();
    let uv = tape.constant(Tensor::from_vec(u.to_vec()));
    let vv = tape.constant(Tensor::from_vec(v.to_vec()));
    let out = exp_cosine_sim_var(&mut tape, uv, vv, sim)?;
    tape.value(out).item()
}

/// Symmetric pair-contrastive objective shared by the image loss and the
/// pixel-point loss.
///
/// Row `i` of `first` is anchored against its partner `second[i]`; the
/// negatives are both members of every other pair, never the anchor itself.
/// The same holds with the roles swapped. The two log-ratio terms are summed
/// per pair and averaged over the `k` pairs, all in log-sum-exp form.
pub fn pair_contrastive_var(tape: &mut Tape, first: Var, second: Var, sim: SimilarityConfig) -> Result<Var> {
    pair_contrastive_impl(tape, first, second, sim, false)
}

/// Training form of [`pair_contrastive_var`]: an all-zero embedding (a ReLU
/// network can emit one) has cosine 0 with everything and no gradient,
/// instead of being rejected.
pub fn pair_contrastive_var_tolerant(tape: &mut Tape, first: Var, second: Var, sim: SimilarityConfig) -> Result<Var> {
    pair_contrastive_impl(tape, first, second, sim, true)
}

fn pair_contrastive_impl(tape: &mut Tape, first: Var, second: Var, sim: SimilarityConfig, zero_ok: bool) -> Result<Var> {
    let s1 = tape.shape(first).to_vec();
    if s1.len() != 2 || tape.shape(second) != s1.as_slice() {
        return Err(Error::dim("pair_contrastive", format!("{:?} vs {:?}", s1, tape.shape(second))));
    }
    let k = s1[0];
    let z = tape.concat_rows(&[first, second])?;
    let zn = if zero_ok { tape.normalize_rows_or_zero(z)? } else { tape.normalize_rows(z)? };
    let cos = tape.matmul_t(zn, zn, false, true)?;
    let logits = tape.scale(cos, 1.0 / sim.tau);
    let lse = tape.offdiag_logsumexp(logits)?;
    let n = 2 * k;
    let positives: Vec<usize> = (0..n).map(|r| r * n + (r + k) % n).collect();
    let pos = tape.take(logits, &positives)?;
    let lse_sum = tape.sum(lse);
    let pos_sum = tape.sum(pos);
    let total = tape.sub(lse_sum, pos_sum)?;
    Ok(tape.scale(total, 1.0 / k as f64))
}

fn pair_loss(batch: &PairBatch, sim: SimilarityConfig) -> Result<f64> {
    let (a, b) = batch.tensors()?;
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let out = pair_contrastive_var(&mut tape, av, bv, sim)?;
    tape.value(out).item()
}

/// Contrastive loss over two augmentations of each of `k` images.
pub fn loss_2d_ntxent(batch: &EmbeddingBatch2D, sim: SimilarityConfig) -> Result<f64> {
    pair_loss(batch, sim)
}

/// Contrastive loss over `k` pixel-point embedding pairs; `first` holds the
/// pixel side.
pub fn loss_pointwise_transfer(batch: &PixelPointBatch, sim: SimilarityConfig) -> Result<f64> {
    pair_loss(batch, sim)
}

/// Mean squared Euclidean distance between matching rows.
pub fn global_transfer_var(tape: &mut Tape, image_side: Var, point_side: Var) -> Result<Var> {
    let s = tape.shape(image_side).to_vec();
    if s.len() != 2 || tape.shape(point_side) != s.as_slice() {
        return Err(Error::dim("global_transfer", format!("image side {:?} vs point side {:?}", s, tape.shape(point_side))));
    }
    let diff = tape.sub(image_side, point_side)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / s[0] as f64))
}

pub fn loss_global_transfer(image_globals: &[Vec<f64>], point_globals: &[Vec<f64>]) -> Result<f64> {
    if image_globals.is_empty() || image_globals.len() != point_globals.len() {
        return Err(Error::contract(format!("{} image vectors vs {} point vectors", image_globals.len(), point_globals.len())));
    }
    let d = image_globals[0].len();
    if d == 0 || image_globals.iter().chain(point_globals).any(|v| v.len() != d) {
        return Err(Error::contract("global vectors differ in dimension"));
    }
    let n = image_globals.len();
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new([n, d], image_globals.concat())?);
    let b = tape.constant(Tensor::new([n, d], point_globals.concat())?);
    let out = global_transfer_var(&mut tape, a, b)?;
    tape.value(out).item()
}

pub fn combined_var(tape: &mut Tape, global: Var, pointwise: Var, w: LossWeights) -> Result<Var> {
    let g = tape.scale(global, w.global);
    let p = tape.scale(pointwise, w.pointwise);
    tape.add(g, p)
}

/// `λ_glb · glb + λ_pnt · pnt`.
pub fn loss_combined(global: f64, pointwise: f64, w: LossWeights) -> Result<f64> {
    if !global.is_finite() || !pointwise.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss component ({global}, {pointwise})")));
    }
    Ok(w.global * global + w.pointwise * pointwise)
}
