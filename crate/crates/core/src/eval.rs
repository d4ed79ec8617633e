//! Frozen-encoder evaluation: embeddings, linear probe, kNN, label-fraction
//! sweeps and embedding similarity statistics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::formats::write_metrics;
use crate::data::{Dataset, Split};
use crate::encoders::{clouds_to_tensor, encode_points, images_to_tensor, Encoder2D, Encoder3D, Mode, ProjectionHead};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::numcore::{Tape, Tensor};
use crate::pipeline::augment::{augment_image, AugmentationSpec};
use crate::renderer::Image;
use crate::seeding::{stream, tag};

/// One row per object.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.rows.len() || self.labels.len() != self.rows.len() {
            return Err(Error::contract("embedding set columns differ in length"));
        }
        let d = self.dim();
        if self.rows.iter().any(|r| r.len() != d || r.iter().any(|x| !x.is_finite())) {
            return Err(Error::contract("embedding rows differ in dimension or are not finite"));
        }
        Ok(())
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

/// Clouds encoded together per call; eval-mode rows do not depend on it.
const EMBED_CHUNK: usize = 32;

/// Element-wise max over the eval-mode per-point features of `f3d`.
pub fn extract_embeddings(f3d: &Encoder3D, objects: &[(usize, usize, &PointCloud)]) -> Result<EmbeddingSet> {
    let mut set = EmbeddingSet::default();
    for chunk in objects.chunks(EMBED_CHUNK) {
        let same = chunk.iter().all(|o| o.2.len() == chunk[0].2.len());
        let parts: Vec<Vec<&PointCloud>> = if same { vec![chunk.iter().map(|o| o.2).collect()] } else { chunk.iter().map(|o| vec![o.2]).collect() };
        for clouds in parts {
            let feats = encode_points(f3d, &clouds_to_tensor(&clouds)?)?;
            let (l, c) = (feats.shape()[1], feats.shape()[2]);
            for n in 0..clouds.len() {
                let mut row = vec![f64::NEG_INFINITY; c];
                for p in 0..l {
                    let off = (n * l + p) * c;
                    for (r, &v) in row.iter_mut().zip(&feats.data()[off..off + c]) {
                        *r = r.max(v);
                    }
                }
                set.rows.push(row);
            }
        }
        set.ids.extend(chunk.iter().map(|o| o.0));
        set.labels.extend(chunk.iter().map(|o| o.1));
    }
    set.validate()?;
    Ok(set)
}

/// Embeddings of every object of `split`.
pub fn embed_split(f3d: &Encoder3D, ds: &Dataset, split: Split) -> Result<EmbeddingSet> {
    let objs: Vec<_> = ds.objects.iter().filter(|o| o.split == split).map(|o| (o.id, o.label, &o.cloud)).collect();
    extract_embeddings(f3d, &objs)
}

/// Leading columns of an embedding file; `e0, e1, ...` follow.
pub const EMBEDDING_COLUMNS: [&str; 3] = ["id", "label", "split"];

/// One row per object of `train` then `test`. Values use the shortest
/// decimal form that parses back to the same `f64`.
pub fn write_embeddings(path: &Path, train: &EmbeddingSet, test: &EmbeddingSet) -> Result<()> {
    let d = train.dim().max(test.dim());
    let names: Vec<String> = (0..d).map(|j| format!("e{j}")).collect();
    let mut header: Vec<&str> = EMBEDDING_COLUMNS.to_vec();
    header.extend(names.iter().map(String::as_str));
    let mut rows = Vec::with_capacity(train.len() + test.len());
    for (set, split) in [(train, Split::Train), (test, Split::Test)] {
        for i in 0..set.len() {
            let mut row = vec![set.ids[i].to_string(), set.labels[i].to_string(), split.to_string()];
            row.extend(set.rows[i].iter().map(f64::to_string));
            rows.push(row);
        }
    }
    write_metrics(path, &header, &rows)
}

/// Inverse of [`write_embeddings`]: `(train, test)`.
pub fn read_embeddings(path: &Path) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let text = crate::data::formats::read_text(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse { line: 1, msg: "empty embedding file".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[..3] != EMBEDDING_COLUMNS {
        return Err(Error::Parse { line: 1, msg: format!("embedding header {header:?}") });
    }
    let (mut train, mut test) = (EmbeddingSet::default(), EmbeddingSet::default());
    for (i, line) in lines.enumerate() {
        let bad = |msg: String| Error::Parse { line: i + 2, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(bad(format!("{} fields, header has {}", f.len(), cols.len())));
        }
        let id = f[0].parse().map_err(|_| bad(format!("id {:?}", f[0])))?;
        let label = f[1].parse().map_err(|_| bad(format!("label {:?}", f[1])))?;
        let split: Split = f[2].parse().map_err(|_| bad(format!("split {:?}", f[2])))?;
        let row = f[3..].iter().map(|v| v.parse().map_err(|_| bad(format!("value {v:?}")))).collect::<Result<Vec<f64>>>()?;
        let set = if split == Split::Train { &mut train } else { &mut test };
        set.ids.push(id);
        set.labels.push(label);
        set.rows.push(row);
    }
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Linear,
    Knn,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Linear => "linear",
            Protocol::Knn => "knn",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Protocol::Linear),
            "knn" => Ok(Protocol::Knn),
            _ => Err(Error::contract(format!("unknown protocol {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub protocol: Protocol,
    pub fraction: f64,
    pub seed: u64,
    pub correct: usize,
    pub total: usize,
    /// `correct / total`.
    pub accuracy: f64,
    /// Per class; `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    pub predictions: Vec<usize>,
}

fn score(protocol: Protocol, fraction: f64, seed: u64, test: &EmbeddingSet, predictions: Vec<usize>, classes: usize) -> ProbeResult {
    let mut hit = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(&test.labels) {
        seen[y] += 1;
        hit[y] += usize::from(p == y);
    }
    let correct: usize = hit.iter().sum();
    let total = test.len();
    let per_class = hit.iter().zip(&seen).map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64)).collect();
    ProbeResult { protocol, fraction, seed, correct, total, accuracy: correct as f64 / total as f64, per_class, predictions }
}

/// Checks the train/test preconditions; returns the class count.
fn check_sets(train: &EmbeddingSet, test: &EmbeddingSet) -> Result<usize> {
    train.validate()?;
    test.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::contract("probe needs non-empty train and test sets"));
    }
    if train.dim() != test.dim() {
        return Err(Error::contract(format!("train dimension {} vs test dimension {}", train.dim(), test.dim())));
    }
    if let Some(id) = test.ids.iter().find(|id| train.ids.contains(id)) {
        return Err(Error::contract(format!("object {id} is in both train and test sets")));
    }
    let classes = train.labels.iter().chain(&test.labels).max().map_or(0, |&m| m + 1);
    if let Some(c) = (0..classes).find(|c| !train.labels.contains(c)) {
        return Err(Error::contract(format!("class {c} has no training example")));
    }
    Ok(classes)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 500, lr: 1.0, weight_decay: 1e-4 }
    }
}

/// Per-feature standardisation with training statistics, then a global
/// `1/√d` so the mean squared row norm is 1 and a unit step is stable.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[Vec<f64>]) -> Self {
        let (n, d) = (rows.len() as f64, rows[0].len());
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let root_d = (d as f64).sqrt();
        let scale = var.iter().map(|v| if *v > 1e-24 { 1.0 / (v.sqrt() * root_d) } else { 0.0 }).collect();
        Self { mean, scale }
    }

    fn apply(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let d = self.mean.len();
        let data = rows.iter().flat_map(|r| r.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) * s)).collect();
        Tensor::new([rows.len(), d], data)
    }
}

/// Multinomial logistic regression by full-batch gradient descent.
pub fn linear_probe(train: &EmbeddingSet, test: &EmbeddingSet, cfg: ProbeConfig, seed: u64) -> Result<ProbeResult> {
    linear_probe_at(train, test, cfg, seed, 1.0)
}

fn linear_probe_at(train: &EmbeddingSet, test: &EmbeddingSet, cfg: ProbeConfig, seed: u64, fraction: f64) -> Result<ProbeResult> {
    let classes = check_sets(train, test)?;
    if cfg.epochs == 0 || !(cfg.lr > 0.0) || cfg.weight_decay < 0.0 {
        return Err(Error::contract(format!("probe config {cfg:?} invalid")));
    }
    let std = Standardizer::fit(&train.rows);
    let x = std.apply(&train.rows)?;
    let (n, d) = (train.len(), train.dim());
    let mut rng = stream(seed, &[tag::PROBE]);
    let mut w: Vec<f64> = (0..d * classes).map(|_| rng.random_range(-0.01..0.01)).collect();
    let mut b = vec![0.0; classes];
    let mut logits = vec![0.0; n * classes];
    for _ in 0..cfg.epochs {
        forward(&x, &w, &b, classes, &mut logits);
        // softmax − one-hot, averaged over rows
        for (r, &y) in train.labels.iter().enumerate() {
            let row = &mut logits[r * classes..(r + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (c, v) in row.iter_mut().enumerate() {
                *v = ((*v - m).exp() / z - f64::from(c == y)) / n as f64;
            }
        }
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        for r in 0..n {
            let g = &logits[r * classes..(r + 1) * classes];
            for (j, &xv) in x.row(r).iter().enumerate() {
                for c in 0..classes {
                    gw[j * classes + c] += xv * g[c];
                }
            }
            for c in 0..classes {
                gb[c] += g[c];
            }
        }
        for (wv, gv) in w.iter_mut().zip(&gw) {
            *wv -= cfg.lr * (gv + cfg.weight_decay * *wv);
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= cfg.lr * gv;
        }
    }
    let xt = std.apply(&test.rows)?;
    let mut out = vec![0.0; test.len() * classes];
    forward(&xt, &w, &b, classes, &mut out);
    let predictions = out.chunks_exact(classes).map(argmax).collect();
    Ok(score(Protocol::Linear, fraction, seed, test, predictions, classes))
}

fn forward(x: &Tensor, w: &[f64], b: &[f64], classes: usize, out: &mut [f64]) {
    let n = x.shape()[0];
    for r in 0..n {
        let row = &mut out[r * classes..(r + 1) * classes];
        row.copy_from_slice(b);
        for (j, &xv) in x.row(r).iter().enumerate() {
            for c in 0..classes {
                row[c] += xv * w[j * classes + c];
            }
        }
    }
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Majority vote of the `k` nearest training rows (Euclidean; equal
/// distances ordered by training index). Vote ties go to the smaller summed
/// distance, then to the lower class.
pub fn knn_classify(train: &EmbeddingSet, test: &EmbeddingSet, k: usize) -> Result<ProbeResult> {
    if train.is_empty() {
        return Err(Error::contract("kNN needs a non-empty training set"));
    }
    if k == 0 || k > train.len() {
        return Err(Error::contract(format!("k = {k} outside 1..={}", train.len())));
    }
    let classes = check_sets(train, test)?;
    let predictions = test
        .rows
        .iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = train.rows.iter().enumerate().map(|(i, r)| (euclid(q, r), i)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![(0usize, 0.0f64); classes];
            for &(dist, i) in &d[..k] {
                votes[train.labels[i]].0 += 1;
                votes[train.labels[i]].1 += dist;
            }
            let mut best = 0;
            for c in 1..classes {
                let (n, s) = votes[c];
                let (bn, bs) = votes[best];
                if n > bn || (n == bn && s < bs) {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(score(Protocol::Knn, 1.0, 0, test, predictions, classes))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices (ascending) of a stratified subsample: `⌈fraction · n_c⌉` of
/// each class `c`. For a fixed seed, a smaller fraction's subsample is
/// contained in a larger one's.
pub fn stratified_subsample(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("fraction {fraction} outside (0, 1]")));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut keep = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let want = fraction * members.len() as f64;
        if want < 1.0 {
            return Err(Error::contract(format!(
                "fraction {fraction} of class {c} ({} examples) is below one example",
                members.len()
            )));
        }
        members.shuffle(&mut stream(seed, &[tag::SUBSAMPLE, c as u64]));
        // guard against 0.1·30 landing a hair above 3
        let n = ((want - 1e-9).ceil() as usize).min(members.len());
        keep.extend_from_slice(&members[..n]);
    }
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepConfig {
    pub probe: ProbeConfig,
    pub knn_k: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { probe: ProbeConfig::default(), knn_k: 5 }
    }
}

/// One result per `(fraction, seed)`, in that order, each trained on a
/// stratified subsample of `train` and scored on all of `test`.
pub fn label_fraction_sweep(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    fractions: &[f64],
    seeds: &[u64],
    protocol: Protocol,
    cfg: SweepConfig,
) -> Result<Vec<ProbeResult>> {
    let mut out = Vec::with_capacity(fractions.len() * seeds.len());
    for &f in fractions {
        for &s in seeds {
            let sub = train.subset(&stratified_subsample(&train.labels, f, s)?);
            let mut r = match protocol {
                Protocol::Linear => linear_probe_at(&sub, test, cfg.probe, s, f)?,
                Protocol::Knn => knn_classify(&sub, test, cfg.knn_k.min(sub.len()))?,
            };
            r.fraction = f;
            r.seed = s;
            out.push(r);
        }
    }
    Ok(out)
}

pub const RESULTS_HEADER: [&str; 4] = ["protocol", "fraction", "seed", "accuracy"];

pub fn write_results(path: &Path, results: &[ProbeResult]) -> Result<()> {
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| vec![r.protocol.to_string(), r.fraction.to_string(), r.seed.to_string(), format!("{:.4}", r.accuracy)])
        .collect();
    write_metrics(path, &RESULTS_HEADER, &rows)
}

/// Mean accuracy over seeds at each fraction, in order of first appearance.
pub fn mean_by_fraction(results: &[ProbeResult]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for r in results {
        match out.iter_mut().find(|(f, _, _)| *f == r.fraction) {
            Some((_, s, n)) => {
                *s += r.accuracy;
                *n += 1;
            }
            None => out.push((r.fraction, r.accuracy, 1)),
        }
    }
    out.into_iter().map(|(f, s, n)| (f, s / n as f64)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingStats {
    pub mean_pos_cos: f64,
    pub mean_neg_cos: f64,
    /// `mean_pos_cos − mean_neg_cos`.
    pub gap: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine", format!("lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (a.iter().map(|x| x * x).sum::<f64>().sqrt(), b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

pub fn embedding_stats(positives: &[(Vec<f64>, Vec<f64>)], negatives: &[(Vec<f64>, Vec<f64>)]) -> Result<EmbeddingStats> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::contract("embedding statistics need positive and negative pairs"));
    }
    let mean = |pairs: &[(Vec<f64>, Vec<f64>)]| -> Result<f64> {
        Ok(pairs.iter().map(|(a, b)| cosine(a, b)).collect::<Result<Vec<_>>>()?.iter().sum::<f64>() / pairs.len() as f64)
    };
    let (p, n) = (mean(positives)?, mean(negatives)?);
    Ok(EmbeddingStats { mean_pos_cos: p, mean_neg_cos: n, gap: p - n })
}

/// Positive pairs are two augmentations of one render, negative pairs
/// augmentations of renders of two different objects. Embeddings are the
/// eval-mode head outputs the contrastive loss acts on.
pub fn stage1_pair_stats(
    f2d: &Encoder2D,
    g2d: &ProjectionHead,
    renders: &[(usize, &Image)],
    aug: &AugmentationSpec,
    pairs: usize,
    seed: u64,
) -> Result<EmbeddingStats> {
    if renders.len() < 2 {
        return Err(Error::contract("pair statistics need at least two renders"));
    }
    let mut rng = stream(seed, &[tag::PROBE, 1]);
    let mut pos_imgs = Vec::with_capacity(2 * pairs);
    let mut neg_imgs = Vec::with_capacity(2 * pairs);
    for p in 0..pairs {
        let a = rng.random_range(0..renders.len());
        let mut b = rng.random_range(0..renders.len());
        while renders[b].0 == renders[a].0 {
            b = rng.random_range(0..renders.len());
        }
        let draw = |img: &Image, slot: u64| augment_image(img, aug, &mut stream(seed, &[tag::AUGMENT, p as u64, slot]));
        pos_imgs.push(draw(renders[a].1, 0));
        pos_imgs.push(draw(renders[a].1, 1));
        neg_imgs.push(draw(renders[a].1, 2));
        neg_imgs.push(draw(renders[b].1, 3));
    }
    let embed = |imgs: &[Image]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(64) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let mut tape = Tape::new();
            let pf = f2d.params.bind(&mut tape, false);
            let pg = g2d.params.bind(&mut tape, false);
            let x = tape.constant(images_to_tensor(&refs)?);
            let (fmap, _) = f2d.forward(&mut tape, &pf, x, Mode::Eval)?;
            let h = tape.reshape(fmap, [chunk.len(), f2d.config.flat_dim()])?;
            let z = g2d.forward(&mut tape, &pg, h)?;
            let t = tape.value(z);
            out.extend((0..chunk.len()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    };
    let pe = embed(&pos_imgs)?;
    let ne = embed(&neg_imgs)?;
    let pos: Vec<_> = pe.chunks_exact(2).map(|c| (c[0].clone(), c[1].clone())).collect();
    let neg: Vec<_> = ne.chunks_exact(2).map(|c| (c[0].clone(), c[1].clone())).collect();
    embedding_stats(&pos, &neg)
}

/// Test-split renders of `ds` as `(object id, image)`.
pub fn held_out_renders(ds: &Dataset) -> Vec<(usize, &Image)> {
    ds.objects.iter().filter(|o| o.split == Split::Test).flat_map(|o| o.views.iter().map(move |v| (o.id, v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Encoder3DConfig;
    use nalgebra::Point3;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(rows: Vec<Vec<f64>>, labels: Vec<usize>, id0: usize) -> EmbeddingSet {
        EmbeddingSet { ids: (id0..id0 + rows.len()).collect(), labels, rows }
    }

    fn blobs(n_per: usize, classes: usize, d: usize, spread: f64, seed: u64, id0: usize) -> EmbeddingSet {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for _ in 0..n_per {
                rows.push((0..d).map(|j| if j % classes == c { 3.0 } else { 0.0 } + r.random_range(-spread..spread)).collect());
                labels.push(c);
            }
        }
        set(rows, labels, id0)
    }

    fn cloud(seed: u64, l: usize) -> PointCloud {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..l).map(|_| Point3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))).collect())
    }

    #[test]
    fn embeddings_are_permutation_invariant_and_deterministic() {
        let f3d = Encoder3D::new(Encoder3DConfig { widths: vec![8, 16] }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = cloud(2, 30);
        let mut shuffled = c.clone();
        shuffled.points.reverse();
        let e = extract_embeddings(&f3d, &[(0, 0, &c), (1, 0, &c), (2, 1, &shuffled)]).unwrap();
        assert_eq!(e.rows[0], e.rows[1]);
        for (a, b) in e.rows[0].iter().zip(&e.rows[2]) {
            assert_eq!(a, b);
        }
        let mut zero = f3d.clone();
        zero.zero_final_layer();
        let z = extract_embeddings(&zero, &[(0, 0, &c)]).unwrap();
        assert!(z.rows[0].iter().all(|&x| x == 0.0));
        // mixed sizes go one cloud at a time and agree with the batched path
        let small = cloud(3, 10);
        let mixed = extract_embeddings(&f3d, &[(0, 0, &c), (1, 0, &small)]).unwrap();
        assert_eq!(mixed.rows[0], e.rows[0]);
    }

    #[test]
    fn separable_data_is_learned() {
        let train = blobs(10, 2, 4, 0.3, 1, 0);
        let test = blobs(5, 2, 4, 0.3, 2, 100);
        let r = linear_probe(&train, &test, ProbeConfig::default(), 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!((r.correct, r.total), (10, 10));
        assert_eq!(r, linear_probe(&train, &test, ProbeConfig::default(), 0).unwrap());
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let mut train = blobs(12, 8, 16, 0.5, 10 + seed, 0);
            let test = blobs(12, 8, 16, 0.5, 20 + seed, 1000);
            train.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            accs.push(linear_probe(&train, &test, ProbeConfig::default(), seed).unwrap().accuracy);
        }
        let mean = accs.iter().sum::<f64>() / 5.0;
        assert!((0.05..=0.25).contains(&mean), "mean {mean} from {accs:?}");
    }

    #[test]
    fn probe_contract_errors() {
        let train = blobs(3, 2, 4, 0.1, 1, 0);
        let mut test = blobs(3, 3, 4, 0.1, 2, 100);
        assert!(matches!(linear_probe(&train, &test, ProbeConfig::default(), 0), Err(Error::Contract(_))));
        test = blobs(3, 2, 4, 0.1, 2, 0);
        assert!(linear_probe(&train, &test, ProbeConfig::default(), 0).is_err());
        assert!(knn_classify(&EmbeddingSet::default(), &test, 1).is_err());
    }

    #[test]
    fn knn_self_match_and_majority() {
        let train = blobs(4, 3, 5, 0.4, 3, 0);
        let mut test = train.clone();
        test.ids = (100..112).collect();
        assert_eq!(knn_classify(&train, &test, 1).unwrap().accuracy, 1.0);
        let mut lopsided = train.clone();
        lopsided.labels[0] = 1; // class 1 now holds 5 of 12
        let r = knn_classify(&lopsided, &test, 12).unwrap();
        assert!(r.predictions.iter().all(|&p| p == 1));
    }

    /// Exhaustive reference: every class's vote count and summed distance
    /// computed independently, then the documented tie order applied.
    fn knn_reference(train: &EmbeddingSet, q: &[f64], k: usize) -> usize {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        let dist = |i: usize| euclid(q, &train.rows[i]);
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                let (da, db) = (dist(idx[a]), dist(idx[b]));
                if db < da || (db == da && idx[b] < idx[a]) {
                    idx.swap(a, b);
                }
            }
        }
        let classes = *train.labels.iter().max().unwrap() + 1;
        let mut best: Option<(usize, f64, usize)> = None;
        for c in 0..classes {
            let members: Vec<usize> = idx[..k].iter().copied().filter(|&i| train.labels[i] == c).collect();
            let cand = (members.len(), members.iter().map(|&i| dist(i)).sum::<f64>(), c);
            best = match best {
                Some(b) if (b.0, -b.1) >= (cand.0, -cand.1) => Some(b),
                _ => Some(cand),
            };
        }
        best.unwrap().2
    }

    proptest! {
        #[test]
        fn knn_matches_exhaustive_reference(seed in 0u64..200, k in 1usize..20) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..20).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
            let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
            let train = set(rows, labels, 0);
            let test = set((0..10).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect(), vec![0; 10], 100);
            let got = knn_classify(&train, &test, k).unwrap();
            for (q, &p) in test.rows.iter().zip(&got.predictions) {
                prop_assert_eq!(p, knn_reference(&train, q, k));
            }
        }

        #[test]
        fn subsample_counts(fraction in 0.05f64..=1.0, seed in 0u64..50) {
            let labels: Vec<usize> = (0..100).map(|i| if i < 40 { 0 } else if i < 70 { 1 } else { 2 }).collect();
            let idx = stratified_subsample(&labels, fraction, seed).unwrap();
            for (c, n) in [(0, 40.0), (1, 30.0), (2, 30.0)] {
                let got = idx.iter().filter(|&&i| labels[i] == c).count();
                prop_assert_eq!(got, (fraction * n - 1e-9).ceil() as usize);
            }
            let mut sorted = idx.clone();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), idx.len());
        }
    }

    #[test]
    fn subsample_edge_cases() {
        let labels = vec![0, 0, 0, 1, 1, 1, 1, 1, 1, 1];
        assert!(matches!(stratified_subsample(&labels, 0.2, 0), Err(Error::Contract(_))));
        assert_eq!(stratified_subsample(&labels, 1.0, 3).unwrap(), (0..10).collect::<Vec<_>>());
        let small = stratified_subsample(&labels, 0.34, 1).unwrap();
        let large = stratified_subsample(&labels, 0.7, 1).unwrap();
        assert!(small.iter().all(|i| large.contains(i)));
        assert!(stratified_subsample(&labels, 0.0, 0).is_err());
    }

    #[test]
    fn sweep_shape_and_full_fraction() {
        let train = blobs(20, 2, 4, 1.5, 5, 0);
        let test = blobs(10, 2, 4, 1.5, 6, 100);
        let fr = [0.05, 0.10, 0.20, 0.50, 0.70, 0.90];
        let res = label_fraction_sweep(&train, &test, &fr, &[0, 1, 2], Protocol::Linear, SweepConfig::default()).unwrap();
        assert_eq!(res.len(), 18);
        let full = label_fraction_sweep(&train, &test, &[1.0], &[4], Protocol::Linear, SweepConfig::default()).unwrap();
        let direct = linear_probe(&train, &test, ProbeConfig::default(), 4).unwrap();
        assert_eq!(full[0], direct);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_results(&p, &full).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, format!("protocol,fraction,seed,accuracy\nlinear,1,4,{:.4}\n", direct.accuracy));
    }

    #[test]
    fn stats_definitions() {
        let a = vec![1.0, 2.0, 0.0];
        let pos = vec![(a.clone(), a.clone())];
        let neg = vec![(vec![1.0, 0.0, 0.0], vec![0.0, 5.0, 0.0])];
        let s = embedding_stats(&pos, &neg).unwrap();
        assert!((s.mean_pos_cos - 1.0).abs() < 1e-15);
        assert_eq!(s.mean_neg_cos, 0.0);
        assert!((s.gap - (s.mean_pos_cos - s.mean_neg_cos)).abs() <= 1e-12);
        assert!(matches!(embedding_stats(&[(vec![0.0; 3], a.clone())], &neg), Err(Error::Degenerate(_))));
        assert!(embedding_stats(&[], &neg).is_err());
    }

    #[test]
    fn embedding_file_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let train = blobs(3, 2, 4, 0.3, 1, 0);
        let test = blobs(2, 2, 4, 0.3, 2, 100);
        write_embeddings(&path, &train, &test).unwrap();
        let (a, b) = read_embeddings(&path).unwrap();
        assert_eq!((a, b), (train, test));
        std::fs::write(&path, "id,label,split,e0\n1,0,train\n").unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::Parse { line: 2, .. })));
    }
}
