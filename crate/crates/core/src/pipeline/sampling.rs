//! Pixel-point batch sampling over a correspondence set.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::renderer::CorrespondenceSet;

use super::config::PairPolicy;

/// Indices of `k` distinct entries of `set`, drawn without replacement.
///
/// `CrossObject` gives each object `⌊k/n⌋` entries and one more to the
/// first `k mod n` objects, in order of first appearance in `set`.
pub fn sample_pixel_point_batch<R: Rng>(set: &CorrespondenceSet, k: usize, policy: PairPolicy, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::contract("pixel-point batch size must be >= 1"));
    }
    match policy {
        PairPolicy::WithinObject => {
            let groups = group_by(set, |e| (e.object_id, e.view_id));
            let eligible: Vec<&Vec<usize>> = groups.iter().map(|(_, g)| g).filter(|g| g.len() >= k).collect();
            if eligible.is_empty() {
                let most = groups.iter().map(|(_, g)| g.len()).max().unwrap_or(0);
                return Err(Error::contract(format!("no single view has {k} correspondences (largest has {most})")));
            }
            let g = eligible[rng.random_range(0..eligible.len())];
            Ok(index::sample(rng, g.len(), k).into_iter().map(|i| g[i]).collect())
        }
        PairPolicy::CrossObject => {
            let groups = group_by(set, |e| e.object_id);
            let n = groups.len();
            if n == 0 {
                return Err(Error::contract(format!("cannot draw {k} pairs from an empty correspondence set")));
            }
            let mut out = Vec::with_capacity(k);
            for (i, (object, g)) in groups.iter().enumerate() {
                let quota = k / n + usize::from(i < k % n);
                if quota > g.len() {
                    return Err(Error::contract(format!("object {object} has {} correspondences, needs {quota}", g.len())));
                }
                out.extend(index::sample(rng, g.len(), quota).into_iter().map(|j| g[j]));
            }
            Ok(out)
        }
    }
}

/// Entry indices grouped by `key`, groups in order of first appearance.
fn group_by<K: PartialEq + Copy>(set: &CorrespondenceSet, key: impl Fn(&crate::renderer::Correspondence) -> K) -> Vec<(K, Vec<usize>)> {
    let mut groups: Vec<(K, Vec<usize>)> = Vec::new();
    for (i, e) in set.entries.iter().enumerate() {
        let k = key(e);
        match groups.iter_mut().rev().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(i),
            None => groups.push((k, vec![i])),
        }
    }
    groups
}
