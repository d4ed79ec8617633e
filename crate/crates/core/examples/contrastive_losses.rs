//! The contrastive and transfer losses on hand-made batches: the analytic
//! fixed points, the effect of temperature, and the weighted combination.

use pointview::losses::{loss_2d_ntxent, loss_combined, loss_global_transfer, loss_pointwise_transfer, LossWeights, PairBatch, SimilarityConfig};
use pointview::Result;

fn main() -> Result<()> {
    let sim = SimilarityConfig::new(0.5)?;

    // one pair has no negatives, so the loss is exactly zero
    let single = PairBatch::new(vec![vec![1.0, 0.0]], vec![vec![0.3, 0.9]])?;
    println!("k=1: {}", loss_2d_ntxent(&single, sim)?);

    // every embedding identical: each term is ln 3
    let same = vec![vec![1.0, 2.0, 3.0]; 2];
    let flat = PairBatch::new(same.clone(), same)?;
    println!("k=2, identical: {:.15} (2 ln 3 = {:.15})", loss_2d_ntxent(&flat, sim)?, 2.0 * 3f64.ln());

    // aligned pairs against orthogonal negatives, at several temperatures
    let e = |i: usize| (0..4).map(|j| f64::from(u8::from(i == j))).collect::<Vec<f64>>();
    let aligned = PairBatch::new((0..4).map(e).collect(), (0..4).map(e).collect())?;
    let shuffled = PairBatch::new((0..4).map(e).collect(), (0..4).map(|i| e((i + 1) % 4)).collect())?;
    for tau in [0.1, 0.5, 1.0] {
        let s = SimilarityConfig::new(tau)?;
        println!(
            "tau {tau:>3}: aligned {:.4}  mismatched {:.4}",
            loss_pointwise_transfer(&aligned, s)?,
            loss_pointwise_transfer(&shuffled, s)?
        );
    }

    let glb = loss_global_transfer(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![0.0, 0.0], vec![0.0, 3.0]])?;
    let pnt = loss_pointwise_transfer(&shuffled, sim)?;
    for (g, p) in [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
        println!("lambda ({g}, {p}): glb {glb:.4}  pnt {pnt:.4}  total {:.4}", loss_combined(glb, pnt, LossWeights::new(g, p)?)?);
    }
    Ok(())
}
