//! Both training stages at reduced scale, then a label-fraction sweep of
//! the pre-trained point encoder against its random initialisation.

use pointview::data::{generate_dataset, DataConfig, Split};
use pointview::eval::{embed_split, held_out_renders, label_fraction_sweep, mean_by_fraction, stage1_pair_stats, Protocol, SweepConfig};
use pointview::pipeline::{epoch_means, pretrain_stage1, pretrain_stage2, TrainConfig};
use pointview::Result;

fn main() -> Result<()> {
    let ds = generate_dataset(&DataConfig { per_class: 24, ..DataConfig::default() })?;
    println!("{} objects, {} images", ds.objects.len(), ds.image_count());

    let mut c1 = TrainConfig::stage1().with_seed(0);
    c1.epochs = 8;
    let s1 = pretrain_stage1(&ds, &c1)?;
    for (e, m) in epoch_means(&s1.log) {
        println!("stage 1 epoch {e:>2}  loss {m:.4}");
    }
    let renders = held_out_renders(&ds);
    let model = &s1.checkpoint.model;
    let stats = stage1_pair_stats(&model.f2d, &model.g2d, &renders, &c1.augmentation, 64, 0)?;
    println!("held-out cosine: positives {:.3}, negatives {:.3}", stats.mean_pos_cos, stats.mean_neg_cos);

    let mut c2 = TrainConfig::stage2().with_seed(0);
    c2.epochs = 8;
    let s2 = pretrain_stage2(&ds, &s1.checkpoint, &c2)?;
    for (e, m) in epoch_means(&s2.log) {
        println!("stage 2 epoch {e:>2}  loss {m:.4}");
    }

    let fractions = [0.2, 1.0];
    for (name, f3d) in [("pre-trained", &s2.checkpoint.model.f3d), ("random", &s1.checkpoint.model.f3d)] {
        let train = embed_split(f3d, &ds, Split::Train)?;
        let test = embed_split(f3d, &ds, Split::Test)?;
        for protocol in [Protocol::Linear, Protocol::Knn] {
            let r = label_fraction_sweep(&train, &test, &fractions, &[0, 1], protocol, SweepConfig::default())?;
            println!("{name:<12} {protocol:<6} {:?}", mean_by_fraction(&r).iter().map(|(f, a)| format!("{f}: {a:.3}")).collect::<Vec<_>>());
        }
    }
    Ok(())
}
