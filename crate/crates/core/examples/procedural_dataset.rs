//! Generates a small procedural dataset, writes it to disk and loads it
//! back, which re-checks every correspondence against its matrix.

use pointview::data::{generate_dataset, load_dataset, write_dataset, DataConfig, Split};
use pointview::Result;

fn main() -> Result<()> {
    let cfg = DataConfig { per_class: 5, points: 128, views: 4, ..DataConfig::default() };
    let ds = generate_dataset(&cfg)?;
    println!(
        "{} objects ({} train, {} test), {} images, {} skipped",
        ds.objects.len(),
        ds.ids(Split::Train).len(),
        ds.ids(Split::Test).len(),
        ds.image_count(),
        ds.skipped.len()
    );
    let dir = std::env::temp_dir().join("pointview_procedural_dataset");
    let manifest = write_dataset(&ds, &dir)?;
    println!("manifest version {} with {} objects at {}", manifest.version, manifest.objects.len(), dir.display());
    let back = load_dataset(&dir)?;
    let pairs: usize = back.objects.iter().map(|o| o.correspondences.len()).sum();
    println!("reloaded {} objects, {pairs} correspondences", back.objects.len());
    for o in back.objects.iter().step_by(cfg.per_class) {
        println!("  object {:>2} {:<10} {:?}, {} points, {} pairs", o.id, o.class.name(), o.split, o.cloud.len(), o.correspondences.len());
    }
    Ok(())
}
