//! Renders one shape of each class from a six-camera rig, prints the first
//! view as ASCII and writes every view as PPM under a temp directory.

use pointview::data::formats::write_ppm;
use pointview::data::shapes::{RotationMode, ShapeClass, ShapeSpec};
use pointview::geometry::{build_view_rig, farthest_point_sample, nearest_neighbor_distances, normalize_unit_cube, PointCloud, DEFAULT_RIG_RADIUS};
use pointview::renderer::{extract_correspondences, render_views, RenderStyle};
use pointview::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let rig = build_view_rig(6, DEFAULT_RIG_RADIUS, (32, 32))?;
    let spacing = nearest_neighbor_distances(&rig);
    println!("rig of {} cameras, nearest-neighbour spacing {:.6}", rig.len(), spacing[0]);
    let out = std::env::temp_dir().join("pointview_render_views");

    for (i, class) in ShapeClass::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let spec = ShapeSpec::random(class, RotationMode::Full, 2048, &mut rng);
        let cloud = normalize_unit_cube(&PointCloud::new(spec.sample(&mut rng)?))?;
        let cloud = farthest_point_sample(&cloud, 256, 0)?;
        let (images, buffers) = render_views(&cloud, &rig, RenderStyle::Rgb, 1)?;
        let pairs = extract_correspondences(i, &cloud, &rig, &buffers)?;
        let covered: Vec<usize> = buffers.iter().map(|b| b.covered()).collect();
        println!("{:<10} covered pixels per view {:?}, {} pixel-point pairs", class.name(), covered, pairs.len());
        for (j, img) in images.iter().enumerate() {
            write_ppm(&out.join(format!("{}_{j}.ppm", class.name())), img)?;
        }
        if class == ShapeClass::Torus {
            for v in (0..32).step_by(2) {
                let row: String = (0..32).map(|u| if buffers[0].winner(u, v).is_some() { '#' } else { '.' }).collect();
                println!("    {row}");
            }
        }
    }
    println!("images written to {}", out.display());
    Ok(())
}
