//! Z-buffer point-splat rasterizer and pixel↔point correspondences.

use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{project_points, project_with, CameraView, PointCloud, ViewRig};

/// RGB image, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height * 3] }
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `3×H×W` layout as consumed by the image encoder.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c];
            }
        }
        out
    }
}

/// Nearest depth and winning point per pixel; `index == -1` marks empty.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthBuffer {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub index: Vec<i64>,
}

impl DepthBuffer {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, depth: vec![f64::INFINITY; width * height], index: vec![-1; width * height] }
    }

    pub fn winner(&self, u: usize, v: usize) -> Option<usize> {
        let i = self.index[v * self.width + u];
        (i >= 0).then_some(i as usize)
    }

    pub fn covered(&self) -> usize {
        self.index.iter().filter(|&&i| i >= 0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RenderStyle {
    /// Points colored by their normalized coordinates.
    #[default]
    Rgb,
    /// Black points on white.
    Silhouette,
    /// Lambertian gray from estimated normals, light at the camera.
    Shaded,
}

impl std::str::FromStr for RenderStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(RenderStyle::Rgb),
            "silhouette" => Ok(RenderStyle::Silhouette),
            "shaded" => Ok(RenderStyle::Shaded),
            other => Err(Error::contract(format!("unknown render style '{other}'"))),
        }
    }
}

impl std::fmt::Display for RenderStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RenderStyle::Rgb => "rgb",
            RenderStyle::Silhouette => "silhouette",
            RenderStyle::Shaded => "shaded",
        })
    }
}

pub const BACKGROUND: f64 = 1.0;
const NORMAL_NEIGHBORS: usize = 8;

/// Per-axis min-max map of coordinates to RGB; flat axes map to 0.5.
pub fn assign_pseudo_color(cloud: &PointCloud) -> Vec<[f64; 3]> {
    let Some((lo, hi)) = cloud.bounds() else { return Vec::new() };
    cloud
        .points
        .iter()
        .map(|p| {
            let mut c = [0.5; 3];
            for (a, slot) in c.iter_mut().enumerate() {
                let span = hi[a] - lo[a];
                if span > 0.0 {
                    *slot = ((p[a] - lo[a]) / span).clamp(0.0, 1.0);
                }
            }
            c
        })
        .collect()
}

/// Splats every projected point into a `(2r+1)²` block, keeping the
/// nearest. Equal depths keep the lower point index.
pub fn rasterize(cloud: &PointCloud, view: &CameraView, splat_radius: usize) -> DepthBuffer {
    let (w, h) = (view.intrinsics.width, view.intrinsics.height);
    let mut buf = DepthBuffer::empty(w, h);
    let r = splat_radius as isize;
    for p in project_points(cloud, view) {
        let (cu, cv) = p.cell();
        for dv in -r..=r {
            for du in -r..=r {
                let (u, v) = (cu as isize + du, cv as isize + dv);
                if u < 0 || v < 0 || u >= w as isize || v >= h as isize {
                    continue;
                }
                let slot = v as usize * w + u as usize;
                if p.depth < buf.depth[slot] {
                    buf.depth[slot] = p.depth;
                    buf.index[slot] = p.index as i64;
                }
            }
        }
    }
    buf
}

/// Renders every rig view of a (normalized) cloud.
pub fn render_views(
    cloud: &PointCloud,
    rig: &ViewRig,
    style: RenderStyle,
    splat_radius: usize,
) -> Result<(Vec<Image>, Vec<DepthBuffer>)> {
    let colors = match style {
        RenderStyle::Rgb => assign_pseudo_color(cloud),
        _ => Vec::new(),
    };
    let normals = match style {
        RenderStyle::Shaded if cloud.len() > 3 => {
            Some(estimate_normals(cloud, NORMAL_NEIGHBORS.min(cloud.len() - 1))?)
        }
        _ => None,
    };
    let mut images = Vec::with_capacity(rig.len());
    let mut buffers = Vec::with_capacity(rig.len());
    for cam in &rig.cameras {
        let buf = rasterize(cloud, cam, splat_radius);
        let light = (cam.position - cam.target).normalize();
        let mut img = Image::filled(buf.width, buf.height, BACKGROUND);
        for v in 0..buf.height {
            for u in 0..buf.width {
                let Some(i) = buf.winner(u, v) else { continue };
                let rgb = match style {
                    RenderStyle::Rgb => colors[i],
                    RenderStyle::Silhouette => [0.0; 3],
                    RenderStyle::Shaded => {
                        let s = normals.as_ref().map_or(1.0, |n| n[i].dot(&light).max(0.0));
                        [s; 3]
                    }
                };
                img.set_pixel(u, v, rgb);
            }
        }
        images.push(img);
        buffers.push(buf);
    }
    Ok((images, buffers))
}

/// One visible pixel↔point pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub object_id: usize,
    pub view_id: usize,
    pub point_index: usize,
    pub pixel_u: usize,
    pub pixel_v: usize,
    pub depth: f64,
}

/// All pixel↔point pairs, sorted by `(object, view, v, u)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub entries: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: CorrespondenceSet) {
        self.entries.extend(other.entries);
    }
}

/// Reads the z-buffer winners of each view as correspondences. A pixel
/// pairs with its winner only when the winner projects into that pixel.
pub fn extract_correspondences(
    object_id: usize,
    cloud: &PointCloud,
    rig: &ViewRig,
    buffers: &[DepthBuffer],
) -> Result<CorrespondenceSet> {
    if buffers.len() != rig.len() {
        return Err(Error::contract(format!("{} depth buffers for {} views", buffers.len(), rig.len())));
    }
    let mut entries = Vec::new();
    for (view_id, (cam, buf)) in rig.cameras.iter().zip(buffers).enumerate() {
        let m = cam.projection_matrix();
        if (buf.width, buf.height) != (cam.intrinsics.width, cam.intrinsics.height) {
            return Err(Error::contract(format!(
                "view {view_id}: depth buffer is {}x{}, camera renders {}x{}",
                buf.width, buf.height, cam.intrinsics.width, cam.intrinsics.height
            )));
        }
        for v in 0..buf.height {
            for u in 0..buf.width {
                let slot = v * buf.width + u;
                if let Some(point_index) = buf.winner(u, v) {
                    if point_index >= cloud.len() {
                        return Err(Error::contract(format!("view {view_id}: winner {point_index} not in cloud")));
                    }
                    // splat neighbours are drawn but only the point's own cell pairs with it
                    let own = project_with(&m, &cloud.points[point_index]).map(|(pu, pv)| (pu.floor(), pv.floor()));
                    if own != Some((u as f64, v as f64)) {
                        continue;
                    }
                    entries.push(Correspondence { object_id, view_id, point_index, pixel_u: u, pixel_v: v, depth: buf.depth[slot] });
                }
            }
        }
    }
    Ok(CorrespondenceSet { entries })
}

/// PCA normals from the `k` nearest neighbours (plus the point itself),
/// oriented away from the cloud centroid.
pub fn estimate_normals(cloud: &PointCloud, k_neighbors: usize) -> Result<Vec<Vector3<f64>>> {
    if k_neighbors < 3 {
        return Err(Error::contract(format!("normal estimation needs k >= 3, got {k_neighbors}")));
    }
    if cloud.len() <= k_neighbors {
        return Err(Error::contract(format!("normal estimation with k = {k_neighbors} needs more than {k_neighbors} points, got {}", cloud.len())));
    }
    let n = cloud.len() as f64;
    let centroid = Point3::from(cloud.points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(cloud.len());
    let mut normals = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        dists.clear();
        dists.extend(cloud.points.iter().enumerate().map(|(j, q)| ((q - p).norm_squared(), j)));
        dists.select_nth_unstable_by(k_neighbors, |a, b| a.partial_cmp(b).expect("finite distances"));
        let hood = &dists[..=k_neighbors];
        let mean = hood.iter().map(|&(_, j)| cloud.points[j].coords).sum::<Vector3<f64>>() / hood.len() as f64;
        let mut cov = Matrix3::zeros();
        for &(_, j) in hood {
            let d = cloud.points[j].coords - mean;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let (imin, _) = eig.eigenvalues.argmin();
        let mut normal = eig.eigenvectors.column(imin).normalize();
        if normal.dot(&(p - centroid)) < 0.0 {
            normal = -normal;
        }
        normals.push(normal);
    }
    Ok(normals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_view_rig, normalize_unit_cube, Intrinsics};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(v.iter().map(|&p| Point3::from(p)).collect())
    }

    fn sphere(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    let z: f64 = rng.random_range(-1.0..1.0);
                    let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = (1.0 - z * z).sqrt();
                    Point3::new(r * t.cos(), r * t.sin(), z)
                })
                .collect(),
        )
    }

    #[test]
    fn pseudo_color_endpoints() {
        let c = assign_pseudo_color(&pts(&[[-1., 0., 2.], [3., 4., 6.], [1., 2., 4.]]));
        assert_eq!(c[0], [0.0, 0.0, 0.0]);
        assert_eq!(c[1], [1.0, 1.0, 1.0]);
        assert_eq!(c[2], [0.5, 0.5, 0.5]);
        let flat = assign_pseudo_color(&pts(&[[0., 0., 1.], [1., 2., 1.]]));
        assert!(flat.iter().all(|c| c[2] == 0.5));
    }

    fn z_camera() -> (ViewRig, CameraView) {
        let cam = CameraView::look_at(Intrinsics::default(), Point3::new(0., 0., 2.2), Point3::origin(), Vector3::y()).unwrap();
        (ViewRig { radius: 2.2, cameras: vec![cam.clone()] }, cam)
    }

    #[test]
    fn nearer_point_wins_pixel() {
        let (rig, _) = z_camera();
        // both on the principal axis: distances 0.5 and 0.9 from the camera
        let cloud = pts(&[[0., 0., 1.3], [0., 0., 1.7], [0.3, 0.3, 0.0]]);
        let (imgs, bufs) = render_views(&cloud, &rig, RenderStyle::Rgb, 0).unwrap();
        assert_eq!(bufs[0].winner(16, 16), Some(1));
        assert!((bufs[0].depth[16 * 32 + 16] - 0.5).abs() < 1e-12);
        assert_eq!(imgs[0].pixel(16, 16), assign_pseudo_color(&cloud)[1]);
    }

    #[test]
    fn silhouette_is_binary_and_styles_share_geometry() {
        let cloud = normalize_unit_cube(&sphere(256, 1)).unwrap();
        let rig = build_view_rig(6, 2.2, (32, 32)).unwrap();
        let (sil, b1) = render_views(&cloud, &rig, RenderStyle::Silhouette, 0).unwrap();
        let (_, b2) = render_views(&cloud, &rig, RenderStyle::Rgb, 0).unwrap();
        let (shaded, b3) = render_views(&cloud, &rig, RenderStyle::Shaded, 0).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1, b3);
        for img in &sil {
            assert!(img.data.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(img.data.contains(&0.0));
        }
        assert!(shaded.iter().flat_map(|i| &i.data).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn empty_view_is_background() {
        let (rig, _) = z_camera();
        let (imgs, bufs) = render_views(&pts(&[[0., 0., 5.0]]), &rig, RenderStyle::Rgb, 1).unwrap();
        assert!(imgs[0].data.iter().all(|&v| v == BACKGROUND));
        assert_eq!(bufs[0].covered(), 0);
    }

    #[test]
    fn zbuffer_matches_per_pixel_argmin() {
        let cloud = normalize_unit_cube(&sphere(256, 2)).unwrap();
        let rig = build_view_rig(12, 2.2, (32, 32)).unwrap();
        let (_, bufs) = render_views(&cloud, &rig, RenderStyle::Rgb, 0).unwrap();
        for (cam, buf) in rig.cameras.iter().zip(&bufs) {
            let proj = project_points(&cloud, cam);
            for v in 0..32 {
                for u in 0..32 {
                    let best = proj
                        .iter()
                        .filter(|p| p.cell() == (u, v))
                        .min_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
                    assert_eq!(buf.winner(u, v), best.map(|p| p.index));
                }
            }
        }
    }

    #[test]
    fn adding_nearer_point_takes_pixel() {
        let (rig, cam) = z_camera();
        let mut cloud = pts(&[[0.1, 0.05, 0.0], [-0.2, 0.1, 0.2]]);
        let before = rasterize(&cloud, &cam, 0);
        let target = project_points(&cloud, &cam)[0];
        // slide along the viewing ray toward the camera
        let toward = (cam.position - cloud.points[0]) * 0.3;
        cloud.points.push(cloud.points[0] + toward);
        let after = rasterize(&cloud, &rig.cameras[0], 0);
        let (u, v) = target.cell();
        assert_eq!(before.winner(u, v), Some(0));
        assert_eq!(after.winner(u, v), Some(2));
    }

    #[test]
    fn correspondences_round_trip_and_count() {
        let cloud = normalize_unit_cube(&sphere(256, 3)).unwrap();
        let rig = build_view_rig(12, 2.2, (32, 32)).unwrap();
        let (_, bufs) = render_views(&cloud, &rig, RenderStyle::Rgb, 0).unwrap();
        let set = extract_correspondences(7, &cloud, &rig, &bufs).unwrap();
        assert_eq!(set.len(), bufs.iter().map(DepthBuffer::covered).sum::<usize>());
        let mut seen = std::collections::HashSet::new();
        for e in &set.entries {
            assert_eq!(e.object_id, 7);
            assert!(seen.insert((e.view_id, e.pixel_u, e.pixel_v)));
            let m = rig.cameras[e.view_id].projection_matrix();
            let (u, v) = project_with(&m, &cloud.points[e.point_index]).unwrap();
            assert_eq!((u.floor() as usize, v.floor() as usize), (e.pixel_u, e.pixel_v));
        }
        let (_, splatted) = render_views(&cloud, &rig, RenderStyle::Rgb, 1).unwrap();
        let wide = extract_correspondences(7, &cloud, &rig, &splatted).unwrap();
        assert!(wide.len() <= splatted.iter().map(DepthBuffer::covered).sum::<usize>());
        assert!(!wide.is_empty());
        for e in &wide.entries {
            let m = rig.cameras[e.view_id].projection_matrix();
            let (u, v) = project_with(&m, &cloud.points[e.point_index]).unwrap();
            assert_eq!((u.floor() as usize, v.floor() as usize), (e.pixel_u, e.pixel_v));
            assert_eq!(splatted[e.view_id].winner(e.pixel_u, e.pixel_v), Some(e.point_index));
        }
        let sorted = set.entries.windows(2).all(|w| (w[0].view_id, w[0].pixel_v, w[0].pixel_u) < (w[1].view_id, w[1].pixel_v, w[1].pixel_u));
        assert!(sorted);
    }

    #[test]
    fn correspondence_edge_cases() {
        let (rig, _) = z_camera();
        let single = pts(&[[0.0, 0.0, 0.0]]);
        let (_, bufs) = render_views(&single, &rig, RenderStyle::Silhouette, 0).unwrap();
        assert_eq!(extract_correspondences(0, &single, &rig, &bufs).unwrap().len(), 1);
        assert!(extract_correspondences(0, &single, &rig, &[]).is_err());
        let wrong = vec![DepthBuffer::empty(16, 16)];
        assert!(extract_correspondences(0, &single, &rig, &wrong).is_err());

        // a point at the center of a dense shell is never visible
        let mut shell = sphere(4000, 4);
        shell.points.iter_mut().for_each(|p| *p *= 0.4);
        shell.points.push(Point3::origin());
        let hidden = shell.len() - 1;
        let rig = build_view_rig(12, 2.2, (32, 32)).unwrap();
        let (_, bufs) = render_views(&shell, &rig, RenderStyle::Rgb, 0).unwrap();
        let set = extract_correspondences(0, &shell, &rig, &bufs).unwrap();
        assert!(set.entries.iter().all(|e| e.point_index != hidden));
    }

    #[test]
    fn normals_of_plane_and_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plane = PointCloud::new((0..100).map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0)).collect());
        for n in estimate_normals(&plane, 8).unwrap() {
            assert!((n.z.abs() - 1.0).abs() < 1e-9);
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
        let s = sphere(500, 6);
        let normals = estimate_normals(&s, 8).unwrap();
        let mean_err = s.points.iter().zip(&normals).map(|(p, n)| n.dot(&p.coords.normalize()).clamp(-1.0, 1.0).acos().to_degrees()).sum::<f64>() / s.len() as f64;
        assert!(mean_err < 10.0, "{mean_err}");
        assert!(normals.iter().all(|n| (n.norm() - 1.0).abs() < 1e-9));
        assert!(estimate_normals(&pts(&[[0., 0., 0.], [1., 0., 0.], [0., 1., 0.]]), 3).is_err());
        assert!(estimate_normals(&s, 2).is_err());
    }
}
