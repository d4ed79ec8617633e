//! Point-cloud preparation and pinhole camera mathematics.

use nalgebra::{Matrix3, Matrix3x4, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ordered set of 3D points, optionally labelled with a class id.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self { points, label: None }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    /// Row-major `L×3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }
}

/// Centers the bounding box at the origin and scales uniformly so the
/// longest axis spans exactly 1. A cloud with zero extent collapses to the
/// origin.
pub fn normalize_unit_cube(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::Degenerate("cannot normalize an empty cloud".into()));
    }
    if cloud.points.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
        return Err(Error::Numeric("point cloud has a non-finite coordinate".into()));
    }
    let (lo, hi) = cloud.bounds().expect("non-empty");
    let center = nalgebra::center(&lo, &hi);
    let extent = (hi - lo).max();
    let points = if extent > 0.0 {
        cloud.points.iter().map(|p| Point3::from((p - center) / extent)).collect()
    } else {
        vec![Point3::origin(); cloud.len()]
    };
    Ok(PointCloud { points, label: cloud.label })
}

/// Greedy farthest-point sampling with a seeded start index.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::Degenerate("cannot sample an empty cloud".into()));
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..cloud.len());
    let picked = farthest_point_indices(cloud, k, start)?;
    Ok(PointCloud { points: picked.iter().map(|&i| cloud.points[i]).collect(), label: cloud.label })
}

/// Selection order of greedy FPS starting at `start`. Ties go to the lower index.
pub fn farthest_point_indices(cloud: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!("farthest point sampling needs 1 <= k <= {n}, got {k}")));
    }
    if start >= n {
        return Err(Error::contract(format!("start index {start} out of range")));
    }
    let mut picked = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..k {
        picked.push(current);
        let c = cloud.points[current];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, (p, d)) in cloud.points.iter().zip(min_d2.iter_mut()).enumerate() {
            *d = d.min((p - c).norm_squared());
            if *d > best.0 {
                best = (*d, i);
            }
        }
        current = best.1;
    }
    Ok(picked)
}

/// Pinhole intrinsics; focal length and sensor size share scene units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub focal: f64,
    pub sensor_width: f64,
    pub sensor_height: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self { focal: 35.0, sensor_width: 32.0, sensor_height: 32.0, width: 32, height: 32 }
    }
}

impl Intrinsics {
    pub fn with_image_size(width: usize, height: usize) -> Self {
        Self { width, height, ..Self::default() }
    }

    pub fn fx(&self) -> f64 {
        self.focal * self.width as f64 / self.sensor_width
    }

    pub fn fy(&self) -> f64 {
        self.focal * self.height as f64 / self.sensor_height
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let (cx, cy) = self.principal_point();
        Matrix3::new(self.fx(), 0.0, cx, 0.0, self.fy(), cy, 0.0, 0.0, 1.0)
    }
}

/// A posed pinhole camera. Camera axes: x right, y down, z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub position: Point3<f64>,
    pub target: Point3<f64>,
    pub up: Vector3<f64>,
    /// World-to-camera rotation; rows are the right, down and forward axes.
    pub rotation: Matrix3<f64>,
}

impl CameraView {
    pub fn look_at(intrinsics: Intrinsics, position: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - position)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::contract("camera position coincides with its target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-9)
            .ok_or_else(|| Error::contract("camera up vector is parallel to the view direction"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Ok(Self { intrinsics, position, target, up, rotation })
    }

    /// `K · [R | −R·C]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let t = -(self.rotation * self.position.coords);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.set_column(3, &t);
        self.intrinsics.matrix() * rt
    }
}

/// A point that survived projection: continuous pixel coordinates and the
/// Euclidean distance from the camera center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub index: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projected {
    pub fn cell(&self) -> (usize, usize) {
        (self.u.floor() as usize, self.v.floor() as usize)
    }
}

/// Perspective projection through `m`; `None` when the point is behind the
/// camera.
pub fn project_with(m: &Matrix3x4<f64>, p: &Point3<f64>) -> Option<(f64, f64)> {
    let h = m * p.to_homogeneous();
    (h.z > 0.0).then(|| (h.x / h.z, h.y / h.z))
}

/// Projects every point, dropping those behind the camera or outside the image.
pub fn project_points(cloud: &PointCloud, view: &CameraView) -> Vec<Projected> {
    let m = view.projection_matrix();
    let (w, h) = (view.intrinsics.width as f64, view.intrinsics.height as f64);
    cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(index, p)| {
            let (u, v) = project_with(&m, p)?;
            let inside = (0.0..w).contains(&u) && (0.0..h).contains(&v);
            inside.then(|| Projected { index, u, v, depth: (p - view.position).norm() })
        })
        .collect()
}

/// Cameras on a sphere around the origin, all aimed at it.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRig {
    pub radius: f64,
    pub cameras: Vec<CameraView>,
}

impl ViewRig {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

pub const DEFAULT_RIG_RADIUS: f64 = 2.2;

/// Builds an `m`-camera rig. Counts matching a platonic solid use its
/// vertices, so every camera has equidistant nearest neighbours; other
/// counts fall back to a Fibonacci sphere.
pub fn build_view_rig(m: usize, radius: f64, image_size: (usize, usize)) -> Result<ViewRig> {
    if m == 0 {
        return Err(Error::contract("view rig needs at least one camera"));
    }
    let half_diag = 3f64.sqrt() / 2.0;
    if !(radius > half_diag) {
        return Err(Error::contract(format!("rig radius {radius} does not clear the unit cube (needs > {half_diag:.6})")));
    }
    let intrinsics = Intrinsics::with_image_size(image_size.0, image_size.1);
    let cameras = rig_directions(m)
        .into_iter()
        .map(|d| {
            let position = Point3::from(d * radius);
            CameraView::look_at(intrinsics, position, Point3::origin(), canonical_up(&d))
        })
        .collect::<Result<_>>()?;
    Ok(ViewRig { radius, cameras })
}

fn canonical_up(direction: &Vector3<f64>) -> Vector3<f64> {
    let z = Vector3::z();
    if direction.cross(&z).norm() < 1e-6 {
        Vector3::y()
    } else {
        z
    }
}

/// Unit directions of the rig cameras.
pub fn rig_directions(m: usize) -> Vec<Vector3<f64>> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let raw: Vec<[f64; 3]> = match m {
        4 => vec![[1., 1., 1.], [1., -1., -1.], [-1., 1., -1.], [-1., -1., 1.]],
        6 => vec![[1., 0., 0.], [-1., 0., 0.], [0., 1., 0.], [0., -1., 0.], [0., 0., 1.], [0., 0., -1.]],
        8 => cube_corners(),
        12 => {
            let mut v = Vec::new();
            for a in [-1.0, 1.0] {
                for b in [-phi, phi] {
                    v.push([0.0, a, b]);
                    v.push([a, b, 0.0]);
                    v.push([b, 0.0, a]);
                }
            }
            v
        }
        20 => {
            let mut v = cube_corners();
            let ip = 1.0 / phi;
            for a in [-ip, ip] {
                for b in [-phi, phi] {
                    v.push([0.0, a, b]);
                    v.push([a, b, 0.0]);
                    v.push([b, 0.0, a]);
                }
            }
            v
        }
        _ => fibonacci_sphere(m),
    };
    raw.into_iter().map(|p| Vector3::from(p).normalize()).collect()
}

fn cube_corners() -> Vec<[f64; 3]> {
    let mut v = Vec::with_capacity(8);
    for x in [-1.0, 1.0] {
        for y in [-1.0, 1.0] {
            for z in [-1.0, 1.0] {
                v.push([x, y, z]);
            }
        }
    }
    v
}

fn fibonacci_sphere(m: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..m)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
            let r = (1.0 - z * z).sqrt();
            let theta = golden * i as f64;
            [r * theta.cos(), r * theta.sin(), z]
        })
        .collect()
}

/// Distance from each camera to its nearest neighbour.
pub fn nearest_neighbor_distances(rig: &ViewRig) -> Vec<f64> {
    rig.cameras
        .iter()
        .enumerate()
        .map(|(i, a)| {
            rig.cameras
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| (a.position - b.position).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;

    fn pts(v: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(v.iter().map(|&p| Point3::from(p)).collect())
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pts(&(0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect::<Vec<_>>())
    }

    #[test]
    fn normalize_examples() {
        let c = normalize_unit_cube(&pts(&[[-2., -2., -2.], [2., 2., 2.], [0., 1., -1.]])).unwrap();
        let (lo, hi) = c.bounds().unwrap();
        assert_eq!(lo, Point3::new(-0.5, -0.5, -0.5));
        assert_eq!(hi, Point3::new(0.5, 0.5, 0.5));

        let c = normalize_unit_cube(&pts(&[[3., -7., 11.]])).unwrap();
        assert_eq!(c.points, vec![Point3::origin()]);

        let c = normalize_unit_cube(&pts(&[[0., 0., 0.], [4., 2., 0.], [1., 1., 0.]])).unwrap();
        let (lo, hi) = c.bounds().unwrap();
        assert_eq!((lo.x, hi.x, lo.y, hi.y, lo.z, hi.z), (-0.5, 0.5, -0.25, 0.25, 0.0, 0.0));

        assert!(matches!(normalize_unit_cube(&pts(&[[f64::NAN, 0., 0.]])), Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(seed in 0u64..500, n in 1usize..40) {
            let once = normalize_unit_cube(&random_cloud(n, seed)).unwrap();
            let twice = normalize_unit_cube(&once).unwrap();
            for (a, b) in once.points.iter().zip(&twice.points) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }

        #[test]
        fn fps_is_duplicate_free_subset(seed in 0u64..500, n in 1usize..40, k in 1usize..40) {
            let cloud = random_cloud(n, seed);
            let k = k.min(n);
            let s = farthest_point_sample(&cloud, k, seed).unwrap();
            prop_assert_eq!(s.len(), k);
            for (i, p) in s.points.iter().enumerate() {
                prop_assert!(cloud.points.contains(p));
                prop_assert!(!s.points[..i].contains(p));
            }
        }
    }

    #[test]
    fn fps_examples() {
        let c = pts(&[[0., 0., 0.], [1., 0., 0.], [0.5, 0., 0.]]);
        assert_eq!(farthest_point_indices(&c, 2, 0).unwrap(), vec![0, 1]);
        let all = farthest_point_indices(&c, 3, 0).unwrap();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(farthest_point_sample(&c, 4, 0).is_err());
    }

    /// Every subsequent pick must be a maximizer of the min-distance to the
    /// already-selected set; recomputed from scratch each round.
    fn greedy_reference(cloud: &PointCloud, k: usize, start: usize) -> Vec<usize> {
        let mut sel = vec![start];
        while sel.len() < k {
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..cloud.len() {
                let d = sel.iter().map(|&s| (cloud.points[i] - cloud.points[s]).norm_squared()).fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            sel.push(best.1);
        }
        sel
    }

    #[test]
    fn fps_matches_greedy_reference_and_spreads() {
        let cloud = random_cloud(50, 7);
        let got = farthest_point_indices(&cloud, 10, 0).unwrap();
        assert_eq!(got, greedy_reference(&cloud, 10, 0));
        let min_pair = |idx: &[usize]| {
            let mut m = f64::INFINITY;
            for a in 0..idx.len() {
                for b in a + 1..idx.len() {
                    m = m.min((cloud.points[idx[a]] - cloud.points[idx[b]]).norm());
                }
            }
            m
        };
        let fps_spread = min_pair(&got);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut beaten = 0;
        for _ in 0..200 {
            let mut idx: Vec<usize> = (0..50).collect();
            for i in (1..50).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            if min_pair(&idx[..10]) > fps_spread {
                beaten += 1;
            }
        }
        assert_eq!(beaten, 0);
    }

    #[test]
    fn rig_icosahedron_is_equidistant() {
        let rig = build_view_rig(12, 2.2, (32, 32)).unwrap();
        assert_eq!(rig.len(), 12);
        for cam in &rig.cameras {
            assert!((cam.position.coords.norm() - 2.2).abs() < 1e-9);
        }
        let nn = nearest_neighbor_distances(&rig);
        let spread = nn.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - nn.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread <= 1e-9);
    }

    #[test]
    fn rig_platonic_counts_are_equidistant() {
        for m in [4, 6, 8, 12, 20] {
            let rig = build_view_rig(m, 2.2, (32, 32)).unwrap();
            assert_eq!(rig.len(), m);
            let nn = nearest_neighbor_distances(&rig);
            let spread = nn.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - nn.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(spread <= 1e-9, "m={m} spread {spread}");
            for cam in &rig.cameras {
                let r = cam.rotation;
                assert!((r * r.transpose() - Matrix3::identity()).abs().max() < 1e-10);
            }
        }
        let tet = build_view_rig(4, 2.2, (32, 32)).unwrap();
        let d01 = (tet.cameras[0].position - tet.cameras[1].position).norm();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(((tet.cameras[i].position - tet.cameras[j].position).norm() - d01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rig_fibonacci_fallback() {
        let rig = build_view_rig(24, 2.2, (32, 32)).unwrap();
        assert_eq!(rig.len(), 24);
        let nn = nearest_neighbor_distances(&rig);
        assert!(nn.iter().all(|&d| d > 0.0));
        for cam in &rig.cameras {
            assert!((cam.position.coords.norm() - 2.2).abs() < 1e-9);
        }
        assert!(build_view_rig(6, 0.8, (32, 32)).is_err());
        assert!(build_view_rig(0, 2.2, (32, 32)).is_err());
    }

    #[test]
    fn intrinsics_follow_pinhole_relation() {
        let k = Intrinsics::default();
        assert_eq!(k.fx(), 35.0);
        assert_eq!(k.fy(), 35.0);
        assert_eq!(k.principal_point(), (16.0, 16.0));
    }

    fn on_z_axis() -> CameraView {
        CameraView::look_at(Intrinsics::default(), Point3::new(0., 0., 2.2), Point3::origin(), Vector3::y()).unwrap()
    }

    #[test]
    fn principal_axis_projection() {
        let cam = on_z_axis();
        let p = project_points(&pts(&[[0., 0., 0.]]), &cam);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].index, p[0].u, p[0].v), (0, 16.0, 16.0));
        assert!((p[0].depth - 2.2).abs() < 1e-15);
        assert!(project_points(&pts(&[[0., 0., 3.], [0.1, 0., 5.]]), &cam).is_empty());
    }

    #[test]
    fn projection_matches_stepwise_pinhole() {
        let cam = CameraView::look_at(Intrinsics::default(), Point3::new(1.3, -1.1, 1.4), Point3::origin(), Vector3::z()).unwrap();
        let p = Point3::new(0.21, -0.37, 0.12);
        // step by step: world → camera axes → perspective divide → pixels
        let f = (Point3::origin() - cam.position).normalize();
        let r = f.cross(&Vector3::z()).normalize();
        let d = f.cross(&r);
        let rel = p - cam.position;
        let (xc, yc, zc) = (rel.dot(&r), rel.dot(&d), rel.dot(&f));
        let u = 35.0 * xc / zc + 16.0;
        let v = 35.0 * yc / zc + 16.0;
        let (pu, pv) = project_with(&cam.projection_matrix(), &p).unwrap();
        assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
    }

    #[test]
    fn rig_projections_stay_in_frame() {
        let cloud = normalize_unit_cube(&random_cloud(1024, 3)).unwrap();
        let rig = build_view_rig(12, DEFAULT_RIG_RADIUS, (32, 32)).unwrap();
        for cam in &rig.cameras {
            let proj = project_points(&cloud, cam);
            assert_eq!(proj.len(), 1024, "whole unit cube fits the frame at the default radius");
            assert!(proj.iter().all(|p| (0.0..32.0).contains(&p.u) && (0.0..32.0).contains(&p.v)));
        }
    }

    #[test]
    fn rigid_motion_of_scene_preserves_pixels() {
        let cloud = normalize_unit_cube(&random_cloud(64, 5)).unwrap();
        let rig = build_view_rig(8, 2.2, (32, 32)).unwrap();
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(0.3, -0.5, 0.8)), 1.1);
        let moved = PointCloud::new(cloud.points.iter().map(|p| rot * p).collect());
        for cam in &rig.cameras {
            let moved_cam = CameraView::look_at(cam.intrinsics, rot * cam.position, rot * cam.target, rot * cam.up).unwrap();
            let a = project_points(&cloud, cam);
            let b = project_points(&moved, &moved_cam);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.index, y.index);
                assert!((x.u - y.u).abs() < 1e-9 && (x.v - y.v).abs() < 1e-9);
            }
        }
    }
}
