//! Eight analytic shape classes with area-uniform surface sampling.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Ellipsoid,
    Capsule,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 8] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::Torus,
        ShapeClass::Pyramid,
        ShapeClass::Ellipsoid,
        ShapeClass::Capsule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::Pyramid => "pyramid",
            ShapeClass::Ellipsoid => "ellipsoid",
            ShapeClass::Capsule => "capsule",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown shape class {s:?}")))
    }
}

/// Random pose applied to each instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RotationMode {
    None,
    /// About the vertical `z` axis only.
    Vertical,
    /// Uniform over SO(3).
    #[default]
    Full,
}

impl FromStr for RotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RotationMode::None),
            "z" | "vertical" => Ok(RotationMode::Vertical),
            "full" => Ok(RotationMode::Full),
            _ => Err(Error::contract(format!("unknown rotation mode {s:?} (none, z, full)"))),
        }
    }
}

impl fmt::Display for RotationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RotationMode::None => "none",
            RotationMode::Vertical => "z",
            RotationMode::Full => "full",
        })
    }
}

/// One shape instance. `dims` meaning per class:
/// sphere `[r]`, cube half-extents `[a, b, c]`, cylinder `[r, half height]`,
/// cone `[r, height]` (base at `z = 0`), torus `[R, r]`,
/// pyramid `[half base, height]` (base at `z = 0`), ellipsoid semi-axes
/// `[a, b, c]`, capsule `[r, half length]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    pub dims: [f64; 3],
    pub rotation: Matrix3<f64>,
    pub samples: usize,
}

impl ShapeSpec {
    pub fn random(class: ShapeClass, rotation: RotationMode, samples: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let dims = match class {
            ShapeClass::Sphere => [1.0, 0.0, 0.0],
            ShapeClass::Cube => [u(0.85, 1.15), u(0.85, 1.15), u(0.85, 1.15)],
            ShapeClass::Cylinder => [1.0, u(0.8, 1.6), 0.0],
            ShapeClass::Cone => [1.0, u(1.2, 2.2), 0.0],
            ShapeClass::Torus => [1.0, u(0.25, 0.45), 0.0],
            ShapeClass::Pyramid => [1.0, u(1.0, 1.8), 0.0],
            ShapeClass::Ellipsoid => [1.0, u(0.55, 0.8), u(0.3, 0.5)],
            ShapeClass::Capsule => [0.5, u(0.5, 1.0), 0.0],
        };
        let rotation = match rotation {
            RotationMode::None => Matrix3::identity(),
            RotationMode::Vertical => *Rotation3::from_axis_angle(&Vector3::z_axis(), rng.random_range(0.0..2.0 * PI)).matrix(),
            RotationMode::Full => {
                // uniform axis on the sphere, angle with density ∝ (1 − cos θ)
                let axis = Unit::new_normalize(sphere_point(rng));
                let angle = loop {
                    let t = rng.random_range(0.0..PI);
                    if rng.random_range(0.0..2.0) < 1.0 - t.cos() {
                        break t;
                    }
                };
                *Rotation3::from_axis_angle(&axis, angle).matrix()
            }
        };
        Self { class, dims, rotation, samples }
    }

    /// `samples` points on the surface, uniform by area.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Point3<f64>>> {
        if self.samples == 0 {
            return Err(Error::contract("shape needs at least one surface sample"));
        }
        Ok((0..self.samples).map(|_| Point3::from(self.rotation * self.sample_local(rng))).collect())
    }

    fn sample_local(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        let [d0, d1, d2] = self.dims;
        match self.class {
            ShapeClass::Sphere => sphere_point(rng) * d0,
            ShapeClass::Ellipsoid => sphere_point(rng).component_mul(&Vector3::new(d0, d1, d2)),
            ShapeClass::Cube => {
                let (a, b, c) = (d0, d1, d2);
                let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
                let f = pick(&areas, rng);
                let (s, t) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let sign = if f.is_multiple_of(2) { 1.0 } else { -1.0 };
                match f / 2 {
                    0 => Vector3::new(sign * a, s * b, t * c),
                    1 => Vector3::new(s * a, sign * b, t * c),
                    _ => Vector3::new(s * a, t * b, sign * c),
                }
            }
            ShapeClass::Cylinder => {
                let (r, h) = (d0, d1);
                let th = rng.random_range(0.0..2.0 * PI);
                match pick(&[4.0 * PI * r * h, PI * r * r, PI * r * r], rng) {
                    0 => Vector3::new(r * th.cos(), r * th.sin(), rng.random_range(-h..h)),
                    f => {
                        let rho = r * rng.random::<f64>().sqrt();
                        Vector3::new(rho * th.cos(), rho * th.sin(), if f == 1 { h } else { -h })
                    }
                }
            }
            ShapeClass::Cone => {
                let (r, h) = (d0, d1);
                let th = rng.random_range(0.0..2.0 * PI);
                let t = rng.random::<f64>().sqrt();
                match pick(&[PI * r * (r * r + h * h).sqrt(), PI * r * r], rng) {
                    0 => Vector3::new(r * t * th.cos(), r * t * th.sin(), h * (1.0 - t)),
                    _ => Vector3::new(r * t * th.cos(), r * t * th.sin(), 0.0),
                }
            }
            ShapeClass::Torus => {
                let (big, small) = (d0, d1);
                let th = rng.random_range(0.0..2.0 * PI);
                let phi = loop {
                    let phi = rng.random_range(0.0..2.0 * PI);
                    if rng.random_range(0.0..big + small) < big + small * phi.cos() {
                        break phi;
                    }
                };
                let rho = big + small * phi.cos();
                Vector3::new(rho * th.cos(), rho * th.sin(), small * phi.sin())
            }
            ShapeClass::Pyramid => {
                let (a, h) = (d0, d1);
                let lateral = a * (a * a + h * h).sqrt();
                let apex = Vector3::new(0.0, 0.0, h);
                let corners = [Vector3::new(a, a, 0.0), Vector3::new(-a, a, 0.0), Vector3::new(-a, -a, 0.0), Vector3::new(a, -a, 0.0)];
                match pick(&[4.0 * a * a, lateral, lateral, lateral, lateral], rng) {
                    0 => Vector3::new(rng.random_range(-a..a), rng.random_range(-a..a), 0.0),
                    f => {
                        let (p, q) = (corners[f - 1], corners[f % 4]);
                        let (mut s, mut t) = (rng.random::<f64>(), rng.random::<f64>());
                        if s + t > 1.0 {
                            (s, t) = (1.0 - s, 1.0 - t);
                        }
                        apex + (p - apex) * s + (q - apex) * t
                    }
                }
            }
            ShapeClass::Capsule => {
                let (r, hl) = (d0, d1);
                match pick(&[4.0 * PI * r * hl, 4.0 * PI * r * r], rng) {
                    0 => {
                        let th = rng.random_range(0.0..2.0 * PI);
                        Vector3::new(r * th.cos(), r * th.sin(), rng.random_range(-hl..hl))
                    }
                    _ => {
                        let s = sphere_point(rng) * r;
                        s + Vector3::new(0.0, 0.0, hl.copysign(s.z))
                    }
                }
            }
        }
    }

    /// Distance-like residual of `p` from the analytic surface; 0 on it.
    pub fn surface_residual(&self, p: &Point3<f64>) -> f64 {
        let q = self.rotation.transpose() * p.coords;
        let [d0, d1, d2] = self.dims;
        let rho = q.x.hypot(q.y);
        match self.class {
            ShapeClass::Sphere => (q.norm() - d0).abs(),
            ShapeClass::Ellipsoid => ((q.x / d0).powi(2) + (q.y / d1).powi(2) + (q.z / d2).powi(2)).sqrt() - 1.0,
            ShapeClass::Cube => (q.x.abs() / d0).max(q.y.abs() / d1).max(q.z.abs() / d2) - 1.0,
            ShapeClass::Cylinder => (rho / d0).max(q.z.abs() / d1) - 1.0,
            ShapeClass::Torus => ((rho - d0).hypot(q.z) - d1).abs(),
            ShapeClass::Cone => {
                let base = if rho <= d0 * (1.0 + 1e-12) { q.z.abs() } else { f64::INFINITY };
                let side = if (0.0..=d1).contains(&q.z) { (rho - d0 * (1.0 - q.z / d1)).abs() } else { f64::INFINITY };
                base.min(side)
            }
            ShapeClass::Pyramid => {
                let cheb = q.x.abs().max(q.y.abs());
                let base = if cheb <= d0 * (1.0 + 1e-12) { q.z.abs() } else { f64::INFINITY };
                let side = if (0.0..=d1).contains(&q.z) { (cheb - d0 * (1.0 - q.z / d1)).abs() } else { f64::INFINITY };
                base.min(side)
            }
            ShapeClass::Capsule => {
                let z = q.z.clamp(-d1, d1);
                ((q - Vector3::new(0.0, 0.0, z)).norm() - d0).abs()
            }
        }
        .abs()
    }
}

fn sphere_point(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let z: f64 = rng.random_range(-1.0..1.0);
    let th = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    Vector3::new(r * th.cos(), r * th.sin(), z)
}

/// Index drawn with probability proportional to `weights`.
fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn samples_lie_on_surface() {
        for mode in [RotationMode::None, RotationMode::Vertical, RotationMode::Full] {
            for (i, class) in ShapeClass::ALL.into_iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                let spec = ShapeSpec::random(class, mode, 2000, &mut rng);
                for p in spec.sample(&mut rng).unwrap() {
                    let r = spec.surface_residual(&p);
                    assert!(r <= 1e-9, "{class} {mode}: residual {r}");
                }
                // a point pushed off the surface is detected
                let off = Point3::from(spec.rotation * Vector3::new(0.0, 0.0, 5.0));
                assert!(spec.surface_residual(&off) > 0.1, "{class}");
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let spec = ShapeSpec::random(ShapeClass::Torus, RotationMode::Full, 50, &mut ChaCha8Rng::seed_from_u64(3));
        let a = spec.sample(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = spec.sample(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cube_faces_are_area_weighted() {
        let spec = ShapeSpec { class: ShapeClass::Cube, dims: [2.0, 1.0, 1.0], rotation: Matrix3::identity(), samples: 40_000 };
        let pts = spec.sample(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        // the ±x faces hold 1·1 / (1·1 + 2·1 + 2·1) = 1/5 of the area
        let on_x = pts.iter().filter(|p| (p.x.abs() - 2.0).abs() < 1e-12).count() as f64 / pts.len() as f64;
        assert!((on_x - 0.2).abs() < 0.01, "{on_x}");
    }

    #[test]
    fn names_round_trip() {
        for c in ShapeClass::ALL {
            assert_eq!(c.name().parse::<ShapeClass>().unwrap(), c);
        }
        assert!("blob".parse::<ShapeClass>().is_err());
        assert_eq!("full".parse::<RotationMode>().unwrap(), RotationMode::Full);
    }
}
