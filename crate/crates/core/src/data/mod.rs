//! Procedural datasets: generation, on-disk layout, manifest and the
//! closure check that re-validates every file against the manifest.

pub mod formats;
pub mod shapes;

use std::path::{Path, PathBuf};

use nalgebra::Matrix3x4;

use crate::config::{join_list, Config};
use crate::error::{Error, Result};
use crate::geometry::{build_view_rig, farthest_point_sample, normalize_unit_cube, project_with, PointCloud, DEFAULT_RIG_RADIUS};
use crate::renderer::{extract_correspondences, render_views, CorrespondenceSet, Image, RenderStyle};
use crate::seeding::{derive_seed, stream, tag};
use formats::{
    decode_correspondences, encode_correspondences, quantize_cloud, quantize_image, read_pcd, read_ppm, read_text, sig9, write_atomic,
    write_pcd, write_ppm,
};
use shapes::{RotationMode, ShapeClass, ShapeSpec};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_ECHO_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub classes: Vec<ShapeClass>,
    pub per_class: usize,
    /// Points per cloud after farthest-point sampling.
    pub points: usize,
    /// Surface samples drawn before farthest-point sampling.
    pub surface_samples: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub style: RenderStyle,
    pub splat_radius: usize,
    pub rig_radius: f64,
    pub rotation: RotationMode,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: ShapeClass::ALL.to_vec(),
            per_class: 64,
            points: 256,
            surface_samples: 2048,
            views: 6,
            width: 32,
            height: 32,
            style: RenderStyle::Rgb,
            splat_radius: 1,
            rig_radius: DEFAULT_RIG_RADIUS,
            rotation: RotationMode::Full,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

pub const DATA_KEYS: &[&str] = &[
    "classes",
    "per_class",
    "points",
    "surface_samples",
    "views",
    "width",
    "height",
    "style",
    "splat_radius",
    "rig_radius",
    "rotation",
    "test_fraction",
    "seed",
];

impl DataConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            classes: c.get_list("classes", d.classes)?,
            per_class: c.get_or("per_class", d.per_class)?,
            points: c.get_or("points", d.points)?,
            surface_samples: c.get_or("surface_samples", d.surface_samples)?,
            views: c.get_or("views", d.views)?,
            width: c.get_or("width", d.width)?,
            height: c.get_or("height", d.height)?,
            style: c.get_or("style", d.style)?,
            splat_radius: c.get_or("splat_radius", d.splat_radius)?,
            rig_radius: c.get_or("rig_radius", d.rig_radius)?,
            rotation: c.get_or("rotation", d.rotation)?,
            test_fraction: c.get_or("test_fraction", d.test_fraction)?,
            seed: c.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        c.set("classes", join_list(&self.classes));
        c.set("per_class", self.per_class);
        c.set("points", self.points);
        c.set("surface_samples", self.surface_samples);
        c.set("views", self.views);
        c.set("width", self.width);
        c.set("height", self.height);
        c.set("style", self.style);
        c.set("splat_radius", self.splat_radius);
        c.set("rig_radius", self.rig_radius);
        c.set("rotation", self.rotation);
        c.set("test_fraction", self.test_fraction);
        c.set("seed", self.seed);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if self.classes.is_empty() || seen.len() != self.classes.len() {
            return Err(Error::contract(format!("classes {:?} must be non-empty and distinct", self.classes)));
        }
        if self.per_class == 0 || self.points == 0 || self.views == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::contract("per_class, points, views, width and height must be positive"));
        }
        if self.surface_samples < self.points {
            return Err(Error::contract(format!("surface_samples {} below points {}", self.surface_samples, self.points)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::contract(format!("test_fraction {} outside [0, 1)", self.test_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::contract(format!("unknown split {s:?}"))),
        }
    }
}

/// One object with its renders. `cloud` and `views` hold exactly the
/// on-disk precision, so a written and re-loaded dataset compares equal.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    pub id: usize,
    pub class: ShapeClass,
    pub label: usize,
    pub split: Split,
    pub cloud: PointCloud,
    pub views: Vec<Image>,
    pub matrices: Vec<Matrix3x4<f64>>,
    pub correspondences: CorrespondenceSet,
}

/// `objects[i].id == i` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub objects: Vec<ObjectRecord>,
    /// Objects dropped during generation, with the reason.
    pub skipped: Vec<(usize, String)>,
}

impl Dataset {
    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.objects.iter().filter(|o| o.split == split).map(|o| o.id).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.config.classes.len()
    }

    pub fn image_count(&self) -> usize {
        self.objects.iter().map(|o| o.views.len()).sum()
    }
}

fn depth_on_disk(d: f64) -> f64 {
    sig9(d).parse().expect("sig9 output parses")
}

fn build_object(cfg: &DataConfig, id: usize, class: ShapeClass, label: usize, rig: &crate::geometry::ViewRig) -> Result<ObjectRecord> {
    let mut rng = stream(cfg.seed, &[tag::SHAPE, id as u64]);
    let spec = ShapeSpec::random(class, cfg.rotation, cfg.surface_samples, &mut rng);
    let surface = PointCloud::new(spec.sample(&mut rng)?);
    let normalized = normalize_unit_cube(&surface)?;
    let sampled = farthest_point_sample(&normalized, cfg.points, derive_seed(cfg.seed, &[tag::SHAPE, id as u64, 1]))?;
    let cloud = quantize_cloud(&sampled).with_label(label);
    let (images, buffers) = render_views(&cloud, rig, cfg.style, cfg.splat_radius)?;
    let mut correspondences = extract_correspondences(id, &cloud, rig, &buffers)?;
    correspondences.entries.iter_mut().for_each(|e| e.depth = depth_on_disk(e.depth));
    Ok(ObjectRecord {
        id,
        class,
        label,
        split: Split::Train,
        cloud,
        views: images.iter().map(quantize_image).collect(),
        matrices: rig.cameras.iter().map(|c| c.projection_matrix()).collect(),
        correspondences,
    })
}

/// Samples, normalizes, subsamples and renders `per_class` objects of
/// every class, then splits each class `1 − f : f` into train and test.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let rig = build_view_rig(cfg.views, cfg.rig_radius, (cfg.width, cfg.height))?;
    let mut objects = Vec::new();
    let mut skipped = Vec::new();
    for (label, &class) in cfg.classes.iter().enumerate() {
        let mut members = Vec::new();
        for k in 0..cfg.per_class {
            let id = label * cfg.per_class + k;
            match build_object(cfg, id, class, label, &rig) {
                Ok(o) => members.push(o),
                Err(e) => skipped.push((id, e.to_string())),
            }
        }
        let n = members.len();
        let n_test = ((cfg.test_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream(cfg.seed, &[tag::SPLIT, label as u64]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for &i in &order[..n_test] {
            members[i].split = Split::Test;
        }
        objects.extend(members);
    }
    // dense ids keep `objects[i].id == i` even when objects were skipped
    for (i, o) in objects.iter_mut().enumerate() {
        o.id = i;
        o.correspondences.entries.iter_mut().for_each(|e| e.object_id = i);
    }
    Ok(Dataset { config: cfg.clone(), objects, skipped })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewEntry {
    pub image: String,
    pub correspondences: String,
    pub matrix: [f64; 12],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectEntry {
    pub id: usize,
    pub class: ShapeClass,
    pub label: usize,
    pub split: Split,
    pub cloud: String,
    pub views: Vec<ViewEntry>,
}

/// Header block (version plus the data config echo), then one blank-line
/// separated `key=value` block per object.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DataConfig,
    pub objects: Vec<ObjectEntry>,
}

fn matrix_values(m: &Matrix3x4<f64>) -> [f64; 12] {
    let mut out = [0.0; 12];
    for r in 0..3 {
        for c in 0..4 {
            out[4 * r + c] = m[(r, c)];
        }
    }
    out
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("version={}\n", self.version);
        out.push_str(&self.config.to_config().to_text());
        out.push_str(&format!("objects={}\n", self.objects.len()));
        for o in &self.objects {
            out.push_str(&format!("\nid={}\nclass={}\nlabel={}\nsplit={}\ncloud={}\n", o.id, o.class, o.label, o.split, o.cloud));
            for (j, v) in o.views.iter().enumerate() {
                let m: Vec<String> = v.matrix.iter().map(|x| x.to_string()).collect();
                out.push_str(&format!("view.{j}.image={}\nview.{j}.correspondences={}\nview.{j}.matrix={}\n", v.image, v.correspondences, m.join(" ")));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        // blocks of (first line number, key=value pairs)
        type Block = (usize, Vec<(usize, String, String)>);
        let mut blocks: Vec<Block> = Vec::new();
        let mut current: Option<Block> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                blocks.extend(current.take());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key=value, got {line:?}") })?;
            current.get_or_insert_with(|| (i + 1, Vec::new())).1.push((i + 1, k.to_string(), v.to_string()));
        }
        blocks.extend(current);
        let mut blocks = blocks.into_iter();
        let (_, header) = blocks.next().ok_or_else(|| Error::Parse { line: 1, msg: "empty manifest".into() })?;

        let mut cfg = Config::default();
        let mut version = None;
        let mut count = None;
        for (ln, k, v) in header {
            let bad = |what: &str| Error::Parse { line: ln, msg: format!("bad {what} {v:?}") };
            match k.as_str() {
                "version" => version = Some(v.parse::<u32>().map_err(|_| bad("version"))?),
                "objects" => count = Some(v.parse::<usize>().map_err(|_| bad("object count"))?),
                _ => cfg.set(k, v),
            }
        }
        let version = version.ok_or_else(|| Error::Parse { line: 1, msg: "missing version".into() })?;
        if version != MANIFEST_VERSION {
            return Err(Error::Parse { line: 1, msg: format!("manifest version {version}, expected {MANIFEST_VERSION}") });
        }
        cfg.check_known(DATA_KEYS)?;
        let config = DataConfig::from_config(&cfg)?;

        let mut objects = Vec::new();
        for (start, kv) in blocks {
            let field = |key: &str| {
                kv.iter()
                    .find(|(_, k, _)| k == key)
                    .map(|(ln, _, v)| (*ln, v.as_str()))
                    .ok_or_else(|| Error::Parse { line: start, msg: format!("object block missing {key}") })
            };
            let num = |key: &str| -> Result<usize> {
                let (ln, v) = field(key)?;
                v.parse().map_err(|_| Error::Parse { line: ln, msg: format!("bad {key} {v:?}") })
            };
            let (ln, class) = field("class")?;
            let class = class.parse().map_err(|e: Error| Error::Parse { line: ln, msg: e.to_string() })?;
            let (ln, split) = field("split")?;
            let split = split.parse().map_err(|e: Error| Error::Parse { line: ln, msg: e.to_string() })?;
            let mut views = Vec::with_capacity(config.views);
            for j in 0.. {
                let Ok((_, image)) = field(&format!("view.{j}.image")) else { break };
                let (_, corr) = field(&format!("view.{j}.correspondences"))?;
                let (ln, m) = field(&format!("view.{j}.matrix"))?;
                let vals: Vec<f64> = m
                    .split_whitespace()
                    .map(|s| s.parse::<f64>().map_err(|_| Error::Parse { line: ln, msg: format!("bad matrix value {s:?}") }))
                    .collect::<Result<_>>()?;
                let matrix: [f64; 12] =
                    vals.try_into().map_err(|v: Vec<f64>| Error::Parse { line: ln, msg: format!("matrix has {} values, expected 12", v.len()) })?;
                views.push(ViewEntry { image: image.to_string(), correspondences: corr.to_string(), matrix });
            }
            if views.len() != config.views {
                return Err(Error::Parse { line: start, msg: format!("object lists {} views, manifest declares {}", views.len(), config.views) });
            }
            objects.push(ObjectEntry { id: num("id")?, class, label: num("label")?, split, cloud: field("cloud")?.1.to_string(), views });
        }
        if count != Some(objects.len()) {
            return Err(Error::Parse { line: 1, msg: format!("header declares {count:?} objects, found {}", objects.len()) });
        }
        Ok(Self { version, config, objects })
    }
}

fn object_dir(id: usize) -> String {
    format!("objects/{id:05}")
}

/// Writes every object file, the manifest and the config echo, then runs
/// the closure check on the result.
pub fn write_dataset(ds: &Dataset, out_dir: &Path) -> Result<DatasetManifest> {
    let mut objects = Vec::with_capacity(ds.objects.len());
    for o in &ds.objects {
        let dir = object_dir(o.id);
        let cloud = format!("{dir}/cloud.pcd");
        write_pcd(&out_dir.join(&cloud), &o.cloud)?;
        let mut views = Vec::with_capacity(o.views.len());
        for (j, (img, m)) in o.views.iter().zip(&o.matrices).enumerate() {
            let image = format!("{dir}/view{j:02}.ppm");
            let correspondences = format!("{dir}/view{j:02}.csv");
            write_ppm(&out_dir.join(&image), img)?;
            let set = CorrespondenceSet { entries: o.correspondences.entries.iter().filter(|e| e.view_id == j).copied().collect() };
            write_atomic(&out_dir.join(&correspondences), encode_correspondences(&set).as_bytes())?;
            views.push(ViewEntry { image, correspondences, matrix: matrix_values(m) });
        }
        objects.push(ObjectEntry { id: o.id, class: o.class, label: o.label, split: o.split, cloud, views });
    }
    let manifest = DatasetManifest { version: MANIFEST_VERSION, config: ds.config.clone(), objects };
    write_atomic(&out_dir.join(CONFIG_ECHO_FILE), ds.config.to_config().to_text().as_bytes())?;
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    verify_dataset(out_dir)?;
    Ok(manifest)
}

/// Loads a dataset directory, re-checking every correspondence against the
/// stored matrix and point cloud.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::parse(&read_text(&dir.join(MANIFEST_FILE))?)?;
    let cfg = manifest.config.clone();
    let mut objects = Vec::with_capacity(manifest.objects.len());
    for (i, o) in manifest.objects.iter().enumerate() {
        if o.id != i {
            return Err(Error::contract(format!("manifest object {i} carries id {}", o.id)));
        }
        if o.label >= cfg.classes.len() || cfg.classes[o.label] != o.class {
            return Err(Error::contract(format!("object {i}: label {} does not name class {}", o.label, o.class)));
        }
        let cloud = read_pcd(&dir.join(&o.cloud))?.with_label(o.label);
        let mut views = Vec::with_capacity(o.views.len());
        let mut matrices = Vec::with_capacity(o.views.len());
        let mut correspondences = CorrespondenceSet::default();
        for (j, v) in o.views.iter().enumerate() {
            let img = read_ppm(&dir.join(&v.image))?;
            if (img.width, img.height) != (cfg.width, cfg.height) {
                return Err(Error::contract(format!("{}: {}x{} image, manifest says {}x{}", v.image, img.width, img.height, cfg.width, cfg.height)));
            }
            let m = Matrix3x4::from_row_slice(&v.matrix);
            let set = decode_correspondences(&read_text(&dir.join(&v.correspondences))?)?;
            for (r, e) in set.entries.iter().enumerate() {
                let at = || format!("{} row {}", v.correspondences, r + 2);
                if e.object_id != i || e.view_id != j {
                    return Err(Error::contract(format!("{}: entry names object {} view {}", at(), e.object_id, e.view_id)));
                }
                let p = cloud.points.get(e.point_index).ok_or_else(|| Error::contract(format!("{}: point {} not in cloud", at(), e.point_index)))?;
                let cell = project_with(&m, p).map(|(u, v)| (u.floor(), v.floor()));
                if cell != Some((e.pixel_u as f64, e.pixel_v as f64)) {
                    return Err(Error::contract(format!("{}: point {} does not project into ({}, {})", at(), e.point_index, e.pixel_u, e.pixel_v)));
                }
            }
            correspondences.extend(set);
            views.push(img);
            matrices.push(m);
        }
        objects.push(ObjectRecord { id: i, class: o.class, label: o.label, split: o.split, cloud, views, matrices, correspondences });
    }
    Ok(Dataset { config: cfg, objects, skipped: Vec::new() })
}

/// Manifest closure: every referenced file exists and parses.
pub fn verify_dataset(dir: &Path) -> Result<usize> {
    Ok(load_dataset(dir)?.objects.len())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig { per_class: 5, points: 64, surface_samples: 256, views: 4, width: 16, height: 16, ..DataConfig::default() }
    }

    #[test]
    fn counts_and_split() {
        let ds = generate_dataset(&small()).unwrap();
        assert_eq!(ds.objects.len(), 40);
        assert_eq!(ds.image_count(), 160);
        assert!(ds.skipped.is_empty());
        for label in 0..8 {
            let test = ds.objects.iter().filter(|o| o.label == label && o.split == Split::Test).count();
            assert_eq!(test, 1);
        }
        assert!(ds.objects.iter().enumerate().all(|(i, o)| o.id == i && o.cloud.len() == 64));
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&DataConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.objects[0].cloud, c.objects[0].cloud);
    }

    #[test]
    fn correspondences_reproject_exactly() {
        let ds = generate_dataset(&small()).unwrap();
        for o in &ds.objects {
            assert!(!o.correspondences.is_empty());
            for e in &o.correspondences.entries {
                let (u, v) = project_with(&o.matrices[e.view_id], &o.cloud.points[e.point_index]).unwrap();
                assert_eq!((u.floor() as usize, v.floor() as usize), (e.pixel_u, e.pixel_v));
            }
        }
    }

    #[test]
    fn disk_round_trip_and_determinism() {
        let ds = generate_dataset(&small()).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_dataset(&ds, a.path()).unwrap();
        write_dataset(&ds, b.path()).unwrap();
        assert_eq!(load_dataset(a.path()).unwrap(), ds);
        assert_eq!(DatasetManifest::parse(&ma.to_text()).unwrap(), ma);
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
        assert_eq!(ma.objects.iter().map(|o| o.views.len()).sum::<usize>(), 160);
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn tampered_files_fail_closure() {
        let ds = generate_dataset(&DataConfig { classes: vec![ShapeClass::Cube], per_class: 2, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let csv = dir.path().join("objects/00000/view00.csv");
        let text = std::fs::read_to_string(&csv).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut f: Vec<String> = lines[1].split(',').map(String::from).collect();
        f[3] = ((f[3].parse::<usize>().unwrap() + 3) % 16).to_string();
        lines[1] = f.join(",");
        std::fs::write(&csv, lines.join("\n") + "\n").unwrap();
        assert!(matches!(verify_dataset(dir.path()), Err(Error::Contract(_))));
        std::fs::remove_file(dir.path().join("objects/00001/cloud.pcd")).unwrap();
        assert!(matches!(verify_dataset(dir.path()), Err(Error::Io { .. }) | Err(Error::Contract(_))));
    }

    #[test]
    fn paper_scale_config_is_accepted() {
        let cfg = DataConfig { classes: vec![ShapeClass::Torus], per_class: 1, points: 1024, surface_samples: 4096, views: 12, ..DataConfig::default() };
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.objects[0].views.len(), 12);
        assert_eq!(ds.objects[0].cloud.len(), 1024);
        assert_eq!(ds.ids(Split::Train), vec![0]);
    }

    #[test]
    fn unwritable_output_is_io_error() {
        let ds = generate_dataset(&DataConfig { classes: vec![ShapeClass::Cube], per_class: 1, ..small() }).unwrap();
        assert!(matches!(write_dataset(&ds, Path::new("/proc/forbidden")), Err(Error::Io { .. })));
    }

    #[test]
    fn config_round_trip() {
        let cfg = small();
        assert_eq!(DataConfig::from_config(&cfg.to_config()).unwrap(), cfg);
        let mut bad = cfg.to_config();
        bad.set("classes", "cube,cube");
        assert!(DataConfig::from_config(&bad).is_err());
    }
}
