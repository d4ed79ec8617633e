//! On-disk formats: OFF meshes, PCD1 clouds, binary PPM images,
//! correspondence CSV and metrics CSV. Every write is atomic.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Point3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::renderer::{Correspondence, CorrespondenceSet, Image};

pub const PCD_MAGIC: &[u8; 4] = b"PCD1";
pub const CORRESPONDENCE_HEADER: &str = "object_id,view_id,point_index,pixel_u,pixel_v,depth";

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Nine significant digits in scientific notation.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Triangle mesh; polygons are fan-triangulated on load.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    /// `n` points uniform by area over the triangles.
    pub fn sample_surface(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
        let areas: Vec<f64> = self
            .faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i]);
                (b - a).cross(&(c - a)).norm() / 2.0
            })
            .collect();
        let total: f64 = areas.iter().sum();
        if !(total > 0.0) || n == 0 {
            return Err(Error::Degenerate("mesh has no surface area to sample".into()));
        }
        let mut cumulative = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cumulative.push(acc);
        }
        let points = (0..n)
            .map(|_| {
                let x = rng.random_range(0.0..total);
                let fi = cumulative.partition_point(|&c| c <= x).min(self.faces.len() - 1);
                let [a, b, c] = self.faces[fi].map(|i| self.vertices[i]);
                let (mut s, mut t) = (rng.random::<f64>(), rng.random::<f64>());
                if s + t > 1.0 {
                    (s, t) = (1.0 - s, 1.0 - t);
                }
                a + (b - a) * s + (c - a) * t
            })
            .collect();
        Ok(PointCloud::new(points))
    }
}

pub fn load_off_mesh(path: &Path) -> Result<Mesh> {
    parse_off(&read_text(path)?)
}

/// Parses OFF text. `#` starts a comment; blank lines are skipped. Vertex
/// lines carry exactly three coordinates.
pub fn parse_off(text: &str) -> Result<Mesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let last_line = text.lines().count() + 1;
    let eof = |what: &str| Error::Parse { line: last_line, msg: format!("unexpected end of file, expected {what}") };

    let (ln, header) = lines.next().ok_or_else(|| eof("OFF header"))?;
    let mut head = header.split_whitespace();
    if head.next() != Some("OFF") {
        return Err(Error::Parse { line: ln, msg: format!("bad magic {header:?}, expected OFF") });
    }
    let inline: Vec<&str> = head.collect();
    let (ln, counts) = if inline.is_empty() {
        let (ln, l) = lines.next().ok_or_else(|| eof("counts line"))?;
        (ln, l.split_whitespace().collect::<Vec<_>>())
    } else {
        (ln, inline)
    };
    let parse_count = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse { line: ln, msg: format!("bad count {s:?}") });
    if counts.len() < 2 || counts.len() > 3 {
        return Err(Error::Parse { line: ln, msg: format!("counts line needs 'vertices faces [edges]', got {} fields", counts.len()) });
    }
    let nv = parse_count(counts[0])?;
    let nf = parse_count(counts[1])?;

    let mut vertices = Vec::with_capacity(nv);
    for i in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| eof(&format!("vertex {} of {nv}", i + 1)))?;
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse { line: ln, msg: format!("expected vertex {} of {nv} with 3 coordinates, found {} fields", i + 1, fields.len()) });
        }
        let mut c = [0.0f64; 3];
        for (slot, f) in c.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| Error::Parse { line: ln, msg: format!("bad coordinate {f:?}") })?;
            if !slot.is_finite() {
                return Err(Error::Parse { line: ln, msg: format!("non-finite coordinate {f:?}") });
            }
        }
        vertices.push(Point3::new(c[0], c[1], c[2]));
    }

    let mut faces = Vec::with_capacity(nf);
    for i in 0..nf {
        let (ln, l) = lines.next().ok_or_else(|| eof(&format!("face {} of {nf}", i + 1)))?;
        let nums: Vec<usize> = l
            .split_whitespace()
            .map(|f| f.parse::<usize>().map_err(|_| Error::Parse { line: ln, msg: format!("bad face index {f:?}") }))
            .collect::<Result<_>>()?;
        let (&k, idx) = nums.split_first().ok_or_else(|| Error::Parse { line: ln, msg: "empty face line".into() })?;
        if k < 3 || idx.len() < k {
            return Err(Error::Parse { line: ln, msg: format!("face {} declares {k} vertices, has {}", i + 1, idx.len()) });
        }
        if let Some(bad) = idx[..k].iter().find(|&&v| v >= nv) {
            return Err(Error::Parse { line: ln, msg: format!("face index {bad} outside {nv} vertices") });
        }
        for j in 1..k - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::Parse { line: ln, msg: format!("content after the {nf} declared faces") });
    }
    Ok(Mesh { vertices, faces })
}

pub fn encode_pcd(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 12 * cloud.len());
    out.extend_from_slice(PCD_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for c in [p.x, p.y, p.z] {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pcd(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 4 || &bytes[..4] != PCD_MAGIC {
        return Err(Error::Format { offset: 0, msg: "missing PCD1 magic".into() });
    }
    if bytes.len() < 8 {
        return Err(Error::Format { offset: bytes.len() as u64, msg: format!("header needs 8 bytes, file has {}", bytes.len()) });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = 8 + 12 * n;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            msg: format!("{n} points need {expected} bytes, file has {}", bytes.len()),
        });
    }
    let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as f64;
    Ok(PointCloud::new((0..n).map(|i| Point3::new(f(8 + 12 * i), f(12 + 12 * i), f(16 + 12 * i))).collect()))
}

pub fn write_pcd(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, &encode_pcd(cloud))
}

pub fn read_pcd(path: &Path) -> Result<PointCloud> {
    decode_pcd(&read_bytes(path)?)
}

/// Rounds every coordinate through `f32`, the on-disk precision.
pub fn quantize_cloud(cloud: &PointCloud) -> PointCloud {
    let q = |c: f64| c as f32 as f64;
    PointCloud { points: cloud.points.iter().map(|p| Point3::new(q(p.x), q(p.y), q(p.z))).collect(), label: cloud.label }
}

/// Rounds every channel to the nearest of 256 levels, the on-disk precision.
pub fn quantize_image(image: &Image) -> Image {
    Image { width: image.width, height: image.height, data: image.data.iter().map(|&x| to_byte(x) as f64 / 255.0).collect() }
}

fn to_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&x| to_byte(x)));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { offset: pos as u64, msg: "truncated PPM header".into() });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P6" {
        return Err(Error::Format { offset: 0, msg: format!("bad PPM magic {:?}", fields[0].1) });
    }
    let num = |i: usize| {
        fields[i].1.parse::<usize>().map_err(|_| Error::Format { offset: fields[i].0 as u64, msg: format!("bad PPM header field {:?}", fields[i].1) })
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(Error::Format { offset: fields[1].0 as u64, msg: format!("unsupported PPM {w}x{h} maxval {maxval}") });
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() != pos + need {
        return Err(Error::Format {
            offset: bytes.len().min(pos + need) as u64,
            msg: format!("pixel data needs {need} bytes, file has {}", bytes.len().saturating_sub(pos)),
        });
    }
    Ok(Image { width: w, height: h, data: bytes[pos..].iter().map(|&b| b as f64 / 255.0).collect() })
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_ppm(image))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read_bytes(path)?)
}

pub fn encode_correspondences(set: &CorrespondenceSet) -> String {
    let mut out = String::with_capacity(32 * (set.len() + 1));
    out.push_str(CORRESPONDENCE_HEADER);
    out.push('\n');
    for e in &set.entries {
        out.push_str(&format!("{},{},{},{},{},{}\n", e.object_id, e.view_id, e.point_index, e.pixel_u, e.pixel_v, sig9(e.depth)));
    }
    out
}

pub fn decode_correspondences(text: &str) -> Result<CorrespondenceSet> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CORRESPONDENCE_HEADER => {}
        other => {
            return Err(Error::Parse { line: 1, msg: format!("expected header {CORRESPONDENCE_HEADER:?}, got {:?}", other.map(|o| o.1)) })
        }
    }
    let mut entries = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse { line, msg: format!("expected 6 fields, found {}", f.len()) });
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse { line, msg: format!("bad integer {s:?}") });
        let depth: f64 = f[5].parse().map_err(|_| Error::Parse { line, msg: format!("bad depth {:?}", f[5]) })?;
        entries.push(Correspondence {
            object_id: int(f[0])?,
            view_id: int(f[1])?,
            point_index: int(f[2])?,
            pixel_u: int(f[3])?,
            pixel_v: int(f[4])?,
            depth,
        });
    }
    Ok(CorrespondenceSet { entries })
}

/// CSV with `header`, LF line endings, rows in the given order.
pub fn write_metrics(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(r) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(Error::contract(format!("metrics row has {} fields for {} columns", r.len(), header.len())));
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}
