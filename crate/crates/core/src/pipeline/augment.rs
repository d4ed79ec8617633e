//! Image augmentations: random resized crop, color jitter, Gaussian blur.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::renderer::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    /// Crop area as a fraction of the image, in `(0, 1]`.
    pub crop_scale: (f64, f64),
    /// Jitter strengths; each factor is drawn from `[1 − s, 1 + s]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Odd blur kernel width.
    pub blur_kernel: usize,
    pub blur_sigma: (f64, f64),
    pub p_crop: f64,
    pub p_color: f64,
    pub p_blur: f64,
    /// Base of the per-item augmentation streams.
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            crop_scale: (0.3, 1.0),
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            blur_kernel: 3,
            blur_sigma: (0.1, 1.0),
            p_crop: 0.5,
            p_color: 0.5,
            p_blur: 0.5,
            seed: 0,
        }
    }
}

pub const AUGMENT_KEYS: &[&str] = &[
    "aug_crop_min",
    "aug_crop_max",
    "aug_brightness",
    "aug_contrast",
    "aug_saturation",
    "aug_blur_kernel",
    "aug_blur_sigma_min",
    "aug_blur_sigma_max",
    "aug_p_crop",
    "aug_p_color",
    "aug_p_blur",
];

impl AugmentationSpec {
    /// All probabilities zero: the identity.
    pub fn identity() -> Self {
        Self { p_crop: 0.0, p_color: 0.0, p_blur: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::contract(format!("crop scales ({lo}, {hi}) must satisfy 0 < min <= max <= 1")));
        }
        if self.blur_kernel.is_multiple_of(2) {
            return Err(Error::contract(format!("blur kernel {} must be odd", self.blur_kernel)));
        }
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::contract(format!("blur sigma range ({slo}, {shi}) invalid")));
        }
        for (name, s) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::contract(format!("{name} strength {s} outside [0, 1]")));
            }
        }
        for (name, p) in [("crop", self.p_crop), ("color", self.p_color), ("blur", self.p_blur)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::contract(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn from_config(c: &Config, seed: u64) -> Result<Self> {
        let d = Self::default();
        let spec = Self {
            crop_scale: (c.get_or("aug_crop_min", d.crop_scale.0)?, c.get_or("aug_crop_max", d.crop_scale.1)?),
            brightness: c.get_or("aug_brightness", d.brightness)?,
            contrast: c.get_or("aug_contrast", d.contrast)?,
            saturation: c.get_or("aug_saturation", d.saturation)?,
            blur_kernel: c.get_or("aug_blur_kernel", d.blur_kernel)?,
            blur_sigma: (c.get_or("aug_blur_sigma_min", d.blur_sigma.0)?, c.get_or("aug_blur_sigma_max", d.blur_sigma.1)?),
            p_crop: c.get_or("aug_p_crop", d.p_crop)?,
            p_color: c.get_or("aug_p_color", d.p_color)?,
            p_blur: c.get_or("aug_p_blur", d.p_blur)?,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn write_config(&self, c: &mut Config) {
        c.set("aug_crop_min", self.crop_scale.0);
        c.set("aug_crop_max", self.crop_scale.1);
        c.set("aug_brightness", self.brightness);
        c.set("aug_contrast", self.contrast);
        c.set("aug_saturation", self.saturation);
        c.set("aug_blur_kernel", self.blur_kernel);
        c.set("aug_blur_sigma_min", self.blur_sigma.0);
        c.set("aug_blur_sigma_max", self.blur_sigma.1);
        c.set("aug_p_crop", self.p_crop);
        c.set("aug_p_color", self.p_color);
        c.set("aug_p_blur", self.p_blur);
    }
}

/// Crop, then jitter, then blur, each gated by its probability; values
/// end clamped to `[0, 1]`. Every gate and parameter is drawn from `rng`
/// in a fixed order, whether or not the op fires.
pub fn augment_image(image: &Image, spec: &AugmentationSpec, rng: &mut ChaCha8Rng) -> Image {
    let crop_gate = rng.random::<f64>() < spec.p_crop;
    let scale = rng.random_range(spec.crop_scale.0..=spec.crop_scale.1);
    let (ox, oy) = (rng.random::<f64>(), rng.random::<f64>());
    let color_gate = rng.random::<f64>() < spec.p_color;
    let jitter = |s: f64, r: &mut ChaCha8Rng| r.random_range(1.0 - s..=1.0 + s);
    let (b, c, s) = (jitter(spec.brightness, rng), jitter(spec.contrast, rng), jitter(spec.saturation, rng));
    let blur_gate = rng.random::<f64>() < spec.p_blur;
    let sigma = rng.random_range(spec.blur_sigma.0..=spec.blur_sigma.1);

    let mut out = image.clone();
    if crop_gate {
        out = resized_crop(&out, scale, ox, oy);
    }
    if color_gate {
        color_jitter(&mut out, b, c, s);
    }
    if blur_gate {
        out = gaussian_blur(&out, spec.blur_kernel, sigma);
    }
    if crop_gate || color_gate || blur_gate {
        out.data.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    }
    out
}

/// Square-aspect crop covering `scale` of the area, placed at fractional
/// offset `(ox, oy)` of the free margin, resampled back by nearest neighbour.
pub fn resized_crop(image: &Image, scale: f64, ox: f64, oy: f64) -> Image {
    let (w, h) = (image.width, image.height);
    let side = scale.sqrt();
    let cw = ((side * w as f64).round() as usize).clamp(1, w);
    let ch = ((side * h as f64).round() as usize).clamp(1, h);
    let x0 = ((ox * (w - cw + 1) as f64) as usize).min(w - cw);
    let y0 = ((oy * (h - ch + 1) as f64) as usize).min(h - ch);
    let mut out = Image::filled(w, h, 0.0);
    for v in 0..h {
        for u in 0..w {
            out.set_pixel(u, v, image.pixel(x0 + u * cw / w, y0 + v * ch / h));
        }
    }
    out
}

fn gray(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Brightness scales values, contrast blends with the mean gray level,
/// saturation blends each pixel with its own gray level.
pub fn color_jitter(image: &mut Image, brightness: f64, contrast: f64, saturation: f64) {
    image.data.iter_mut().for_each(|x| *x = (*x * brightness).clamp(0.0, 1.0));
    let n = (image.width * image.height) as f64;
    let mean = image.data.chunks_exact(3).map(gray).sum::<f64>() / n;
    image.data.iter_mut().for_each(|x| *x = (mean + (*x - mean) * contrast).clamp(0.0, 1.0));
    for px in image.data.chunks_exact_mut(3) {
        let g = gray(px);
        px.iter_mut().for_each(|x| *x = (g + (*x - g) * saturation).clamp(0.0, 1.0));
    }
}

/// Normalized separable Gaussian with reflect padding (edge not repeated).
pub fn gaussian_blur(image: &Image, kernel: usize, sigma: f64) -> Image {
    let r = (kernel / 2) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (w, h) = (image.width as isize, image.height as isize);
    let reflect = |i: isize, n: isize| {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let pass = |src: &Image, horizontal: bool| {
        let mut dst = Image::filled(src.width, src.height, 0.0);
        for v in 0..h {
            for u in 0..w {
                let mut acc = [0.0; 3];
                for (t, kv) in (-r..=r).zip(&k) {
                    let (su, sv) = if horizontal { (reflect(u + t, w), v as usize) } else { (u as usize, reflect(v + t, h)) };
                    let p = src.pixel(su, sv);
                    for c in 0..3 {
                        acc[c] += kv * p[c];
                    }
                }
                dst.set_pixel(u as usize, v as usize, acc);
            }
        }
        dst
    };
    pass(&pass(image, true), false)
}
