//! Photometric and geometric input transformations.
//!
//! Photometric transforms only touch pixel values. Geometric transforms are
//! pure index remappings of the trailing two axes, so the same spec acts
//! exactly on images, label maps and logit stacks.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
pub const BLUR_KERNEL: usize = 5;
pub const BLUR_SIGMA: (f32, f32) = (0.1, 2.0);
pub const MAX_HUE: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhotometricKind {
    Grayscale,
    ColorJitter,
    GaussianBlur,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometricKind {
    Crop,
    Rotate90,
    PatchShuffle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PhotometricSpec {
    Grayscale,
    ColorJitter {
        brightness: f32,
        contrast: f32,
        saturation: f32,
        /// Hue offset in turns.
        hue: f32,
    },
    GaussianBlur {
        sigma: f32,
        kernel: usize,
    },
}

impl PhotometricSpec {
    pub fn identity() -> Self {
        PhotometricSpec::ColorJitter {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }

    pub fn kind(&self) -> PhotometricKind {
        match self {
            PhotometricSpec::Grayscale => PhotometricKind::Grayscale,
            PhotometricSpec::ColorJitter { .. } => PhotometricKind::ColorJitter,
            PhotometricSpec::GaussianBlur { .. } => PhotometricKind::GaussianBlur,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotometricConfig {
    pub strength: f32,
    pub kinds: Vec<PhotometricKind>,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        PhotometricConfig {
            strength: 0.75,
            kinds: vec![
                PhotometricKind::Grayscale,
                PhotometricKind::ColorJitter,
                PhotometricKind::GaussianBlur,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricConfig {
    pub crop_ratio: f32,
    pub patch_size: usize,
    /// Crop offsets and sizes are multiples of this (the backbone's output stride).
    pub align: usize,
    pub kinds: Vec<GeometricKind>,
}

impl Default for GeometricConfig {
    fn default() -> Self {
        GeometricConfig {
            crop_ratio: 0.5,
            patch_size: 16,
            align: 4,
            kinds: vec![GeometricKind::Crop, GeometricKind::Rotate90, GeometricKind::PatchShuffle],
        }
    }
}

pub fn sample_photometric<R: Rng + ?Sized>(cfg: &PhotometricConfig, rng: &mut R) -> Result<PhotometricSpec> {
    let s = cfg.strength;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::config(format!("photometric strength {s} outside [0, 1]")));
    }
    if cfg.kinds.is_empty() {
        return Err(Error::config("no photometric kinds enabled"));
    }
    let kind = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
    Ok(match kind {
        PhotometricKind::Grayscale => PhotometricSpec::Grayscale,
        PhotometricKind::ColorJitter => {
            let factor = |rng: &mut R| {
                if s == 0.0 {
                    1.0
                } else {
                    rng.random_range((1.0 - s).max(0.0)..=1.0 + s)
                }
            };
            let brightness = factor(rng);
            let contrast = factor(rng);
            let saturation = factor(rng);
            let h = s.min(MAX_HUE);
            let hue = if h == 0.0 { 0.0 } else { rng.random_range(-h..=h) };
            PhotometricSpec::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
            }
        }
        PhotometricKind::GaussianBlur => PhotometricSpec::GaussianBlur {
            sigma: rng.random_range(BLUR_SIGMA.0..=BLUR_SIGMA.1),
            kernel: BLUR_KERNEL,
        },
    })
}

fn check_image(x: &Tensor<f32>) -> Result<(usize, usize)> {
    if x.rank() != 3 || x.shape()[0] != 3 {
        return Err(Error::dim("photometric", format!("expected [3, H, W], got {:?}", x.shape())));
    }
    x.spatial()
}

fn gray_plane(x: &[f32], plane: usize) -> Vec<f32> {
    (0..plane)
        .map(|i| LUMA[0] * x[i] + LUMA[1] * x[plane + i] + LUMA[2] * x[2 * plane + i])
        .collect()
}

pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Rotates hue by `turns` on every pixel of a `[3, H, W]` image.
pub fn shift_hue(d: &mut [f32], plane: usize, turns: f32) {
    for i in 0..plane {
        let (h, s, v) = rgb_to_hsv(d[i], d[plane + i], d[2 * plane + i]);
        let (r, g, b) = hsv_to_rgb(h + turns, s, v);
        d[i] = r;
        d[plane + i] = g;
        d[2 * plane + i] = b;
    }
}

/// Normalized truncated Gaussian taps.
pub fn gaussian_kernel(sigma: f32, size: usize) -> Vec<f32> {
    let half = (size / 2) as f32;
    let mut k: Vec<f32> = (0..size)
        .map(|i| {
            let x = i as f32 - half;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur of every plane with edge clamping.
pub fn blur_planes(d: &mut [f32], planes: usize, h: usize, w: usize, kernel: &[f32]) {
    let half = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f32; h * w];
    for p in 0..planes {
        let plane = &mut d[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| {
                        let xx = (x as isize + i as isize - half).clamp(0, w as isize - 1) as usize;
                        kv * plane[y * w + xx]
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| {
                        let yy = (y as isize + i as isize - half).clamp(0, h as isize - 1) as usize;
                        kv * tmp[yy * w + x]
                    })
                    .sum();
            }
        }
    }
}

/// Applies `spec` to a `[3, H, W]` image with values in `[0, 1]`.
pub fn apply_photometric(spec: &PhotometricSpec, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = check_image(x)?;
    let plane = h * w;
    let mut out = x.clone();
    let d = out.data_mut();
    match *spec {
        PhotometricSpec::Grayscale => {
            let g = gray_plane(d, plane);
            for c in 0..3 {
                d[c * plane..(c + 1) * plane].copy_from_slice(&g);
            }
        }
        PhotometricSpec::ColorJitter {
            brightness,
            contrast,
            saturation,
            hue,
        } => {
            if brightness != 1.0 {
                d.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
            }
            if contrast != 1.0 {
                let mean = gray_plane(d, plane).iter().sum::<f32>() / plane as f32;
                d.iter_mut()
                    .for_each(|v| *v = (contrast * *v + (1.0 - contrast) * mean).clamp(0.0, 1.0));
            }
            if saturation != 1.0 {
                let g = gray_plane(d, plane);
                for c in 0..3 {
                    for (v, &gv) in d[c * plane..(c + 1) * plane].iter_mut().zip(&g) {
                        *v = (saturation * *v + (1.0 - saturation) * gv).clamp(0.0, 1.0);
                    }
                }
            }
            if hue != 0.0 {
                shift_hue(d, plane, hue);
            }
        }
        PhotometricSpec::GaussianBlur { sigma, kernel } => {
            let k = gaussian_kernel(sigma, kernel);
            blur_planes(d, 3, h, w, &k);
        }
    }
    d.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeometricSpec {
    Crop {
        src: (usize, usize),
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Rotate90 {
        src: (usize, usize),
        k: u8,
    },
    PatchShuffle {
        src: (usize, usize),
        patch: usize,
        /// Output cell `c` shows input cell `perm[c]` (row-major cells).
        perm: Vec<usize>,
    },
}

impl GeometricSpec {
    pub fn kind(&self) -> GeometricKind {
        match self {
            GeometricSpec::Crop { .. } => GeometricKind::Crop,
            GeometricSpec::Rotate90 { .. } => GeometricKind::Rotate90,
            GeometricSpec::PatchShuffle { .. } => GeometricKind::PatchShuffle,
        }
    }

    pub fn identity(h: usize, w: usize) -> Self {
        GeometricSpec::Crop {
            src: (h, w),
            top: 0,
            left: 0,
            height: h,
            width: w,
        }
    }

    pub fn source_size(&self) -> (usize, usize) {
        match *self {
            GeometricSpec::Crop { src, .. }
            | GeometricSpec::Rotate90 { src, .. }
            | GeometricSpec::PatchShuffle { src, .. } => src,
        }
    }

    pub fn output_size(&self) -> (usize, usize) {
        match *self {
            GeometricSpec::Crop { height, width, .. } => (height, width),
            GeometricSpec::Rotate90 { src: (h, w), k } => {
                if k % 2 == 1 {
                    (w, h)
                } else {
                    (h, w)
                }
            }
            GeometricSpec::PatchShuffle { src, .. } => src,
        }
    }

    /// True when every crop boundary lies on the `stride` grid.
    pub fn is_aligned(&self, stride: usize) -> bool {
        match *self {
            GeometricSpec::Crop {
                top,
                left,
                height,
                width,
                ..
            } => [top, left, height, width].iter().all(|v| v % stride == 0),
            _ => true,
        }
    }

    /// The spec undoing this one, where it exists (crops are not invertible
    /// outside the kept region).
    pub fn inverse(&self) -> Option<GeometricSpec> {
        match self {
            GeometricSpec::Crop { src, height, width, .. } => {
                (*src == (*height, *width)).then(|| self.clone())
            }
            GeometricSpec::Rotate90 { k, .. } => Some(GeometricSpec::Rotate90 {
                src: self.output_size(),
                k: (4 - k % 4) % 4,
            }),
            GeometricSpec::PatchShuffle { src, patch, perm } => {
                let mut inv = vec![0; perm.len()];
                for (c, &p) in perm.iter().enumerate() {
                    inv[p] = c;
                }
                Some(GeometricSpec::PatchShuffle {
                    src: *src,
                    patch: *patch,
                    perm: inv,
                })
            }
        }
    }

    /// For each output pixel (row-major), the flat input pixel it reads.
    pub fn index_map(&self) -> Vec<usize> {
        let (h, w) = self.source_size();
        let (oh, ow) = self.output_size();
        let mut map = Vec::with_capacity(oh * ow);
        match *self {
            GeometricSpec::Crop { top, left, .. } => {
                for y in 0..oh {
                    for x in 0..ow {
                        map.push((top + y) * w + left + x);
                    }
                }
            }
            GeometricSpec::Rotate90 { k, .. } => {
                for y in 0..oh {
                    for x in 0..ow {
                        // counter-clockwise quarter turns
                        let (sy, sx) = match k % 4 {
                            0 => (y, x),
                            1 => (x, w - 1 - y),
                            2 => (h - 1 - y, w - 1 - x),
                            _ => (h - 1 - x, y),
                        };
                        map.push(sy * w + sx);
                    }
                }
            }
            GeometricSpec::PatchShuffle { patch, ref perm, .. } => {
                let gw = w / patch;
                for y in 0..oh {
                    for x in 0..ow {
                        let src_cell = perm[(y / patch) * gw + x / patch];
                        let (cy, cx) = (src_cell / gw, src_cell % gw);
                        map.push((cy * patch + y % patch) * w + cx * patch + x % patch);
                    }
                }
            }
        }
        map
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        let r = shape.len();
        if r < 2 || (shape[r - 2], shape[r - 1]) != self.source_size() {
            return Err(Error::dim(
                "apply_geometric",
                format!("tensor {shape:?} does not match spec source size {:?}", self.source_size()),
            ));
        }
        Ok(())
    }
}

pub fn sample_geometric<R: Rng + ?Sized>(
    cfg: &GeometricConfig,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<GeometricSpec> {
    validate_geometric(cfg, h, w)?;
    let kind = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
    Ok(match kind {
        GeometricKind::Crop => {
            let a = cfg.align;
            let ch = (((cfg.crop_ratio * h as f32) as usize) / a * a).max(a).min(h);
            let cw = (((cfg.crop_ratio * w as f32) as usize) / a * a).max(a).min(w);
            let top = rng.random_range(0..=(h - ch) / a) * a;
            let left = rng.random_range(0..=(w - cw) / a) * a;
            GeometricSpec::Crop {
                src: (h, w),
                top,
                left,
                height: ch,
                width: cw,
            }
        }
        GeometricKind::Rotate90 => GeometricSpec::Rotate90 {
            src: (h, w),
            k: rng.random_range(1..=3),
        },
        GeometricKind::PatchShuffle => {
            let cells = (h / cfg.patch_size) * (w / cfg.patch_size);
            let mut perm: Vec<usize> = (0..cells).collect();
            perm.shuffle(rng);
            GeometricSpec::PatchShuffle {
                src: (h, w),
                patch: cfg.patch_size,
                perm,
            }
        }
    })
}

pub fn validate_geometric(cfg: &GeometricConfig, h: usize, w: usize) -> Result<()> {
    if !(cfg.crop_ratio > 0.0 && cfg.crop_ratio <= 1.0) {
        return Err(Error::config(format!("crop ratio {} outside (0, 1]", cfg.crop_ratio)));
    }
    if cfg.align == 0 || !h.is_multiple_of(cfg.align) || !w.is_multiple_of(cfg.align) {
        return Err(Error::config(format!("alignment {} does not divide {h}x{w}", cfg.align)));
    }
    if cfg.kinds.contains(&GeometricKind::PatchShuffle)
        && (cfg.patch_size == 0 || !h.is_multiple_of(cfg.patch_size) || !w.is_multiple_of(cfg.patch_size))
    {
        return Err(Error::config(format!(
            "patch size {} does not evenly divide {h}x{w}",
            cfg.patch_size
        )));
    }
    if cfg.kinds.is_empty() {
        return Err(Error::config("no geometric kinds enabled"));
    }
    Ok(())
}

/// Applies `spec` to the trailing two axes of any tensor.
pub fn apply_geometric<E: Element>(spec: &GeometricSpec, t: &Tensor<E>) -> Result<Tensor<E>> {
    spec.check(t.shape())?;
    let map = spec.index_map();
    let (oh, ow) = spec.output_size();
    let plane = t.shape()[t.rank() - 2] * t.shape()[t.rank() - 1];
    let d = t.data();
    let mut out = Vec::with_capacity(t.planes() * map.len());
    for p in 0..t.planes() {
        out.extend(map.iter().map(|&m| d[p * plane + m]));
    }
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out)
}

/// Differentiable counterpart of [`apply_geometric`].
pub fn apply_geometric_var<E: Element>(g: &mut Graph<E>, spec: &GeometricSpec, v: Var) -> Result<Var> {
    spec.check(g.shape(v))?;
    g.spatial_remap(v, spec.output_size(), Arc::new(spec.index_map()))
}

/// Applies `spec` to a row-major `h×w` label map.
pub fn apply_geometric_labels(spec: &GeometricSpec, labels: &[u8]) -> Result<Vec<u8>> {
    let (h, w) = spec.source_size();
    if labels.len() != h * w {
        return Err(Error::dim("apply_geometric", format!("{} labels for {h}x{w}", labels.len())));
    }
    Ok(spec.index_map().iter().map(|&m| labels[m]).collect())
}
