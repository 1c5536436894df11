//! Procedurally generated source/target segmentation domains.
//!
//! Scenes are a textured background with 2-6 overlapping shapes (circle,
//! square, triangle, stripe bar). Geometry and appearance draw from separate
//! random streams so a target scene generated with the same seed as a source
//! scene has an identical label map and differs only in pixel values.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{blur_planes, gaussian_kernel, hsv_to_rgb, shift_hue, BLUR_KERNEL};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::{Seeds, StreamRng};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "circle", "square", "triangle", "bar"];

/// Global appearance change applied after rasterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceShift {
    /// Hue rotation in turns.
    pub hue: f32,
    pub gamma: f32,
    pub noise_sigma: f32,
    pub blur_sigma: f32,
}

impl AppearanceShift {
    pub fn none() -> Self {
        AppearanceShift {
            hue: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub tag: String,
    pub size: usize,
    /// HSV base color per class, background first.
    pub palette: Vec<[f32; 3]>,
    /// Per-shape uniform jitter on each HSV component.
    pub palette_jitter: f32,
    pub texture_noise: f32,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub shift: AppearanceShift,
}

impl DomainConfig {
    pub fn source() -> Self {
        DomainConfig {
            tag: "source".into(),
            size: 64,
            palette: vec![
                [0.08, 0.15, 0.55],
                [0.00, 0.85, 0.90],
                [0.60, 0.75, 0.50],
                [0.33, 0.55, 0.75],
                [0.83, 0.35, 0.95],
            ],
            palette_jitter: 0.04,
            texture_noise: 0.04,
            min_shapes: 2,
            max_shapes: 6,
            shift: AppearanceShift::none(),
        }
    }

    pub fn target() -> Self {
        DomainConfig {
            tag: "target".into(),
            shift: AppearanceShift {
                hue: 0.15,
                gamma: 1.4,
                noise_sigma: 0.05,
                blur_sigma: 0.8,
            },
            ..Self::source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.palette.len() != NUM_CLASSES {
            return Err(Error::config(format!(
                "palette needs {NUM_CLASSES} entries, got {}",
                self.palette.len()
            )));
        }
        if self.size < 16 {
            return Err(Error::config(format!("image size {} too small", self.size)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes > max_shapes"));
        }
        if self.shift.gamma <= 0.0 || self.shift.noise_sigma < 0.0 || self.shift.blur_sigma < 0.0 {
            return Err(Error::config("appearance shift parameters out of range"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major `H×W` class ids.
    pub labels: Vec<u8>,
}

impl Scene {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    pub fn to_container(&self) -> Container {
        let (h, w) = self.size();
        let mut c = Container::new();
        c.push("image", self.image.clone());
        let labels = self.labels.iter().map(|&l| l as f32).collect();
        c.push("labels", Tensor::new([h, w], labels).expect("label shape"));
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        };
        let image = c.get("image").ok_or_else(|| bad("missing image"))?.clone();
        let labels = c.get("labels").ok_or_else(|| bad("missing labels"))?;
        if image.rank() != 3 || image.shape()[0] != 3 || labels.shape() != &image.shape()[1..] {
            return Err(bad("image/label shapes disagree"));
        }
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v < NUM_CLASSES as f32 && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(bad("label out of range"))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Scene { image, labels })
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle { cy: f32, cx: f32, r: f32 },
    Square { y0: f32, x0: f32, side: f32 },
    Triangle { p: [(f32, f32); 3] },
    Bar { cy: f32, cx: f32, half_len: f32, half_thick: f32, vertical: bool },
}

impl Shape {
    fn class(&self) -> u8 {
        match self {
            Shape::Circle { .. } => 1,
            Shape::Square { .. } => 2,
            Shape::Triangle { .. } => 3,
            Shape::Bar { .. } => 4,
        }
    }

    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Square { y0, x0, side } => y >= y0 && y < y0 + side && x >= x0 && x < x0 + side,
            Shape::Triangle { p } => {
                let edge = |a: (f32, f32), b: (f32, f32)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d = [edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
            Shape::Bar {
                cy,
                cx,
                half_len,
                half_thick,
                vertical,
            } => {
                let (dy, dx) = ((y - cy).abs(), (x - cx).abs());
                if vertical {
                    dy <= half_len && dx <= half_thick
                } else {
                    dx <= half_len && dy <= half_thick
                }
            }
        }
    }
}

fn sample_shape(rng: &mut StreamRng, size: f32) -> Shape {
    let class = rng.random_range(1..NUM_CLASSES as u8);
    let s = size / 64.0;
    match class {
        1 => {
            let r = rng.random_range(5.0..12.0) * s;
            Shape::Circle {
                cy: rng.random_range(r..size - r),
                cx: rng.random_range(r..size - r),
                r,
            }
        }
        2 => {
            let side = rng.random_range(9.0..22.0) * s;
            Shape::Square {
                y0: rng.random_range(0.0..size - side),
                x0: rng.random_range(0.0..size - side),
                side,
            }
        }
        3 => {
            let r = rng.random_range(7.0..14.0) * s;
            let cy = rng.random_range(r..size - r);
            let cx = rng.random_range(r..size - r);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let p = std::array::from_fn(|i| {
                let a = phase + i as f32 * std::f32::consts::TAU / 3.0;
                (cy + r * a.sin(), cx + r * a.cos())
            });
            Shape::Triangle { p }
        }
        _ => {
            let half_len = rng.random_range(10.0..22.0) * s;
            let half_thick = rng.random_range(1.5..3.5) * s;
            let vertical = rng.random_bool(0.5);
            let (ly, lx) = if vertical { (half_len, half_thick) } else { (half_thick, half_len) };
            Shape::Bar {
                cy: rng.random_range(ly..size - ly),
                cx: rng.random_range(lx..size - lx),
                half_len,
                half_thick,
                vertical,
            }
        }
    }
}

/// Rasterizes geometry from `geometry` and paints it using `appearance`.
pub fn generate_scene(cfg: &DomainConfig, geometry: &mut StreamRng, appearance: &mut StreamRng) -> Scene {
    let n = cfg.size;
    let plane = n * n;
    let count = geometry.random_range(cfg.min_shapes..=cfg.max_shapes);
    let shapes: Vec<Shape> = (0..count).map(|_| sample_shape(geometry, n as f32)).collect();

    // later shapes occlude earlier ones
    let mut labels = vec![0u8; plane];
    let mut owner = vec![usize::MAX; plane];
    for (si, shape) in shapes.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                if shape.contains(y as f32 + 0.5, x as f32 + 0.5) {
                    labels[y * n + x] = shape.class();
                    owner[y * n + x] = si;
                }
            }
        }
    }

    let j = cfg.palette_jitter;
    let jitter = |base: [f32; 3], rng: &mut StreamRng| -> [f32; 3] {
        if j == 0.0 {
            return base;
        }
        [
            base[0] + rng.random_range(-j..=j),
            (base[1] + rng.random_range(-j..=j)).clamp(0.0, 1.0),
            (base[2] + rng.random_range(-j..=j)).clamp(0.0, 1.0),
        ]
    };
    let bg = jitter(cfg.palette[0], appearance);
    let shape_colors: Vec<[f32; 3]> = shapes
        .iter()
        .map(|s| jitter(cfg.palette[s.class() as usize], appearance))
        .collect();
    // smooth background shading: value varies linearly across the image
    let gy = appearance.random_range(-0.2..0.2f32);
    let gx = appearance.random_range(-0.2..0.2f32);

    let mut img = vec![0.0f32; 3 * plane];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let (h, s, v) = match owner[i] {
                usize::MAX => {
                    let c = bg;
                    let shade = gy * (y as f32 / n as f32 - 0.5) + gx * (x as f32 / n as f32 - 0.5);
                    (c[0], c[1], (c[2] + shade).clamp(0.0, 1.0))
                }
                si => {
                    let c = shape_colors[si];
                    (c[0], c[1], c[2])
                }
            };
            let (r, g, b) = hsv_to_rgb(h, s, v);
            for (c, val) in [r, g, b].into_iter().enumerate() {
                let noise = if cfg.texture_noise > 0.0 {
                    appearance.random_range(-cfg.texture_noise..=cfg.texture_noise)
                } else {
                    0.0
                };
                img[c * plane + i] = (val + noise).clamp(0.0, 1.0);
            }
        }
    }
    apply_shift(&cfg.shift, &mut img, n, appearance);
    Scene {
        image: Tensor::new([3, n, n], img).expect("image shape"),
        labels,
    }
}

fn apply_shift(shift: &AppearanceShift, img: &mut [f32], n: usize, rng: &mut StreamRng) {
    let plane = n * n;
    if shift.hue != 0.0 {
        shift_hue(img, plane, shift.hue);
    }
    if shift.gamma != 1.0 {
        img.iter_mut().for_each(|v| *v = v.max(0.0).powf(shift.gamma));
    }
    if shift.blur_sigma > 0.0 {
        blur_planes(img, 3, n, n, &gaussian_kernel(shift.blur_sigma, BLUR_KERNEL));
    }
    if shift.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, shift.noise_sigma).expect("positive sigma");
        img.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Scene `index` of the split seeded with `seeds`.
pub fn scene_at(cfg: &DomainConfig, seeds: Seeds, index: u64) -> Scene {
    let mut geometry = seeds.indexed("data/geometry", index);
    let mut appearance = seeds.indexed("data/appearance", index);
    generate_scene(cfg, &mut geometry, &mut appearance)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub config_hash: String,
    pub domain: String,
    pub size: usize,
    pub classes: usize,
    pub complete: bool,
}

pub const MANIFEST: &str = "manifest.json";

pub fn sample_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("sample_{index:06}.seg"))
}

/// Writes `n` scenes plus a manifest to `dir`.
pub fn generate_split(cfg: &DomainConfig, n: usize, seed: u64, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::config("split size must be at least 1"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest {
        count: n,
        seed,
        config_hash: cfg.hash(),
        domain: cfg.tag.clone(),
        size: cfg.size,
        classes: NUM_CLASSES,
        complete: false,
    };
    write_manifest(dir, &manifest)?;
    let seeds = Seeds::new(seed);
    for i in 0..n {
        scene_at(cfg, seeds, i as u64)
            .to_container()
            .save(&sample_path(dir, i))?;
    }
    manifest.complete = true;
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(m)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        msg: e.to_string(),
    })
}

/// A split loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if !manifest.complete {
            return Err(Error::Format {
                path: dir.to_path_buf(),
                msg: "split is marked incomplete".into(),
            });
        }
        let scenes = (0..manifest.count)
            .map(|i| {
                let p = sample_path(dir, i);
                Scene::from_container(&Container::load(&p)?, &p)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { manifest, scenes })
    }

    /// Generates a split in memory without touching disk.
    pub fn synthesize(cfg: &DomainConfig, n: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let seeds = Seeds::new(seed);
        Ok(Dataset {
            manifest: Manifest {
                count: n,
                seed,
                config_hash: cfg.hash(),
                domain: cfg.tag.clone(),
                size: cfg.size,
                classes: NUM_CLASSES,
                complete: true,
            },
            scenes: (0..n).map(|i| scene_at(cfg, seeds, i as u64)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Per-class pixel fractions over a set of scenes.
pub fn class_frequencies(scenes: &[Scene]) -> [f64; NUM_CLASSES] {
    let mut counts = [0u64; NUM_CLASSES];
    for s in scenes {
        for &l in &s.labels {
            counts[l as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    counts.map(|c| c as f64 / total.max(1) as f64)
}

/// The three splits every run works with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    SourceTrain,
    SourceVal,
    TargetStream,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::SourceTrain, Split::SourceVal, Split::TargetStream];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source-train",
            Split::SourceVal => "source-val",
            Split::TargetStream => "target-stream",
        }
    }

    /// Generation seed of this split under a master seed.
    pub fn seed(self, master: u64) -> u64 {
        Seeds::new(master).derive(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_scene() {
        let cfg = DomainConfig::source();
        let a = scene_at(&cfg, Seeds::new(3), 5);
        let b = scene_at(&cfg, Seeds::new(3), 5);
        assert_eq!(a, b);
        assert!(a.labels.iter().all(|&l| (l as usize) < NUM_CLASSES));
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_shapes_is_all_background() {
        let cfg = DomainConfig {
            min_shapes: 0,
            max_shapes: 0,
            ..DomainConfig::source()
        };
        let s = scene_at(&cfg, Seeds::new(1), 0);
        assert!(s.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn shift_never_moves_labels() {
        for i in 0..20 {
            let src = scene_at(&DomainConfig::source(), Seeds::new(9), i);
            let tgt = scene_at(&DomainConfig::target(), Seeds::new(9), i);
            assert_eq!(src.labels, tgt.labels);
            assert_ne!(src.image, tgt.image);
        }
    }

    #[test]
    fn config_hash_stable_and_sensitive() {
        assert_eq!(DomainConfig::source().hash(), DomainConfig::source().hash());
        assert_ne!(DomainConfig::source().hash(), DomainConfig::target().hash());
    }

    #[test]
    fn split_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DomainConfig::target();
        let m = generate_split(&cfg, 1, 11, dir.path()).unwrap();
        assert_eq!(m.count, 1);
        assert!(m.complete);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.scenes[0], scene_at(&cfg, Seeds::new(11), 0));
        assert!(generate_split(&cfg, 0, 1, dir.path()).is_err());
    }

    #[test]
    fn every_class_appears() {
        let ds = Dataset::synthesize(&DomainConfig::source(), 100, 0).unwrap();
        let f = class_frequencies(&ds.scenes);
        assert!(f.iter().all(|&v| v > 0.01), "{f:?}");
    }
}
