//! Deterministic colored-shapes dataset: flat-colored squares, circles and
//! triangles on a gray background, captioned left to right.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SdgError};
use crate::imageio::{write_ppm, Image};
use crate::Real;

pub const BACKGROUND: [Real; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn parse(s: &str) -> Option<Shape> {
        match s {
            "square" => Some(Shape::Square),
            "circle" => Some(Shape::Circle),
            "triangle" => Some(Shape::Triangle),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Point-in-shape test relative to center `(cx, cy)` with half-extent `r`.
    pub fn contains(&self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
        let dx = x - cx;
        let dy = y - cy;
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Triangle => {
                // Upward-pointing: apex at (cx, cy - r), base at cy + r.
                let h = y - (cy - r);
                h >= 0.0 && h <= 2.0 * r && dx.abs() <= h / 2.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesConfig {
    pub image_size: usize,
    /// Color name and RGB anchor in [0,1].
    pub colors: Vec<(String, [Real; 3])>,
    pub shapes: Vec<Shape>,
    pub dataset_size: usize,
    /// Probability a sample has two objects rather than one.
    pub two_object_prob: f64,
    /// (color, shape) pairs excluded from the training captions.
    pub heldout: Vec<(String, String)>,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            image_size: 64,
            colors: default_colors(),
            shapes: Shape::ALL.to_vec(),
            dataset_size: 512,
            two_object_prob: 0.75,
            heldout: Vec::new(),
            seed: 0,
        }
    }
}

/// Anchors chosen pairwise > 0.5 apart and well away from the background.
pub fn default_colors() -> Vec<(String, [Real; 3])> {
    vec![
        ("red".to_string(), [1.0, 0.0, 0.0]),
        ("green".to_string(), [0.0, 1.0, 0.0]),
        ("blue".to_string(), [0.0, 0.0, 1.0]),
        ("yellow".to_string(), [1.0, 1.0, 0.0]),
        ("purple".to_string(), [1.0, 0.0, 1.0]),
        ("cyan".to_string(), [0.0, 1.0, 1.0]),
    ]
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.colors.is_empty() || self.shapes.is_empty() {
            return Err(SdgError::Config("need at least one color and shape".into()));
        }
        for (i, (na, a)) in self.colors.iter().enumerate() {
            for (nb, b) in self.colors.iter().skip(i + 1) {
                let d2: Real = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                if d2.sqrt() <= 0.5 {
                    return Err(SdgError::Config(format!(
                        "colors {na} and {nb} are closer than 0.5"
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.two_object_prob) {
            return Err(SdgError::Config("two_object_prob must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn color_index(&self, name: &str) -> Option<usize> {
        self.colors.iter().position(|(n, _)| n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSpec {
    pub color: usize,
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub caption: String,
    pub objects: Vec<ObjectSpec>,
    pub image: Image,
    /// 0 = background, i = covered by object i (1-based, later objects win).
    pub mask: Vec<u8>,
}

/// Rasterizes objects over the gray background; also returns the index mask.
pub fn render(objects: &[ObjectSpec], cfg: &ShapesConfig) -> (Image, Vec<u8>) {
    let n = cfg.image_size;
    let mut chw = vec![0.0; 3 * n * n];
    for c in 0..3 {
        for p in 0..n * n {
            chw[c * n * n + p] = BACKGROUND[c];
        }
    }
    let mut mask = vec![0u8; n * n];
    for (i, o) in objects.iter().enumerate() {
        let rgb = cfg.colors[o.color].1;
        for y in 0..n {
            for x in 0..n {
                if o.shape.contains(x as f64 + 0.5, y as f64 + 0.5, o.cx, o.cy, o.r) {
                    for c in 0..3 {
                        chw[c * n * n + y * n + x] = rgb[c];
                    }
                    mask[y * n + x] = (i + 1) as u8;
                }
            }
        }
    }
    (Image::from_float_chw(&chw, n, n), mask)
}

pub fn caption_for(objects: &[ObjectSpec], cfg: &ShapesConfig) -> String {
    objects
        .iter()
        .map(|o| format!("a {} {}", cfg.colors[o.color].0, o.shape.as_str()))
        .collect::<Vec<_>>()
        .join(" and ")
}

fn is_heldout(cfg: &ShapesConfig, color: usize, shape: Shape) -> bool {
    cfg.heldout
        .iter()
        .any(|(c, s)| c == &cfg.colors[color].0 && s == shape.as_str())
}

fn draw_object(
    rng: &mut ChaCha8Rng,
    cfg: &ShapesConfig,
    x_range: (f64, f64),
) -> ObjectSpec {
    loop {
        let color = rng.gen_range(0..cfg.colors.len());
        let shape = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
        if is_heldout(cfg, color, shape) {
            continue;
        }
        let n = cfg.image_size as f64;
        let r = rng.gen_range(0.10 * n..0.15 * n);
        // Whole extent stays inside the x range so objects never touch.
        let lo = x_range.0.max(0.0) + r + 1.0;
        let hi = x_range.1.min(n) - r - 1.0;
        let cx = rng.gen_range(lo..hi);
        let cy = rng.gen_range(r + 1.0..n - r - 1.0);
        return ObjectSpec { color, shape, cx, cy, r };
    }
}

/// Deterministic dataset: same config (seed included) gives identical bytes.
/// Two-object samples place one object in the left half and one in the
/// right, so caption order always matches left-to-right image order.
pub fn make_dataset(cfg: &ShapesConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let n = cfg.image_size as f64;
    let mut out = Vec::with_capacity(cfg.dataset_size);
    for id in 0..cfg.dataset_size {
        // Per-sample generator: samples are independent of dataset size.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(id as u64 * 0x9e37));
        let two = rng.gen_bool(cfg.two_object_prob);
        let objects = if two {
            let left = draw_object(&mut rng, cfg, (0.0, n / 2.0 - 1.0));
            let right = draw_object(&mut rng, cfg, (n / 2.0 + 1.0, n));
            vec![left, right]
        } else {
            vec![draw_object(&mut rng, cfg, (0.0, n))]
        };
        let caption = caption_for(&objects, cfg);
        let (image, mask) = render(&objects, cfg);
        out.push(Sample { id, caption, objects, image, mask });
    }
    Ok(out)
}

/// Writes one PPM per image, one grayscale PPM per mask, and a manifest of
/// `id<TAB>caption<TAB>mask-file` lines. Returns the manifest path.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.tsv");
    let mut manifest = fs::File::create(&manifest_path)?;
    for s in samples {
        let img_name = format!("{:05}.ppm", s.id);
        let mask_name = format!("{:05}_mask.ppm", s.id);
        write_ppm(&dir.join(&img_name), &s.image)?;
        let side = s.image.width;
        let mut mask_img = Image::new(side, side);
        for p in 0..side * side {
            // Index scaled into gray levels so the mask is inspectable.
            let v = s.mask[p] * 100;
            mask_img.rgb[p * 3..p * 3 + 3].copy_from_slice(&[v, v, v]);
        }
        write_ppm(&dir.join(&mask_name), &mask_img)?;
        writeln!(manifest, "{}\t{}\t{}", s.id, s.caption, mask_name)?;
    }
    Ok(manifest_path)
}
