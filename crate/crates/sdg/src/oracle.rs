//! Attribute-binding oracle: segments an image against the gray background,
//! classifies each blob's shape and color, and checks them against the
//! caption's expected objects.

use crate::dataset::{Shape, ShapesConfig, BACKGROUND};
use crate::imageio::Image;
use crate::vocab::normalize_words;

/// Foreground = color distance to background above this.
const FG_THRESHOLD: f64 = 0.25;
/// Components smaller than this many pixels are noise.
const MIN_COMPONENT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub pixels: usize,
    pub centroid_x: f64,
    pub shape: Shape,
    pub color: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectCheck {
    pub found: bool,
    pub correct_color: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub expected: usize,
    pub checks: Vec<ObjectCheck>,
    pub blobs: Vec<Blob>,
}

impl OracleResult {
    pub fn objects_found(&self) -> usize {
        self.checks.iter().filter(|c| c.found).count()
    }

    pub fn objects_correct_color(&self) -> usize {
        self.checks.iter().filter(|c| c.found && c.correct_color).count()
    }

    /// Table-2-style category for two-object prompts.
    pub fn all_found(&self) -> bool {
        self.objects_found() == self.expected
    }

    pub fn all_correct(&self) -> bool {
        self.all_found() && self.objects_correct_color() == self.expected
    }
}

/// Expected (color index, shape) list parsed from a shapes caption, in
/// caption order. Words outside the lexicons are ignored.
pub fn expected_objects(prompt: &str, cfg: &ShapesConfig) -> Vec<(usize, Shape)> {
    let words = normalize_words(prompt);
    let mut out = Vec::new();
    let mut pending_color: Option<usize> = None;
    for w in &words {
        if let Some(ci) = cfg.color_index(w) {
            pending_color = Some(ci);
        } else if let Some(shape) = Shape::parse(w) {
            if let Some(ci) = pending_color.take() {
                out.push((ci, shape));
            }
        }
    }
    out
}

fn classify_shape(pixels: usize, min_x: usize, max_x: usize, min_y: usize, max_y: usize) -> Shape {
    let w = (max_x - min_x + 1) as f64;
    let h = (max_y - min_y + 1) as f64;
    let fill = pixels as f64 / (w * h);
    // Ideal fills: square 1.0, circle pi/4 ~ 0.785, triangle 0.5.
    if fill > 0.89 {
        Shape::Square
    } else if fill > 0.64 {
        Shape::Circle
    } else {
        Shape::Triangle
    }
}

fn nearest_color(rgb: [f64; 3], cfg: &ShapesConfig) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, (_, anchor)) in cfg.colors.iter().enumerate() {
        let d: f64 = rgb
            .iter()
            .zip(anchor.iter())
            .map(|(a, &b)| (a - b as f64) * (a - b as f64))
            .sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Connected-component segmentation, deterministic scan order.
pub fn find_blobs(image: &Image, cfg: &ShapesConfig) -> Vec<Blob> {
    let (w, h) = (image.width, image.height);
    let chw = image.to_float_chw();
    let hw = w * h;
    let is_fg = |p: usize| -> bool {
        let d: f64 = (0..3)
            .map(|c| {
                let v = chw[c * hw + p] as f64 - BACKGROUND[c] as f64;
                v * v
            })
            .sum();
        d.sqrt() > FG_THRESHOLD
    };
    let mut label = vec![0usize; hw];
    let mut blobs = Vec::new();
    let mut next = 0usize;
    for start in 0..hw {
        if label[start] != 0 || !is_fg(start) {
            continue;
        }
        next += 1;
        // Flood fill (4-connectivity) with an explicit stack.
        let mut stack = vec![start];
        label[start] = next;
        let mut pixels = 0usize;
        let mut sum = [0.0f64; 3];
        let mut sx = 0.0f64;
        let (mut min_x, mut max_x, mut min_y, mut max_y) = (w, 0usize, h, 0usize);
        while let Some(p) = stack.pop() {
            pixels += 1;
            let (x, y) = (p % w, p / w);
            sx += x as f64;
            for c in 0..3 {
                sum[c] += chw[c * hw + p] as f64;
            }
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
            let mut push = |q: usize| {
                if label[q] == 0 && is_fg(q) {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        if pixels < MIN_COMPONENT {
            continue;
        }
        let mean = [sum[0] / pixels as f64, sum[1] / pixels as f64, sum[2] / pixels as f64];
        blobs.push(Blob {
            pixels,
            centroid_x: sx / pixels as f64,
            shape: classify_shape(pixels, min_x, max_x, min_y, max_y),
            color: nearest_color(mean, cfg),
        });
    }
    blobs.sort_by(|a, b| a.centroid_x.partial_cmp(&b.centroid_x).unwrap());
    blobs
}

/// Checks the image against the caption's expected objects. Each expected
/// object greedily claims the best unused blob, preferring a shape match,
/// then a color match, then size; `found` means a blob was claimed (the
/// object exists), `correct_color` that the claimed blob's color matches.
/// Shape is an assignment preference, not a gate — the protocol scores
/// object existence and color binding.
pub fn binding_oracle(image: &Image, prompt: &str, cfg: &ShapesConfig) -> OracleResult {
    let expected = expected_objects(prompt, cfg);
    let blobs = find_blobs(image, cfg);
    let mut used = vec![false; blobs.len()];
    let mut checks = Vec::with_capacity(expected.len());
    for &(color, shape) in &expected {
        let pick = blobs
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .max_by_key(|(_, b)| (b.shape == shape, b.color == color, b.pixels))
            .map(|(i, _)| i);
        match pick {
            Some(i) => {
                used[i] = true;
                checks.push(ObjectCheck { found: true, correct_color: blobs[i].color == color });
            }
            None => checks.push(ObjectCheck { found: false, correct_color: false }),
        }
    }
    OracleResult { expected: expected.len(), checks, blobs }
}

/// Mean of one channel in [0,1]; reported by the substitution case study.
pub fn mean_channel(image: &Image, channel: usize) -> f64 {
    let n = (image.width * image.height) as f64;
    image
        .rgb
        .chunks_exact(3)
        .map(|px| px[channel] as f64 / 255.0)
        .sum::<f64>()
        / n
}
