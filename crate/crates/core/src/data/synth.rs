//! Deterministic synthetic digit corpus.
//!
//! Ten glyph classes are built from fixed stroke skeletons (polylines with
//! per-class shape), and each sample is a randomly jittered rendering:
//! the skeleton is warped by a small affine transform plus per-vertex
//! wobble, drawn with a soft-edged stroke, and corrupted with pixel noise.
//! The result is a 28x28 ten-class corpus of roughly handwritten-digit
//! difficulty that is a pure function of the seed, written as standard
//! IDX files so the rest of the pipeline treats it exactly like any other
//! digit corpus.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::idx;
use crate::error::Result;

pub const SIDE: usize = 28;
pub const N_CLASSES: usize = 10;

/// Stroke half-width in pixels (Gaussian falloff).
const STROKE_SIGMA: f64 = 1.05;
/// Uniform per-vertex wobble amplitude in pixels.
const WOBBLE: f64 = 1.1;
/// Uniform pixel noise amplitude.
const PIXEL_NOISE: f64 = 0.16;

/// Standard file names inside a corpus directory.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Fixed skeleton for one glyph class: vertices in glyph coordinates
/// (roughly [5, 23] in both axes), connected consecutively; `closed` adds
/// a segment from the last vertex back to the first.
struct Skeleton {
    points: Vec<(f64, f64)>,
    closed: bool,
}

/// The ten class skeletons are derived from a fixed generator seed that is
/// independent of the corpus seed, so every corpus shares the same visual
/// classes and only sampling noise differs.
fn class_skeletons() -> Vec<Skeleton> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51_ee_7);
    (0..N_CLASSES)
        .map(|c| {
            // Vary the vertex count and topology per class so that classes
            // differ structurally, not just in vertex positions.
            let n_points = 4 + (c % 4);
            let closed = c % 3 == 0;
            let points: Vec<(f64, f64)> = (0..n_points)
                .map(|_| (rng.gen_range(6.0..22.0), rng.gen_range(6.0..22.0)))
                .collect();
            Skeleton { points, closed }
        })
        .collect()
}

fn segments(points: &[(f64, f64)], closed: bool) -> Vec<((f64, f64), (f64, f64))> {
    let mut segs: Vec<((f64, f64), (f64, f64))> =
        points.windows(2).map(|w| (w[0], w[1])).collect();
    if closed && points.len() > 2 {
        segs.push((*points.last().expect("non-empty"), points[0]));
    }
    segs
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { ((px - ax) * dx + (py - ay) * dy) / len2 };
    let t = t.clamp(0.0, 1.0);
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Render one jittered sample of class `c` into a 28x28 [0,1] buffer.
fn render_sample(skel: &Skeleton, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    debug_assert_eq!(out.len(), SIDE * SIDE);
    // Affine jitter around the glyph box center.
    let theta: f64 = rng.gen_range(-0.22..0.22);
    let scale: f64 = rng.gen_range(0.85..1.12);
    let shear: f64 = rng.gen_range(-0.12..0.12);
    let (tx, ty): (f64, f64) = (rng.gen_range(-2.2..2.2), rng.gen_range(-2.2..2.2));
    let (cx, cy) = (14.0, 14.0);
    let (cos_t, sin_t) = (theta.cos(), theta.sin());

    let warped: Vec<(f64, f64)> = skel
        .points
        .iter()
        .map(|&(x, y)| {
            let (dx, dy) = (x - cx, y - cy);
            let (rx, ry) = (dx * cos_t - dy * sin_t, dx * sin_t + dy * cos_t);
            let (sx, sy) = (scale * (rx + shear * ry), scale * ry);
            let wob = |r: &mut ChaCha8Rng| r.gen_range(-WOBBLE..WOBBLE);
            (cx + sx + tx + wob(rng), cy + sy + ty + wob(rng))
        })
        .collect();
    let segs = segments(&warped, skel.closed);

    let inv2s2 = 1.0 / (2.0 * STROKE_SIGMA * STROKE_SIGMA);
    for (i, o) in out.iter_mut().enumerate() {
        let p = ((i % SIDE) as f64, (i / SIDE) as f64);
        let mut best = f64::INFINITY;
        for &(a, b) in &segs {
            let d = dist_to_segment(p, a, b);
            if d < best {
                best = d;
            }
        }
        let ink = (-best * best * inv2s2).exp();
        let noisy = ink + rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE);
        *o = noisy.clamp(0.0, 1.0);
    }
}

/// Generate `n` samples with an exactly balanced, shuffled class layout.
/// Returns `(pixels as u8, labels)`.
pub fn generate_split(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skels = class_skeletons();
    // Balanced class counts (first `n % N_CLASSES` classes get one extra),
    // then a shuffled order.
    let mut labels: Vec<u8> = (0..n).map(|i| (i % N_CLASSES) as u8).collect();
    for i in (1..labels.len()).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    let mut pixels = vec![0u8; n * SIDE * SIDE];
    let mut buf = vec![0.0f64; SIDE * SIDE];
    for (i, &label) in labels.iter().enumerate() {
        render_sample(&skels[label as usize], &mut rng, &mut buf);
        for (dst, &v) in pixels[i * SIDE * SIDE..(i + 1) * SIDE * SIDE].iter_mut().zip(&buf) {
            *dst = (v * 255.0).round() as u8;
        }
    }
    (pixels, labels)
}

/// Write a full train/test corpus into `dir` using the standard IDX file
/// names. The test split uses a seed offset so it never overlaps the
/// training samples.
pub fn generate_digit_corpus(dir: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (train_px, train_lb) = generate_split(train_n, seed);
    let (test_px, test_lb) = generate_split(test_n, seed.wrapping_add(0x7e57_0000));
    idx::write_idx_images(&dir.join(TRAIN_IMAGES), SIDE, SIDE, &train_px)?;
    idx::write_idx_labels(&dir.join(TRAIN_LABELS), &train_lb)?;
    idx::write_idx_images(&dir.join(TEST_IMAGES), SIDE, SIDE, &test_px)?;
    idx::write_idx_labels(&dir.join(TEST_LABELS), &test_lb)?;
    Ok(())
}
