//! Procedural "W" and "M" glyphs. An M is the exact half-turn of its paired
//! W, so a detector bank for the two letters swaps channels under a 180°
//! rotation of the input.

use rand::Rng;

use super::augment::rotate_180;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Glyph {
    W,
    M,
}

impl Glyph {
    /// Channel index of the detector that should fire.
    pub fn channel(self) -> usize {
        match self {
            Glyph::W => 0,
            Glyph::M => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphPair {
    pub image: Tensor,
    pub channel_truth: Glyph,
}

/// W stroke in unit-box coordinates (x right, y down).
const W_STROKE: [(f64, f64); 5] = [(0.16, 0.22), (0.32, 0.78), (0.5, 0.36), (0.68, 0.78), (0.84, 0.22)];
const STROKE_HALF_WIDTH: f64 = 0.055;

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - cx).hypot(p.1 - cy)
}

/// Anti-aliased rasterization: coverage falls off linearly over one pixel
/// around the stroke edge.
fn render(points: &[(f64, f64)], half_width: f64, size: usize) -> Tensor {
    let mut img = Tensor::zeros([1, 1, size, size]);
    let s = size as f64;
    for i in 0..size {
        for j in 0..size {
            let p = ((j as f64 + 0.5) / s, (i as f64 + 0.5) / s);
            let d = points
                .windows(2)
                .map(|w| segment_distance(p, w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            let v = (half_width * s + 0.5 - d * s).clamp(0.0, 1.0);
            img.set(&[0, 0, i, j], v);
        }
    }
    img
}

/// The canonical, unjittered W glyph.
pub fn glyph_template(size: usize) -> Tensor {
    render(&W_STROKE, STROKE_HALF_WIDTH, size)
}

/// `count` glyphs alternating W, M; entry `2k + 1` is the half-turn of entry
/// `2k`. Vertex positions and stroke width are jittered from `seed`.
pub fn make_glyph_dataset(count: usize, size: usize, seed: u64) -> Result<Vec<GlyphPair>> {
    if size < 16 {
        return Err(Error::invalid("make_glyph_dataset", format!("size {size} < 16")));
    }
    let mut rng = rng::stream(seed, "glyphs");
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let points: Vec<(f64, f64)> = W_STROKE
            .iter()
            .map(|&(x, y)| (x + rng.gen_range(-0.02..0.02), y + rng.gen_range(-0.02..0.02)))
            .collect();
        let hw = STROKE_HALF_WIDTH * rng.gen_range(0.85..1.15);
        let w = render(&points, hw, size);
        let m = rotate_180(&w)?;
        out.push(GlyphPair { image: w, channel_truth: Glyph::W });
        if out.len() < count {
            out.push(GlyphPair { image: m, channel_truth: Glyph::M });
        }
    }
    Ok(out)
}
