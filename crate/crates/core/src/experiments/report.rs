//! CSV emitters, a strict CSV reader and PGM image grids.

use std::fmt::Write as _;

use super::alignment::AlignmentReport;
use super::sweep::{AngleSweep, ThetaPredictor, SIGN_CONVENTION};
use super::train::{EpochRecord, EvalReport};
use crate::error::{Error, Result};
use crate::spatial::{warp, AffineParams};
use crate::tensor::Tensor;

pub const HISTORY_HEADER: &str = "epoch,loss,accuracy";
pub const CONFUSION_HEADER_PREFIX: &str = "true";
pub const ALIGNMENT_HEADER: &str =
    "index,residual_aligned,residual_best_spatial,best_angle_deg,best_dy,best_dx,channel_swap_residual";
pub const SWEEP_HEADER: &str = "image,applied_angle,predicted_angle,variant,sign_convention";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = writeln!(s, "{},{:.10},{:.6}", r.epoch, r.loss, r.accuracy);
    }
    s
}

/// Rows are true classes, columns `pred0..pred{K-1}`.
pub fn confusion_csv(report: &EvalReport) -> String {
    let k = report.confusion.len();
    let mut s = CONFUSION_HEADER_PREFIX.to_string();
    for c in 0..k {
        let _ = write!(s, ",pred{c}");
    }
    s.push('\n');
    for (t, row) in report.confusion.iter().enumerate() {
        s.push_str(&t.to_string());
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// The best warp columns are empty when the inverse transform was best.
pub fn alignment_csv(report: &AlignmentReport) -> String {
    let mut s = format!("{ALIGNMENT_HEADER}\n");
    for r in &report.records {
        let (angle, dy, dx) = match r.best_warp {
            Some((a, (dy, dx))) => (format!("{:.1}", a.to_degrees()), dy.to_string(), dx.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{angle},{dy},{dx},{:.6}",
            r.index, r.residual_aligned, r.residual_best_spatial, r.channel_swap_residual
        );
    }
    s
}

/// Angles in degrees; a missing prediction leaves its field empty.
pub fn sweep_csv(sweep: &AngleSweep) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in &sweep.records {
        let pred = r.predicted.map(|p| format!("{:.6}", p.to_degrees() + 0.0)).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{:.6},{pred},{},{SIGN_CONVENTION}",
            r.image,
            r.applied.to_degrees(),
            sweep.variant
        );
    }
    s
}

/// Parses CSV text with a fixed header: `\n` line endings, a trailing
/// newline, no quoting, and the same field count on every row.
pub fn read_strict_csv(text: &str, header: &str) -> Result<Vec<Vec<String>>> {
    let bad = |line: usize, d: String| Error::invalid("read_strict_csv", format!("line {line}: {d}"));
    if text.contains('\r') {
        return Err(bad(0, "carriage return".into()));
    }
    let body = text.strip_suffix('\n').ok_or_else(|| bad(0, "missing trailing newline".into()))?;
    let mut lines = body.split('\n');
    let first = lines.next().unwrap_or_default();
    if first != header {
        return Err(bad(1, format!("header `{first}` != `{header}`")));
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .map(|(k, line)| {
            if line.contains('"') {
                return Err(bad(k + 2, "quoted field".into()));
            }
            let fields: Vec<String> = line.split(',').map(str::to_string).collect();
            if fields.len() != width {
                return Err(bad(k + 2, format!("{} fields, expected {width}", fields.len())));
            }
            Ok(fields)
        })
        .collect()
}

/// Parses a numeric CSV field: plain decimal notation with a '.' separator.
pub fn strict_number(field: &str) -> Option<f64> {
    let ok = !field.is_empty()
        && field.bytes().all(|b| b.is_ascii_digit() || b == b'.' || b == b'-')
        && field.bytes().filter(|&b| b == b'.').count() <= 1;
    if ok {
        field.parse().ok()
    } else {
        None
    }
}

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Three rows of tiles: the transformed examples, then those examples warped
/// by each predictor's transform. Tiles are separated by a black gutter of
/// `gutter` pixels on every side; values are clamped to `[0, 1]`.
pub fn render_alignment_grid(
    first: &dyn ThetaPredictor,
    second: &dyn ThetaPredictor,
    examples: &Tensor,
    transform: AffineParams,
    gutter: usize,
) -> Result<GrayImage> {
    let [n, c, h, w] = examples.dims4("render_alignment_grid")?;
    if n > 16 || c != 1 {
        return Err(Error::invalid(
            "render_alignment_grid",
            format!("expected at most 16 single-channel examples, got {n}x{c}"),
        ));
    }
    let inputs = warp(examples, &vec![transform; n])?;
    let rows = [
        inputs.clone(),
        warp(&inputs, &first.predict_theta(&inputs)?)?,
        warp(&inputs, &second.predict_theta(&inputs)?)?,
    ];
    let (tile_h, tile_w) = (h + 2 * gutter, w + 2 * gutter);
    let (width, height) = (n * tile_w, 3 * tile_h);
    let mut pixels = vec![0u8; width * height];
    for (r, row) in rows.iter().enumerate() {
        for k in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let v = row.at(&[k, 0, i, j]).clamp(0.0, 1.0);
                    let y = r * tile_h + gutter + i;
                    let x = k * tile_w + gutter + j;
                    pixels[y * width + x] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    Ok(GrayImage { width, height, pixels })
}
