//! Whether warping a feature map back undoes a warp of the input.
//!
//! For a feature extractor `Γ` and an input transform `T`, compares
//! `T⁻¹(Γ(T f))` with `Γ f` on the interior of the map, then searches a family
//! of purely spatial warps, and finally tries a channel permutation on top of
//! `T⁻¹`.

use crate::data::glyph_template;
use crate::error::{Error, Result};
use crate::models::ModelInstance;
use crate::spatial::{affine_grid, bilinear_sample, warp, AffineParams, SamplingGrid};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Something whose intermediate feature maps can be tapped.
pub trait FeatureExtractor {
    /// Feature map `[B, C, h, w]` after `layer` conv blocks; `0` is the input.
    fn features(&self, images: &Tensor, layer: usize) -> Result<Tensor>;
}

impl FeatureExtractor for ModelInstance {
    fn features(&self, images: &Tensor, layer: usize) -> Result<Tensor> {
        ModelInstance::features(self, images, layer)
    }
}

/// Two-channel detector bank for the W and M glyphs: zero-mean templates,
/// same-size correlation, relu with a threshold. The M kernel is the
/// half-turn of the W kernel, so the bank is exactly channel-swapping under
/// a 180° rotation of the input.
#[derive(Clone, Debug)]
pub struct MatchedFilterBank {
    kernels: Tensor,
    bias: Tensor,
}

impl MatchedFilterBank {
    /// `kernel` must be odd so the correlation is centered. The threshold is
    /// `threshold_fraction` of a template's response to itself.
    pub fn new(kernel: usize, threshold_fraction: f64) -> Result<Self> {
        if kernel % 2 == 0 || kernel < 16 {
            return Err(Error::invalid("MatchedFilterBank", format!("kernel {kernel} must be odd and >= 16")));
        }
        let t = glyph_template(kernel);
        let mean = t.sum() / t.numel() as f64;
        let w: Vec<f64> = t.data().iter().map(|v| v - mean).collect();
        let self_response: f64 = w.iter().zip(t.data()).map(|(a, b)| a * b).sum();
        let m: Vec<f64> = w.iter().rev().copied().collect();
        let kernels = Tensor::new([2, 1, kernel, kernel], [w, m].concat())?;
        let bias = Tensor::full([2], -threshold_fraction * self_response);
        Ok(MatchedFilterBank { kernels, bias })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }
}

impl FeatureExtractor for MatchedFilterBank {
    fn features(&self, images: &Tensor, layer: usize) -> Result<Tensor> {
        match layer {
            0 => Ok(images.clone()),
            1 => {
                let mut tape = Tape::new();
                let x = tape.constant(images.clone());
                let k = tape.constant(self.kernels.clone());
                let b = tape.constant(self.bias.clone());
                let y = tape.conv2d(x, k, b, 1, self.kernel_size() / 2)?;
                let y = tape.relu(y);
                Ok(tape.value(y).clone())
            }
            _ => Err(Error::invalid("MatchedFilterBank", format!("layer {layer} > 1"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentOptions {
    /// Feature-map pixels excluded along every border.
    pub margin: usize,
    /// Candidate rotations, evenly spaced over the full turn.
    pub rotations: usize,
    /// Translations in `[-max_shift, max_shift]²` feature-map pixels.
    pub max_shift: i32,
}

impl Default for AlignmentOptions {
    fn default() -> Self {
        AlignmentOptions {
            margin: 1,
            rotations: 72,
            max_shift: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentRecord {
    pub index: usize,
    pub residual_aligned: f64,
    pub residual_best_spatial: f64,
    /// Rotation (radians) and shift `(dy, dx)` of the best spatial warp;
    /// `None` when the inverse transform itself won.
    pub best_warp: Option<(f64, (i32, i32))>,
    pub channel_swap_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    pub layer: usize,
    pub records: Vec<AlignmentRecord>,
}

impl AlignmentReport {
    fn mean(&self, f: impl Fn(&AlignmentRecord) -> f64) -> f64 {
        self.records.iter().map(f).sum::<f64>() / self.records.len().max(1) as f64
    }

    pub fn mean_aligned(&self) -> f64 {
        self.mean(|r| r.residual_aligned)
    }

    pub fn mean_best_spatial(&self) -> f64 {
        self.mean(|r| r.residual_best_spatial)
    }

    pub fn mean_channel_swap(&self) -> f64 {
        self.mean(|r| r.channel_swap_residual)
    }
}

/// Pixels at least `margin` inside the border whose sample point under
/// `grid` also lies `margin` pixels inside.
fn interior_mask(grid: &SamplingGrid, h: usize, w: usize, margin: usize) -> Vec<bool> {
    let inside = |p: f64, n: usize| {
        let px = (p + 1.0) / 2.0 * (n as f64 - 1.0);
        px >= margin as f64 - 1e-9 && px <= (n - 1 - margin) as f64 + 1e-9
    };
    let mut mask = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = grid.at(0, i, j);
            mask.push(i >= margin && j >= margin && i + margin < h && j + margin < w && inside(y, h) && inside(x, w));
        }
    }
    mask
}

/// Relative masked L2 distance of `a` from `reference`, both `[1, C, h, w]`,
/// after reading `a`'s channels through `perm`.
fn masked_residual(a: &Tensor, reference: &Tensor, mask: &[bool], perm: Option<&[usize]>) -> f64 {
    let c = reference.shape()[1];
    let plane = mask.len();
    let (mut num, mut den) = (0.0, 0.0);
    for ch in 0..c {
        let src = perm.map_or(ch, |p| p[ch]);
        let (ra, rr) = (&a.data()[src * plane..][..plane], &reference.data()[ch * plane..][..plane]);
        for k in 0..plane {
            if mask[k] {
                num += (ra[k] - rr[k]).powi(2);
                den += rr[k] * rr[k];
            }
        }
    }
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}

fn warp_one(map: &Tensor, p: AffineParams) -> Result<(Tensor, SamplingGrid)> {
    let [_, _, h, w] = map.dims4("alignment")?;
    let grid = affine_grid(&[p], h, w)?;
    Ok((bilinear_sample(map, &grid)?, grid))
}

/// Residuals for every example of `images` (`[N, C, H, W]`) under the input
/// transform `transform`. `channel_perm` is applied on top of the inverse
/// warp for the channel-swap residual; `None` uses the identity.
pub fn alignment_analysis(
    model: &dyn FeatureExtractor,
    layer: usize,
    transform: AffineParams,
    images: &Tensor,
    channel_perm: Option<&[usize]>,
    opts: &AlignmentOptions,
) -> Result<AlignmentReport> {
    let inverse = transform.invert()?;
    let n = images.dims4("alignment_analysis")?[0];
    let base = model.features(images, layer)?;
    let moved = model.features(&warp(images, &vec![transform; n])?, layer)?;
    let [_, c, h, w] = base.dims4("alignment_analysis")?;
    if let Some(p) = channel_perm {
        let mut sorted = p.to_vec();
        sorted.sort_unstable();
        if sorted != (0..c).collect::<Vec<_>>() {
            return Err(Error::invalid("alignment_analysis", format!("{p:?} is not a permutation of {c} channels")));
        }
    }
    let identity: Vec<usize> = (0..c).collect();
    let perm = channel_perm.unwrap_or(&identity);

    let mut candidates = Vec::with_capacity(opts.rotations * 25);
    for r in 0..opts.rotations {
        let angle = crate::spatial::wrap_angle(2.0 * std::f64::consts::PI * r as f64 / opts.rotations as f64);
        for dy in -opts.max_shift..=opts.max_shift {
            for dx in -opts.max_shift..=opts.max_shift {
                let p = AffineParams::rotation(angle)
                    .compose(&AffineParams::pixel_shift(f64::from(dy), f64::from(dx), h, w));
                let grid = affine_grid(&[p], h, w)?;
                let mask = interior_mask(&grid, h, w, opts.margin);
                candidates.push(((angle, (dy, dx)), grid, mask));
            }
        }
    }
    let inv_grid = affine_grid(&[inverse], h, w)?;
    let inv_mask = interior_mask(&inv_grid, h, w, opts.margin);

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let reference = base.slice_outer(i, i + 1);
        let fm = moved.slice_outer(i, i + 1);
        let (aligned, _) = warp_one(&fm, inverse)?;
        let residual_aligned = masked_residual(&aligned, &reference, &inv_mask, None);
        let channel_swap_residual = masked_residual(&aligned, &reference, &inv_mask, Some(perm));
        let mut best = (residual_aligned, None);
        for (label, grid, mask) in &candidates {
            let r = masked_residual(&bilinear_sample(&fm, grid)?, &reference, mask, None);
            if r < best.0 {
                best = (r, Some(*label));
            }
        }
        records.push(AlignmentRecord {
            index: i,
            residual_aligned,
            residual_best_spatial: best.0,
            best_warp: best.1,
            channel_swap_residual,
        });
    }
    Ok(AlignmentReport { layer, records })
}
