//! The spatial transformer: affine sampling grids, differentiable bilinear
//! sampling, localization heads and the algebra of affine parameters.
//!
//! Coordinates are normalized to `[-1, 1]` with the centers of the corner
//! pixels at `±1`, so quarter-turn rotations and whole-pixel shifts land
//! exactly on the pixel lattice. A transform `θ` maps *output* coordinates to
//! *source* coordinates: the sampler pulls, and the content of the image moves
//! by `θ⁻¹`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::{sample_geom, Tape, Var};
use crate::tensor::Tensor;

/// A 2×3 matrix `[a b tx; c d ty]` acting on homogeneous normalized
/// coordinates `(x, y, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams([f64; 6]);

impl AffineParams {
    pub fn new(m: [f64; 6]) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("affine_params", format!("non-finite entries {m:?}")));
        }
        Ok(AffineParams(m))
    }

    pub const fn identity() -> Self {
        AffineParams([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    /// `[cos α, -sin α, 0; sin α, cos α, 0]`.
    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        AffineParams([c, -s, 0.0, s, c, 0.0])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineParams([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    /// Transform that moves image content by `(dy, dx)` pixels on an
    /// `height × width` lattice.
    pub fn pixel_shift(dy: f64, dx: f64, height: usize, width: usize) -> Self {
        let step = |n: usize| if n > 1 { 2.0 / (n as f64 - 1.0) } else { 0.0 };
        Self::translation(-dx * step(width), -dy * step(height))
    }

    pub fn matrix(&self) -> [f64; 6] {
        self.0
    }

    pub fn det(&self) -> f64 {
        let [a, b, _, c, d, _] = self.0;
        a * d - b * c
    }

    /// Multiplies the linear part by `s`, leaving the translation alone.
    pub fn scale_linear(&self, s: f64) -> Self {
        let [a, b, tx, c, d, ty] = self.0;
        AffineParams([a * s, b * s, tx, c * s, d * s, ty])
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &AffineParams) -> Self {
        let [a1, b1, t1, c1, d1, u1] = self.0;
        let [a2, b2, t2, c2, d2, u2] = other.0;
        AffineParams([
            a1 * a2 + b1 * c2,
            a1 * b2 + b1 * d2,
            a1 * t2 + b1 * u2 + t1,
            c1 * a2 + d1 * c2,
            c1 * b2 + d1 * d2,
            c1 * t2 + d1 * u2 + u1,
        ])
    }

    pub fn invert(&self) -> Result<Self> {
        let det = self.det();
        if det.abs() <= 1e-8 {
            return Err(Error::SingularTransform { det });
        }
        let [a, b, tx, c, d, ty] = self.0;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(AffineParams([
            ia,
            ib,
            -(ia * tx + ib * ty),
            ic,
            id,
            -(ic * tx + id * ty),
        ]))
    }

    /// Rotation angle of the first column, `atan2(c, a)`, in `(-π, π]`.
    pub fn extract_angle(&self) -> Result<f64> {
        let [a, _, _, c, _, _] = self.0;
        let norm = a.hypot(c);
        if norm < 1e-8 {
            return Err(Error::DegenerateTransform { norm });
        }
        Ok(wrap_angle(c.atan2(a)))
    }

    pub fn max_abs_diff(&self, other: &AffineParams) -> f64 {
        self.0
            .iter()
            .zip(other.0)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

/// Wraps an angle into `(-π, π]`; negative zero becomes zero.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a + 0.0
}

/// Stacks per-example parameters into a `[B, 6]` tensor.
pub fn params_to_tensor(params: &[AffineParams]) -> Tensor {
    let data = params.iter().flat_map(|p| p.0).collect();
    Tensor::new([params.len(), 6], data).expect("B×6")
}

pub fn params_from_tensor(t: &Tensor) -> Result<Vec<AffineParams>> {
    let [_, six] = t.dims2("params_from_tensor")?;
    if six != 6 {
        return Err(Error::shape("params_from_tensor", "parameters", format!("expected 6, got {six}")));
    }
    t.data()
        .chunks(6)
        .map(|c| AffineParams::new([c[0], c[1], c[2], c[3], c[4], c[5]]))
        .collect()
}

/// Normalized source coordinates `[B, H, W, 2]`, stored (y, x) per site.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    coords: Tensor,
}

impl SamplingGrid {
    pub fn new(coords: Tensor) -> Result<Self> {
        match coords.shape() {
            [_, _, _, 2] => Ok(SamplingGrid { coords }),
            s => Err(Error::shape("sampling_grid", "last extent", format!("expected [B, H, W, 2], got {s:?}"))),
        }
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn into_tensor(self) -> Tensor {
        self.coords
    }

    /// `(y, x)` source coordinate of output site `(i, j)` in batch entry `b`.
    pub fn at(&self, b: usize, i: usize, j: usize) -> (f64, f64) {
        (self.coords.at(&[b, i, j, 0]), self.coords.at(&[b, i, j, 1]))
    }
}

pub fn affine_grid(params: &[AffineParams], out_height: usize, out_width: usize) -> Result<SamplingGrid> {
    let mut tape = Tape::new();
    let theta = tape.constant(params_to_tensor(params));
    let grid = tape.affine_grid(theta, out_height, out_width)?;
    SamplingGrid::new(tape.value(grid).clone())
}

pub fn bilinear_sample(input: &Tensor, grid: &SamplingGrid) -> Result<Tensor> {
    let dims = input.dims4("bilinear_sample")?;
    let geom = sample_geom(dims, grid.coords.shape())?;
    let data = kernels::bilinear_forward(&geom, input.data(), grid.coords.data());
    Tensor::new([dims[0], dims[1], geom.out_h, geom.out_w], data)
}

/// Resamples `input` with one transform per batch entry, keeping its size.
pub fn warp(input: &Tensor, params: &[AffineParams]) -> Result<Tensor> {
    let [b, _, h, w] = input.dims4("warp")?;
    if params.len() != b {
        return Err(Error::shape(
            "warp",
            "batch",
            format!("{} transforms for batch of {b}", params.len()),
        ));
    }
    bilinear_sample(input, &affine_grid(params, h, w)?)
}

/// Same transform for every batch entry.
pub fn warp_all(input: &Tensor, params: AffineParams) -> Result<Tensor> {
    let b = input.dims4("warp")?[0];
    warp(input, &vec![params; b])
}

/// Which transforms a localization head can express.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadMode {
    /// Six free parameters per example.
    FullAffine,
    /// A single angle per example, turned into a pure rotation.
    RotationOnly,
}

impl HeadMode {
    pub fn outputs(self) -> usize {
        match self {
            HeadMode::FullAffine => 6,
            HeadMode::RotationOnly => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadMode::FullAffine => "full_affine",
            HeadMode::RotationOnly => "rotation_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full_affine" => Some(HeadMode::FullAffine),
            "rotation_only" => Some(HeadMode::RotationOnly),
            _ => None,
        }
    }
}

/// Final-layer weights that make the head emit the identity transform for
/// every input: zero weights, identity bias.
pub fn identity_head_init(mode: HeadMode, in_features: usize) -> (Tensor, Tensor) {
    let out = mode.outputs();
    let bias = match mode {
        HeadMode::FullAffine => Tensor::new([6], AffineParams::identity().0.to_vec()).expect("6"),
        HeadMode::RotationOnly => Tensor::zeros([1]),
    };
    (Tensor::zeros([out, in_features]), bias)
}

/// Regresses per-example transforms `[B, 6]` from flattened features `[B, N]`.
pub fn localization_head(
    tape: &mut Tape,
    features: Var,
    mode: HeadMode,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let raw = tape.dense(features, weight, bias)?;
    match mode {
        HeadMode::FullAffine => Ok(raw),
        HeadMode::RotationOnly => tape.rotation_theta(raw),
    }
}

/// Warps `input` on the tape with transforms `theta` (`[B, 6]`), keeping the
/// spatial size.
pub fn spatial_transform(tape: &mut Tape, input: Var, theta: Var) -> Result<Var> {
    let [_, _, h, w] = tape.value(input).dims4("spatial_transform")?;
    let grid = tape.affine_grid(theta, h, w)?;
    tape.bilinear_sample(input, grid)
}
