//! Predicted orientation as a function of applied rotation.
//!
//! Sign convention: an image rotated by `φ` is produced by sampling with
//! `R(φ)`, so a localization network that canonicalizes it predicts
//! `θ = R(-φ)`. Each record stores `-extract_angle(θ)`, which equals `φ` for
//! a perfect canonicalizer.

use std::f64::consts::PI;

use crate::error::Result;
use crate::models::ModelInstance;
use crate::spatial::{params_from_tensor, warp, wrap_angle, AffineParams};
use crate::tensor::Tensor;

pub const SIGN_CONVENTION: &str = "negated_extracted";

/// Anything that regresses per-example transforms.
pub trait ThetaPredictor {
    fn predict_theta(&self, images: &Tensor) -> Result<Vec<AffineParams>>;
}

impl ThetaPredictor for ModelInstance {
    fn predict_theta(&self, images: &Tensor) -> Result<Vec<AffineParams>> {
        let n = images.dims4("predict_theta")?[0];
        match self.forward(images)?.theta {
            Some(t) => params_from_tensor(&t),
            None => Ok(vec![AffineParams::identity(); n]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    pub image: usize,
    pub applied: f64,
    /// `None` when the predicted linear part was degenerate.
    pub predicted: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngleSweep {
    pub variant: String,
    pub records: Vec<SweepRecord>,
}

impl AngleSweep {
    pub fn correlation(&self) -> f64 {
        let (a, b): (Vec<f64>, Vec<f64>) = self
            .records
            .iter()
            .filter_map(|r| r.predicted.map(|p| (r.applied, p)))
            .unzip();
        circular_correlation(&a, &b)
    }

    pub fn missing(&self) -> usize {
        self.records.iter().filter(|r| r.predicted.is_none()).count()
    }
}

/// `count` angles evenly spaced over `[-π, π)`.
pub fn sweep_angles(count: usize) -> Vec<f64> {
    (0..count).map(|k| -PI + 2.0 * PI * k as f64 / count as f64).collect()
}

/// Circular correlation of two angle samples, computed from their unit-circle
/// embeddings:
///
/// `(Σsa·sb · Σca·cb − Σsa·cb · Σca·sb) / sqrt(det(Sa) · det(Sb))`
///
/// where `Sx` is the Gram matrix of `(sin x, cos x)`. Zero when either
/// sample has no spread.
pub fn circular_correlation(a: &[f64], b: &[f64]) -> f64 {
    let (mut a_ss, mut a_cc, mut a_sc) = (0.0, 0.0, 0.0);
    let (mut b_ss, mut b_cc, mut b_sc) = (0.0, 0.0, 0.0);
    let (mut ss, mut cc, mut sc, mut cs) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (sa, ca) = x.sin_cos();
        let (sb, cb) = y.sin_cos();
        a_ss += sa * sa;
        a_cc += ca * ca;
        a_sc += sa * ca;
        b_ss += sb * sb;
        b_cc += cb * cb;
        b_sc += sb * cb;
        ss += sa * sb;
        cc += ca * cb;
        sc += sa * cb;
        cs += ca * sb;
    }
    let det_a = a_ss * a_cc - a_sc * a_sc;
    let det_b = b_ss * b_cc - b_sc * b_sc;
    // Gram determinants are scale n²; below this they are rounding noise.
    let tiny = 1e-12 * (a.len() as f64).powi(2);
    if !(det_a > tiny && det_b > tiny) {
        return 0.0;
    }
    let den = (det_a * det_b).sqrt();
    (ss * cc - sc * cs) / den
}

/// Rotates each image by each angle and records the predicted orientation.
pub fn angle_sweep(model: &dyn ThetaPredictor, variant: &str, images: &Tensor, angles: &[f64]) -> Result<AngleSweep> {
    let n = images.dims4("angle_sweep")?[0];
    let mut records = Vec::with_capacity(n * angles.len());
    for i in 0..n {
        let img = images.slice_outer(i, i + 1);
        let batch = Tensor::concat_outer(&vec![img; angles.len()])?;
        let params: Vec<AffineParams> = angles.iter().map(|&a| AffineParams::rotation(a)).collect();
        let thetas = model.predict_theta(&warp(&batch, &params)?)?;
        for (&applied, theta) in angles.iter().zip(thetas) {
            records.push(SweepRecord {
                image: i,
                applied: wrap_angle(applied),
                predicted: theta.extract_angle().ok().map(|a| wrap_angle(-a)),
            });
        }
    }
    Ok(AngleSweep {
        variant: variant.to_string(),
        records,
    })
}
