//! Labeled image datasets: MNIST IDX ingestion, seeded rotation/translation
//! augmentation that records the applied transform, and synthetic W/M glyphs.

mod augment;
mod glyph;
mod idx;

pub use augment::{apply_random_transform, apply_random_transform_on, apply_transforms, pad_canvas, rotate_180};
pub use glyph::{glyph_template, make_glyph_dataset, Glyph, GlyphPair};
pub use idx::{
    encode_idx_images, encode_idx_labels, load_mnist_idx, parse_idx_images, parse_idx_labels,
    write_mnist_idx, MnistFiles,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    None,
    Rotation,
    Translation,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::None => "none",
            TransformKind::Rotation => "rotation",
            TransformKind::Translation => "translation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(TransformKind::None),
            "rotation" => Some(TransformKind::Rotation),
            "translation" => Some(TransformKind::Translation),
            _ => None,
        }
    }
}

/// Ground-truth transform applied to one example.
///
/// A rotation by `angle` resamples the image with `θ = R(angle)`; the model
/// that undoes it must therefore predict `θ = R(-angle)`. A translation moves
/// the content by `shift = (dy, dx)` whole pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppliedTransform {
    pub kind: TransformKind,
    pub angle: f64,
    pub shift: (i32, i32),
}

impl AppliedTransform {
    pub const NONE: AppliedTransform = AppliedTransform {
        kind: TransformKind::None,
        angle: 0.0,
        shift: (0, 0),
    };

    pub fn rotation(angle: f64) -> Self {
        AppliedTransform {
            kind: TransformKind::Rotation,
            angle: crate::spatial::wrap_angle(angle),
            shift: (0, 0),
        }
    }

    pub fn translation(dy: i32, dx: i32) -> Self {
        AppliedTransform {
            kind: TransformKind::Translation,
            angle: 0.0,
            shift: (dy, dx),
        }
    }
}

/// Images `[N, 1, H, W]` in `[0, 1]` with integer labels and per-example
/// transform metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub transforms: Vec<AppliedTransform>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let [n, _, _, _] = images.dims4("dataset")?;
        if labels.len() != n {
            return Err(Error::shape(
                "dataset",
                "count",
                format!("{n} images vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid("dataset", format!("label {bad} >= {num_classes} classes")));
        }
        Ok(LabeledDataset {
            images,
            labels,
            transforms: vec![AppliedTransform::NONE; n],
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select_outer(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            transforms: indices.iter().map(|&i| self.transforms[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` examples (or all, when fewer).
    pub fn take(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
