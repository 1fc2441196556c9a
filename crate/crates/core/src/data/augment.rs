use std::f64::consts::PI;

use rand::Rng;

use super::{AppliedTransform, LabeledDataset, TransformKind};
use crate::error::{Error, Result};
use crate::rng;
use crate::spatial::{warp, AffineParams};
use crate::tensor::Tensor;

/// Sampling transform that realizes one recorded transform on an
/// `height × width` image.
pub(crate) fn sampling_params(t: &AppliedTransform, height: usize, width: usize) -> AffineParams {
    match t.kind {
        TransformKind::None => AffineParams::identity(),
        TransformKind::Rotation => AffineParams::rotation(t.angle),
        TransformKind::Translation => {
            AffineParams::pixel_shift(f64::from(t.shift.0), f64::from(t.shift.1), height, width)
        }
    }
}

/// Warps every image by its transform (bilinear about the center, zero
/// padding) and records the transforms.
pub fn apply_transforms(ds: &LabeledDataset, transforms: &[AppliedTransform]) -> Result<LabeledDataset> {
    if transforms.len() != ds.len() {
        return Err(Error::shape(
            "apply_transforms",
            "count",
            format!("{} transforms for {} examples", transforms.len(), ds.len()),
        ));
    }
    let (_, h, w) = ds.image_dims();
    for t in transforms {
        let (dy, dx) = t.shift;
        if dy.unsigned_abs() as usize > h / 2 || dx.unsigned_abs() as usize > w / 2 {
            return Err(Error::invalid(
                "apply_transforms",
                format!("shift ({dy}, {dx}) exceeds half the {h}x{w} canvas"),
            ));
        }
    }
    let params: Vec<AffineParams> = transforms.iter().map(|t| sampling_params(t, h, w)).collect();
    Ok(LabeledDataset {
        images: warp(&ds.images, &params)?,
        labels: ds.labels.clone(),
        transforms: transforms.to_vec(),
        num_classes: ds.num_classes,
    })
}

/// Draws one transform per example from the seed's augmentation stream.
/// Rotation angles are uniform in `[-range, range]` radians; translations
/// are uniform whole-pixel shifts in `[-range, range]` on each axis.
pub fn apply_random_transform(
    ds: &LabeledDataset,
    kind: TransformKind,
    range: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    apply_random_transform_on(ds, kind, range, seed, rng::AUGMENT)
}

/// [`apply_random_transform`] drawing from the named stream `stream`.
pub fn apply_random_transform_on(
    ds: &LabeledDataset,
    kind: TransformKind,
    range: f64,
    seed: u64,
    stream: &str,
) -> Result<LabeledDataset> {
    let (_, h, w) = ds.image_dims();
    let mut rng = rng::stream(seed, stream);
    let transforms: Vec<AppliedTransform> = match kind {
        TransformKind::None => vec![AppliedTransform::NONE; ds.len()],
        TransformKind::Rotation => {
            if !(0.0..=PI).contains(&range) {
                return Err(Error::invalid(
                    "apply_random_transform",
                    format!("rotation range {range} outside [0, pi]"),
                ));
            }
            (0..ds.len())
                .map(|_| {
                    let a = if range == 0.0 { 0.0 } else { rng.gen_range(-range..=range) };
                    AppliedTransform::rotation(a)
                })
                .collect()
        }
        TransformKind::Translation => {
            let limit = (h.min(w) / 2) as f64;
            if !(0.0..=limit).contains(&range) || range.fract() != 0.0 {
                return Err(Error::invalid(
                    "apply_random_transform",
                    format!("translation range {range} must be a whole number in [0, {limit}]"),
                ));
            }
            let r = range as i32;
            (0..ds.len())
                .map(|_| {
                    let dy = rng.gen_range(-r..=r);
                    let dx = rng.gen_range(-r..=r);
                    AppliedTransform::translation(dy, dx)
                })
                .collect()
        }
    };
    apply_transforms(ds, &transforms)
}

/// Centers every image on a larger zero canvas of `size × size`.
pub fn pad_canvas(ds: &LabeledDataset, size: usize) -> Result<LabeledDataset> {
    let [n, c, h, w] = ds.images.dims4("pad_canvas")?;
    if size < h || size < w {
        return Err(Error::invalid("pad_canvas", format!("canvas {size} smaller than {h}x{w}")));
    }
    if size == h && size == w {
        return Ok(ds.clone());
    }
    let (top, left) = ((size - h) / 2, (size - w) / 2);
    let mut out = Tensor::zeros([n, c, size, size]);
    let src = ds.images.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for i in 0..h {
            let s = p * h * w + i * w;
            let d = p * size * size + (top + i) * size + left;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Ok(LabeledDataset {
        images: out,
        labels: ds.labels.clone(),
        transforms: ds.transforms.clone(),
        num_classes: ds.num_classes,
    })
}

/// Exact half turn of every plane by index reversal.
pub fn rotate_180(img: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = img.dims4("rotate_180")?;
    let mut out = img.clone();
    for plane in out.data_mut().chunks_mut(h * w).take(b * c) {
        plane.reverse();
    }
    Ok(out)
}
