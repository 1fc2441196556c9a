use std::f64::consts::PI;

use proptest::prelude::*;
use rand::Rng;
use stnlab::spatial::{
    affine_grid, bilinear_sample, identity_head_init, localization_head, params_from_tensor,
    spatial_transform, warp_all,
};
use stnlab::{numeric_grad_check_many, rng, AffineParams, HeadMode, SamplingGrid, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "spatial-test");
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut r)
}

/// Grid of random in-bounds source points that avoid integer pixel positions.
fn random_grid(b: usize, h: usize, w: usize, src_h: usize, src_w: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "grid");
    let mut data = Vec::with_capacity(b * h * w * 2);
    for _ in 0..b * h * w {
        for n in [src_h, src_w] {
            let px = r.gen_range(0..n - 1) as f64 + r.gen_range(0.05..0.95);
            data.push(2.0 * px / (n as f64 - 1.0) - 1.0);
        }
    }
    Tensor::new([b, h, w, 2], data).unwrap()
}

fn interpolate(img: &Tensor, b: usize, c: usize, y: f64, x: f64) -> f64 {
    let [_, _, h, w] = img.dims4("t").unwrap();
    let py = (y + 1.0) / 2.0 * (h - 1) as f64;
    let px = (x + 1.0) / 2.0 * (w - 1) as f64;
    let (y0, x0) = (py.floor(), px.floor());
    let mut acc = 0.0;
    for (yy, wy) in [(y0, 1.0 - (py - y0)), (y0 + 1.0, py - y0)] {
        for (xx, wx) in [(x0, 1.0 - (px - x0)), (x0 + 1.0, px - x0)] {
            if yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w {
                acc += wy * wx * img.at(&[b, c, yy as usize, xx as usize]);
            }
        }
    }
    acc
}

#[test]
fn sampler_matches_interpolation_formula() {
    let img = random(&[1, 2, 7, 7], 1);
    let grid = random_grid(1, 5, 6, 7, 7, 2);
    let out = bilinear_sample(&img, &SamplingGrid::new(grid.clone()).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for c in 0..2 {
        for i in 0..5 {
            for j in 0..6 {
                let want = interpolate(&img, 0, c, grid.at(&[0, i, j, 0]), grid.at(&[0, i, j, 1]));
                worst = worst.max((out.at(&[0, c, i, j]) - want).abs());
            }
        }
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn sampler_gradients_input_and_grid() {
    for point in 0..10 {
        let img = random(&[1, 2, 7, 7], 10 + point);
        let grid = random_grid(1, 4, 4, 7, 7, 20 + point);
        let weights = random(&[1, 2, 4, 4], 30 + point);
        let err = numeric_grad_check_many(
            |t, v| {
                let s = t.bilinear_sample(v[0], v[1])?;
                let w = t.constant(weights.clone());
                let m = t.mul(s, w)?;
                Ok(t.sum(m))
            },
            &[img, grid],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "point {point}: {err}");
    }
}

/// True when every sample coordinate of the grid stays `margin` pixels away
/// from integer positions, where bilinear interpolation has kinks.
fn clear_of_pixel_edges(theta: &Tensor, n: usize, margin: f64) -> bool {
    let params = params_from_tensor(theta).unwrap();
    let grid = affine_grid(&params, n, n).unwrap();
    grid.coords().data().iter().all(|&c| {
        let p = (c + 1.0) / 2.0 * (n as f64 - 1.0);
        (p - p.round()).abs() > margin
    })
}

#[test]
fn theta_gradients_through_grid_and_sampler() {
    let mut checked = 0;
    for point in 0..200u64 {
        if checked == 10 {
            break;
        }
        let img = random(&[2, 1, 8, 8], 40 + point);
        let mut r = rng::stream(point, "theta");
        let theta: Vec<f64> = (0..2)
            .flat_map(|_| {
                let a = r.gen_range(-1.0..1.0);
                let s = r.gen_range(0.6..0.9);
                let m = AffineParams::rotation(a).scale_linear(s).matrix();
                [m[0], m[1], r.gen_range(-0.1..0.1), m[3], m[4], r.gen_range(-0.1..0.1)]
            })
            .collect();
        let theta = Tensor::new([2, 6], theta).unwrap();
        if !clear_of_pixel_edges(&theta, 8, 1e-3) {
            continue;
        }
        let weights = random(&[2, 1, 8, 8], 50 + point);
        let err = numeric_grad_check_many(
            |t, v| {
                let out = spatial_transform(t, v[0], v[1])?;
                let w = t.constant(weights.clone());
                let m = t.mul(out, w)?;
                Ok(t.sum(m))
            },
            &[img, theta],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "point {point}: {err}");
        checked += 1;
    }
    assert_eq!(checked, 10);
}

#[test]
fn head_weight_gradients() {
    for mode in [HeadMode::FullAffine, HeadMode::RotationOnly] {
        for point in 0..10u64 {
            let img = random(&[2, 1, 6, 6], 60 + point);
            let feats = random(&[2, 5], 70 + point);
            let w = random(&[mode.outputs(), 5], 80 + point);
            let w = Tensor::new(w.shape().to_vec(), w.data().iter().map(|v| v * 0.1).collect()).unwrap();
            let (_, b) = identity_head_init(mode, 5);
            let weights = random(&[2, 1, 6, 6], 90 + point);
            let err = numeric_grad_check_many(
                |t, v| {
                    let x = t.constant(img.clone());
                    let f = t.constant(feats.clone());
                    let theta = localization_head(t, f, mode, v[0], v[1])?;
                    let out = spatial_transform(t, x, theta)?;
                    let ww = t.constant(weights.clone());
                    let m = t.mul(out, ww)?;
                    Ok(t.sum(m))
                },
                &[w, b],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "{mode:?} point {point}: {err}");
        }
    }
}

fn rot90_oracle(img: &Tensor) -> Tensor {
    let [b, c, h, w] = img.dims4("t").unwrap();
    let mut out = Tensor::zeros([b, c, h, w]);
    for n in 0..b {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out.set(&[n, ch, i, j], img.at(&[n, ch, j, w - 1 - i]));
                }
            }
        }
    }
    out
}

#[test]
fn quarter_turn_is_index_permutation() {
    for n in [2usize, 5, 8, 28] {
        let img = random(&[1, 2, n, n], n as u64);
        let theta = AffineParams::new([0.0, -1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = warp_all(&img, theta).unwrap();
        assert!(out.max_abs_diff(&rot90_oracle(&img)) < 1e-12);
        let via_angle = warp_all(&img, AffineParams::rotation(PI / 2.0)).unwrap();
        assert!(via_angle.max_abs_diff(&rot90_oracle(&img)) < 1e-12);
    }
}

#[test]
fn half_turn_and_shifts_are_index_permutations() {
    let img = random(&[1, 1, 9, 11], 3);
    let out = warp_all(&img, AffineParams::rotation(PI)).unwrap();
    for i in 0..9 {
        for j in 0..11 {
            assert!((out.at(&[0, 0, i, j]) - img.at(&[0, 0, 8 - i, 10 - j])).abs() < 1e-12);
        }
    }
    for (dy, dx) in [(0i64, 1i64), (-2, 3), (4, -4), (0, 0)] {
        let out = warp_all(&img, AffineParams::pixel_shift(dy as f64, dx as f64, 9, 11)).unwrap();
        for i in 0..9i64 {
            for j in 0..11i64 {
                let (si, sj) = (i - dy, j - dx);
                let want = if (0..9).contains(&si) && (0..11).contains(&sj) {
                    img.at(&[0, 0, si as usize, sj as usize])
                } else {
                    0.0
                };
                assert!((out.at(&[0, 0, i as usize, j as usize]) - want).abs() < 1e-12);
            }
        }
    }
}

/// Smooth test corpus: sums of low-frequency sinusoids.
fn smooth_image(n: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "smooth");
    let (fx, fy, px, py) = (
        r.gen_range(0.5..2.0),
        r.gen_range(0.5..2.0),
        r.gen_range(0.0..PI),
        r.gen_range(0.0..PI),
    );
    let mut t = Tensor::zeros([1, 1, n, n]);
    for i in 0..n {
        for j in 0..n {
            let (y, x) = (i as f64 / n as f64, j as f64 / n as f64);
            t.set(&[0, 0, i, j], 0.5 + 0.25 * (fx * PI * x + px).sin() + 0.25 * (fy * PI * y + py).cos());
        }
    }
    t
}

#[test]
fn round_trip_warp_stays_close_on_interior() {
    let n = 24;
    for seed in 0..8u64 {
        let img = smooth_image(n, seed);
        let mut r = rng::stream(seed, "rt");
        let theta = AffineParams::rotation(r.gen_range(-PI..PI))
            .compose(&AffineParams::translation(r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1)));
        let inv = theta.invert().unwrap();
        let back = warp_all(&warp_all(&img, theta).unwrap(), inv).unwrap();
        let g_inv = affine_grid(&[inv], n, n).unwrap();
        let g_id = affine_grid(&[AffineParams::identity()], n, n).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                // Interior: the site and its intermediate sample point both sit
                // at least one pixel inside the border.
                let (y, x) = g_inv.at(0, i, j);
                let edge = 1.0 - 2.0 / (n as f64 - 1.0);
                let (yt, xt) = g_id.at(0, i, j);
                if [y, x, yt, xt].iter().any(|v| v.abs() > edge) {
                    continue;
                }
                worst = worst.max((back.at(&[0, 0, i, j]) - img.at(&[0, 0, i, j])).abs());
            }
        }
        assert!(worst < 0.15, "seed {seed}: {worst}");
    }
}

#[test]
fn grid_params_round_trip_through_tensor() {
    let p = vec![AffineParams::rotation(0.3), AffineParams::translation(0.1, -0.2)];
    let t = stnlab::spatial::params_to_tensor(&p);
    assert_eq!(params_from_tensor(&t).unwrap(), p);
    let mut tape = Tape::new();
    let v = tape.constant(t);
    let g = tape.affine_grid(v, 3, 4).unwrap();
    assert_eq!(tape.value(g).shape(), &[2, 3, 4, 2]);
}

proptest! {
    #[test]
    fn extract_angle_ignores_uniform_scale(angle in -3.1f64..3.1, scale in 0.01f64..100.0) {
        let base = AffineParams::rotation(angle);
        let a = base.extract_angle().unwrap();
        let b = base.scale_linear(scale).extract_angle().unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn identity_warp_is_exact(h in 1usize..12, w in 1usize..12, seed in 0u64..100) {
        let img = random(&[1, 2, h, w], seed);
        let out = warp_all(&img, AffineParams::identity()).unwrap();
        prop_assert!(out.max_abs_diff(&img) < 1e-12);
    }
}
