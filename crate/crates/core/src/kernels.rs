//! Raw forward/backward kernels over flat row-major buffers.
//!
//! Shapes are validated by the callers in `tape`; everything here assumes
//! consistent extents.

/// `c = a·b + beta·c` where `a` is m×k (or its transpose stored k×m) and
/// `b` is k×n (or its transpose stored n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n extents
    // of the three slices, whose lengths are asserted to match.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn sites(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let sites = g.sites();
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * sites..(row + 1) * sites];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let sites = g.sites();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * sites..(row + 1) * sites];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let (patch, sites) = (g.patch(), g.sites());
    let in_stride = g.in_ch * g.height * g.width;
    let out_stride = g.out_ch * sites;
    let mut out = vec![0.0; g.batch * out_stride];
    let mut cols = vec![0.0; patch * sites];
    for b in 0..g.batch {
        im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut cols);
        let ob = &mut out[b * out_stride..(b + 1) * out_stride];
        for (o, chunk) in ob.chunks_mut(sites).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(g.out_ch, patch, sites, w, false, &cols, false, ob, 1.0);
    }
    out
}

/// Accumulates gradients for input, kernel and bias; `None` skips a target.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let (patch, sites) = (g.patch(), g.sites());
    let in_stride = g.in_ch * g.height * g.width;
    let out_stride = g.out_ch * sites;
    let mut cols = vec![0.0; patch * sites];
    let mut dcols = vec![0.0; patch * sites];
    for b in 0..g.batch {
        let go = &dout[b * out_stride..(b + 1) * out_stride];
        if let Some(db) = dbias.as_deref_mut() {
            for (o, chunk) in go.chunks(sites).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut cols);
            gemm(g.out_ch, sites, patch, go, false, &cols, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(patch, g.out_ch, sites, w, true, go, false, &mut dcols, 0.0);
            col2im_add(g, &dcols, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
}

/// Max pooling over `[planes, height, width]`. Returns the pooled values and,
/// per output, the flat input index of the winning element. Ties go to the
/// first element in row-major scan order.
pub(crate) fn max_pool_forward(
    x: &[f64],
    planes: usize,
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let out_h = (height - window) / stride + 1;
    let out_w = (width - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut arg = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * stride * width + ox * stride;
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * width + ox * stride;
                    for dx in 0..window {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(x[best_idx]);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, out_h, out_w)
}

/// Maps a normalized coordinate in `[-1, 1]` to a pixel coordinate with the
/// corner pixel centers at the ends. Values within 1e-9 of an integer snap to
/// it, so lattice-aligned warps read pixels without interpolation error.
#[inline]
pub(crate) fn to_pixel(coord: f64, extent: usize) -> f64 {
    let p = (coord + 1.0) * 0.5 * (extent as f64 - 1.0);
    let r = p.round();
    if (p - r).abs() < 1e-9 {
        r
    } else {
        p
    }
}

/// Normalized coordinate of pixel `i` on an axis of `extent` pixels.
#[inline]
pub(crate) fn lattice(i: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        (2.0 * i as f64 - (extent as f64 - 1.0)) / (extent as f64 - 1.0)
    }
}

#[derive(Clone, Copy)]
struct Corners {
    y0: isize,
    x0: isize,
    fy: f64,
    fx: f64,
}

impl Corners {
    #[inline]
    fn new(py: f64, px: f64) -> Self {
        let y0 = py.floor();
        let x0 = px.floor();
        Corners {
            y0: y0 as isize,
            x0: x0 as isize,
            fy: py - y0,
            fx: px - x0,
        }
    }

    /// (flat offset within the plane, weight) for the four neighbours; `None`
    /// for neighbours outside the image.
    #[inline]
    fn taps(&self, h: usize, w: usize) -> [Option<usize>; 4] {
        let at = |y: isize, x: isize| {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                Some(y as usize * w + x as usize)
            } else {
                None
            }
        };
        [
            at(self.y0, self.x0),
            at(self.y0, self.x0 + 1),
            at(self.y0 + 1, self.x0),
            at(self.y0 + 1, self.x0 + 1),
        ]
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fy, fx) = (self.fy, self.fx);
        [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SampleGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Bilinear sampling with zero padding. `grid` is `[B, out_h, out_w, 2]`
/// holding normalized (y, x) source coordinates.
pub(crate) fn bilinear_forward(g: &SampleGeom, x: &[f64], grid: &[f64]) -> Vec<f64> {
    let plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.channels * out_plane];
    for b in 0..g.batch {
        for s in 0..out_plane {
            let gi = (b * out_plane + s) * 2;
            let corners = Corners::new(
                to_pixel(grid[gi], g.height),
                to_pixel(grid[gi + 1], g.width),
            );
            let taps = corners.taps(g.height, g.width);
            let wts = corners.weights();
            for c in 0..g.channels {
                let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                let mut acc = 0.0;
                for (tap, wt) in taps.iter().zip(wts) {
                    if let Some(o) = tap {
                        acc += wt * src[*o];
                    }
                }
                out[(b * g.channels + c) * out_plane + s] = acc;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    g: &SampleGeom,
    x: &[f64],
    grid: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dgrid: Option<&mut [f64]>,
) {
    let plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let sy = 0.5 * (g.height as f64 - 1.0);
    let sx = 0.5 * (g.width as f64 - 1.0);
    for b in 0..g.batch {
        for s in 0..out_plane {
            let gi = (b * out_plane + s) * 2;
            let corners = Corners::new(
                to_pixel(grid[gi], g.height),
                to_pixel(grid[gi + 1], g.width),
            );
            let taps = corners.taps(g.height, g.width);
            let wts = corners.weights();
            let (mut dpy, mut dpx) = (0.0, 0.0);
            for c in 0..g.channels {
                let pidx = (b * g.channels + c) * plane;
                let go = dout[(b * g.channels + c) * out_plane + s];
                if go == 0.0 {
                    continue;
                }
                if let Some(dx) = dx.as_deref_mut() {
                    for (tap, wt) in taps.iter().zip(wts) {
                        if let Some(o) = tap {
                            dx[pidx + o] += go * wt;
                        }
                    }
                }
                if dgrid.is_some() {
                    let v = |t: Option<usize>| t.map_or(0.0, |o| x[pidx + o]);
                    let [v00, v01, v10, v11] = taps.map(v);
                    dpx += go * ((1.0 - corners.fy) * (v01 - v00) + corners.fy * (v11 - v10));
                    dpy += go * ((1.0 - corners.fx) * (v10 - v00) + corners.fx * (v11 - v01));
                }
            }
            if let Some(dg) = dgrid.as_deref_mut() {
                dg[gi] += dpy * sy;
                dg[gi + 1] += dpx * sx;
            }
        }
    }
}

/// Source coordinates `θ·(x, y, 1)` on the output lattice. `theta` is
/// `[B, 6]` as (a, b, tx, c, d, ty); the grid stores (y, x) per site.
pub(crate) fn affine_grid_forward(theta: &[f64], batch: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * h * w * 2);
    for t in theta.chunks(6).take(batch) {
        for i in 0..h {
            let y = lattice(i, h);
            for j in 0..w {
                let x = lattice(j, w);
                out.push(t[3] * x + t[4] * y + t[5]);
                out.push(t[0] * x + t[1] * y + t[2]);
            }
        }
    }
    out
}

pub(crate) fn affine_grid_backward(dgrid: &[f64], batch: usize, h: usize, w: usize, dtheta: &mut [f64]) {
    for b in 0..batch {
        let dt = &mut dtheta[b * 6..(b + 1) * 6];
        for i in 0..h {
            let y = lattice(i, h);
            for j in 0..w {
                let x = lattice(j, w);
                let gi = ((b * h + i) * w + j) * 2;
                let (gy, gx) = (dgrid[gi], dgrid[gi + 1]);
                dt[0] += gx * x;
                dt[1] += gx * y;
                dt[2] += gx;
                dt[3] += gy * x;
                dt[4] += gy * y;
                dt[5] += gy;
            }
        }
    }
}
