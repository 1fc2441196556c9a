//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough
//! context to run its backward rule. [`Var`] is a cheap handle into the tape.
//! Nodes only reference earlier nodes, so the tape is always in topological
//! order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, SampleGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    AffineGrid {
        theta: Var,
        height: usize,
        width: usize,
    },
    Bilinear {
        input: Var,
        grid: Var,
        geom: SampleGeom,
    },
    RotationTheta(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    /// Accumulated gradient; only populated for leaves.
    grad: Option<Vec<f64>>,
}

/// Ordered record of operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, shaped like its value.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Cross-correlation (no kernel flip) with per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [batch, in_ch, height, width] = self.value(input).dims4("conv2d")?;
        let [out_ch, k_in, kh, kw] = self.value(kernel).dims4("conv2d")?;
        if k_in != in_ch {
            return Err(Error::shape(
                "conv2d",
                "input channels",
                format!("input has {in_ch}, kernel expects {k_in}"),
            ));
        }
        if self.value(bias).shape() != [out_ch] {
            return Err(Error::shape(
                "conv2d",
                "bias",
                format!("expected [{out_ch}], got {:?}", self.value(bias).shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let out_extent = |n: usize, k: usize, dim: &'static str| {
            let span = n + 2 * padding;
            if span < k {
                return Err(Error::shape(
                    "conv2d",
                    dim,
                    format!("kernel {k} exceeds padded extent {span}"),
                ));
            }
            Ok((span - k) / stride + 1)
        };
        let out_h = out_extent(height, kh, "height")?;
        let out_w = out_extent(width, kw, "width")?;
        let geom = ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new([batch, out_ch, out_h, out_w], data)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("max_pool2d")?;
        if window == 0 || stride == 0 {
            return Err(Error::invalid("max_pool2d", "window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(Error::invalid(
                "max_pool2d",
                format!("window {window} larger than spatial extent {h}x{w}"),
            ));
        }
        let (data, argmax, oh, ow) =
            kernels::max_pool_forward(self.value(input).data(), b * c, h, w, window, stride);
        let value = Tensor::new([b, c, oh, ow], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::MaxPool { input, argmax }))
    }

    /// `input·weightᵀ + bias` for input `[B, N]`, weight `[M, N]`, bias `[M]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [batch, n] = self.value(input).dims2("dense")?;
        let [m, wn] = self.value(weight).dims2("dense")?;
        if wn != n {
            return Err(Error::shape(
                "dense",
                "inner extent",
                format!("input has {n} features, weight expects {wn}"),
            ));
        }
        if self.value(bias).shape() != [m] {
            return Err(Error::shape(
                "dense",
                "bias",
                format!("expected [{m}], got {:?}", self.value(bias).shape()),
            ));
        }
        let mut out = Vec::with_capacity(batch * m);
        for _ in 0..batch {
            out.extend_from_slice(self.value(bias).data());
        }
        kernels::gemm(
            batch,
            n,
            m,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            &mut out,
            1.0,
        );
        let value = Tensor::new([batch, m], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::Relu(input))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Reshape(input)))
    }

    /// Collapses all trailing axes: `[B, ...] -> [B, N]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let b = shape[0];
        let n = shape[1..].iter().product();
        self.reshape(input, &[b, n])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::Sum(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_values("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_values("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::Scale(input, factor))
    }

    fn zip_values(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                op,
                "operands",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [batch, classes] = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != batch {
            return Err(Error::shape(
                "softmax_cross_entropy",
                "batch",
                format!("{batch} rows of logits, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let mut probs = Vec::with_capacity(batch * classes);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            loss -= row[label] - max - log_denom;
            probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
        }
        let value = Tensor::scalar(loss / batch as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Sampling grid `[B, height, width, 2]` from affine parameters `[B, 6]`.
    pub fn affine_grid(&mut self, theta: Var, height: usize, width: usize) -> Result<Var> {
        let [batch, six] = self.value(theta).dims2("affine_grid")?;
        if six != 6 {
            return Err(Error::shape("affine_grid", "parameters", format!("expected 6, got {six}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("affine_grid", "output extents must be at least 1"));
        }
        if !self.value(theta).is_finite() {
            return Err(Error::NonFinite { op: "affine_grid" });
        }
        let data = kernels::affine_grid_forward(self.value(theta).data(), batch, height, width);
        let value = Tensor::new([batch, height, width, 2], data)?;
        let rg = self.any_grad(&[theta]);
        Ok(self.push(
            value,
            rg,
            Op::AffineGrid {
                theta,
                height,
                width,
            },
        ))
    }

    /// Bilinear sampling of `[B, C, H, W]` at a `[B, H', W', 2]` grid, zero padded.
    pub fn bilinear_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let [batch, channels, height, width] = self.value(input).dims4("bilinear_sample")?;
        let geom = sample_geom(
            [batch, channels, height, width],
            self.value(grid).shape(),
        )?;
        let data = kernels::bilinear_forward(&geom, self.value(input).data(), self.value(grid).data());
        let value = Tensor::new([batch, channels, geom.out_h, geom.out_w], data)?;
        let rg = self.any_grad(&[input, grid]);
        Ok(self.push(value, rg, Op::Bilinear { input, grid, geom }))
    }

    /// `[B, 1]` angles to `[B, 6]` rotation parameters `[cos, -sin, 0, sin, cos, 0]`.
    pub fn rotation_theta(&mut self, angle: Var) -> Result<Var> {
        let [batch, one] = self.value(angle).dims2("rotation_theta")?;
        if one != 1 {
            return Err(Error::shape("rotation_theta", "angles", format!("expected 1, got {one}")));
        }
        let mut data = Vec::with_capacity(batch * 6);
        for &a in self.value(angle).data() {
            let (s, c) = a.sin_cos();
            data.extend_from_slice(&[c, -s, 0.0, s, c, 0.0]);
        }
        let value = Tensor::new([batch, 6], data)?;
        let rg = self.any_grad(&[angle]);
        Ok(self.push(value, rg, Op::RotationTheta(angle)))
    }

    /// Reverse sweep from a scalar `loss`, adding into leaf gradients.
    ///
    /// Intermediate gradients are rebuilt on every call, so running backward
    /// twice without [`Tape::zero_grad`] doubles every leaf gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn target<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*kernel).data();
                // Distinct vars; take buffers out to satisfy the borrow checker.
                let mut dx = self.target(grads, *input).map(|s| s.to_vec());
                let mut dw = self.target(grads, *kernel).map(|s| s.to_vec());
                let mut db = self.target(grads, *bias).map(|s| s.to_vec());
                kernels::conv2d_backward(
                    geom,
                    x,
                    w,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, buf) in [(*input, dx), (*kernel, dw), (*bias, db)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(dx) = self.target(grads, *input) {
                    for (&idx, &gv) in argmax.iter().zip(g) {
                        dx[idx] += gv;
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let [batch, n] = [x.shape()[0], x.shape()[1]];
                let m = w.shape()[0];
                if let Some(dx) = self.target(grads, *input) {
                    kernels::gemm(batch, m, n, g, false, w.data(), false, dx, 1.0);
                }
                if let Some(dw) = self.target(grads, *weight) {
                    kernels::gemm(m, batch, n, g, true, x.data(), false, dw, 1.0);
                }
                if let Some(db) = self.target(grads, *bias) {
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                if let Some(dx) = self.target(grads, *input) {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Reshape(input) => {
                if let Some(dx) = self.target(grads, *input) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Sum(input) => {
                if let Some(dx) = self.target(grads, *input) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(dx) = self.target(grads, v) {
                        dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let o = self.value(other).data();
                    if let Some(dx) = self.target(grads, v) {
                        for ((d, &ov), &gv) in dx.iter_mut().zip(o).zip(g) {
                            *d += gv * ov;
                        }
                    }
                }
            }
            Op::Scale(input, factor) => {
                if let Some(dx) = self.target(grads, *input) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * factor);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f64;
                if let Some(dx) = self.target(grads, *logits) {
                    for (b, &label) in labels.iter().enumerate() {
                        for k in 0..classes {
                            let onehot = if k == label { 1.0 } else { 0.0 };
                            dx[b * classes + k] += scale * (probs[b * classes + k] - onehot);
                        }
                    }
                }
            }
            Op::AffineGrid {
                theta,
                height,
                width,
            } => {
                let batch = out.shape()[0];
                if let Some(dt) = self.target(grads, *theta) {
                    kernels::affine_grid_backward(g, batch, *height, *width, dt);
                }
            }
            Op::Bilinear { input, grid, geom } => {
                let x = self.value(*input).data();
                let gr = self.value(*grid).data();
                let mut dx = self.target(grads, *input).map(|s| s.to_vec());
                let mut dg = self.target(grads, *grid).map(|s| s.to_vec());
                kernels::bilinear_backward(geom, x, gr, g, dx.as_deref_mut(), dg.as_deref_mut());
                for (v, buf) in [(*input, dx), (*grid, dg)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::RotationTheta(angle) => {
                let a = self.value(*angle).data();
                if let Some(da) = self.target(grads, *angle) {
                    for (i, &av) in a.iter().enumerate() {
                        let (s, c) = av.sin_cos();
                        let t = &g[i * 6..i * 6 + 6];
                        // d/dα of [c, -s, 0, s, c, 0]
                        da[i] += t[0] * -s + t[1] * -c + t[3] * c + t[4] * -s;
                    }
                }
            }
        }
    }
}

pub(crate) fn sample_geom(input: [usize; 4], grid_shape: &[usize]) -> Result<SampleGeom> {
    let [batch, channels, height, width] = input;
    match *grid_shape {
        [gb, oh, ow, 2] if gb == batch => Ok(SampleGeom {
            batch,
            channels,
            height,
            width,
            out_h: oh,
            out_w: ow,
        }),
        [gb, _, _, 2] => Err(Error::shape(
            "bilinear_sample",
            "batch",
            format!("grid batch {gb} vs input batch {batch}"),
        )),
        _ => Err(Error::shape(
            "bilinear_sample",
            "grid",
            format!("expected [B, H, W, 2], got {grid_shape:?}"),
        )),
    }
}
