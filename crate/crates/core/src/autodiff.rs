//! Reverse-mode automatic differentiation over dense CHW tensors with the
//! operator set needed by the reconstruction networks, including
//! differentiable forward/back-projection hooks.
//!
//! A [`Tape`] is an append-only graph; every op pushes one node and backward
//! walks the nodes once in reverse creation order. Parameters live in a
//! [`ParamStore`] between passes and are copied onto the tape per pass;
//! their gradients flow back into the store, which makes gradient
//! accumulation across passes the default behavior.

use std::collections::BTreeMap;

use crate::error::{Result, TomoError};
use crate::geometry::Geometry;
use crate::projectors::{back_project_with, forward_project_with, Interp};
use crate::real::Real;
use crate::types::{Image2D, Sinogram};

/// Channels-height-width shape of one tensor (implicit batch of 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Param(String),
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// `y = x * mul + add`; only the multiplier matters for backward.
    Affine(TensorId, f64),
    BiasAdd(TensorId, TensorId),
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
    },
    ConvTranspose2 {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    MaxPool2(TensorId),
    BilinearUp2(TensorId),
    Concat(TensorId, TensorId),
    SliceChannels(TensorId, usize),
    PadTo(TensorId),
    CropTo(TensorId),
    Relu(TensorId),
    PRelu(TensorId, TensorId),
    Sum(TensorId),
    L1Loss(TensorId, TensorId),
    Project(TensorId, Geometry),
    BackProject(TensorId, Geometry),
}

struct Node<T> {
    shape: Shape,
    value: Vec<T>,
    grad: Vec<T>,
    op: Op,
}

/// Append-only computation graph.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    /// Ray sampling used by the differentiable projector hooks.
    pub interp: Interp,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            interp: Interp::default(),
        }
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, op: Op) -> TensorId {
        debug_assert_eq!(value.len(), shape.len());
        let grad = vec![T::zero(); shape.len()];
        self.nodes.push(Node {
            shape,
            value,
            grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].grad
    }

    /// Constant input (no gradient tracked past it).
    pub fn leaf(&mut self, shape: Shape, data: Vec<T>) -> Result<TensorId> {
        if data.len() != shape.len() {
            return Err(TomoError::Dimension(format!(
                "leaf payload {} vs shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    pub fn leaf_image(&mut self, img: &Image2D<T>) -> TensorId {
        self.push(
            Shape::new(1, img.size, img.size),
            img.data.clone(),
            Op::Leaf,
        )
    }

    pub fn leaf_sinogram(&mut self, sino: &Sinogram<T>) -> TensorId {
        self.push(
            Shape::new(1, sino.n_angles(), sino.n_detectors()),
            sino.data.clone(),
            Op::Leaf,
        )
    }

    /// Copies a stored parameter onto the tape; its gradient flows back to
    /// the store in [`ParamStore::accumulate_from`].
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<TensorId> {
        let entry = store
            .params
            .get(name)
            .ok_or_else(|| TomoError::Config(format!("unknown parameter {name}")))?;
        Ok(self.push(entry.shape, entry.value.clone(), Op::Param(name.to_string())))
    }

    fn same_shape(&self, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TomoError::Dimension(format!(
                "{:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b)?;
        let v: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.shape(a), v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b)?;
        let v: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.shape(a), v, Op::Mul(a, b)))
    }

    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> TensorId {
        let (m, a) = (T::of(mul), T::of(add));
        let v: Vec<T> = self.nodes[x.0].value.iter().map(|&t| t * m + a).collect();
        self.push(self.shape(x), v, Op::Affine(x, mul))
    }

    /// Adds a per-channel bias (shape `(c, 1, 1)`).
    pub fn bias_add(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        let bs = self.shape(bias);
        if bs.c != s.c || bs.h != 1 || bs.w != 1 {
            return Err(TomoError::Dimension(format!(
                "bias {:?} does not broadcast over {:?}",
                bs, s
            )));
        }
        let hw = s.h * s.w;
        let mut v = self.nodes[x.0].value.clone();
        for c in 0..s.c {
            let b = self.nodes[bias.0].value[c];
            for t in &mut v[c * hw..(c + 1) * hw] {
                *t = *t + b;
            }
        }
        Ok(self.push(s, v, Op::BiasAdd(x, bias)))
    }

    /// 2D convolution, zero padding `k/2` ("same" at stride 1), stride 1
    /// or 2. Weight shape `(out_c, in_c * kh * kw, ...)` is flattened as
    /// `(out_c, in_c, k, k)` into `(out_c, in_c*k*k, 1)`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        kernel: usize,
        stride: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h != xs.c * kernel * kernel || ws.w != 1 {
            return Err(TomoError::Dimension(format!(
                "conv weight {:?} incompatible with input {:?} kernel {kernel}",
                ws, xs
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(TomoError::Config("conv stride must be 1 or 2".into()));
        }
        let out_c = ws.c;
        if self.shape(b) != Shape::new(out_c, 1, 1) {
            return Err(TomoError::Dimension("conv bias shape".into()));
        }
        let pad = kernel / 2;
        let oh = (xs.h + 2 * pad - kernel) / stride + 1;
        let ow = (xs.w + 2 * pad - kernel) / stride + 1;
        let os = Shape::new(out_c, oh, ow);
        let mut v = vec![T::zero(); os.len()];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            conv_forward(xv, xs, wv, bv, kernel, stride, pad, os, &mut v);
        }
        Ok(self.push(os, v, Op::Conv2d { x, w, b, stride }))
    }

    /// Transposed convolution, kernel 2, stride 2: exact spatial doubling.
    /// Weight shape flattened as `(out_c, in_c*4, 1)`.
    pub fn conv_transpose2(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h != xs.c * 4 || ws.w != 1 {
            return Err(TomoError::Dimension(format!(
                "transposed-conv weight {:?} incompatible with {:?}",
                ws, xs
            )));
        }
        let out_c = ws.c;
        if self.shape(b) != Shape::new(out_c, 1, 1) {
            return Err(TomoError::Dimension("transposed-conv bias shape".into()));
        }
        let os = Shape::new(out_c, xs.h * 2, xs.w * 2);
        let mut v = vec![T::zero(); os.len()];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            let (ih, iw) = (xs.h, xs.w);
            for oc in 0..out_c {
                let base = oc * os.h * os.w;
                for t in &mut v[base..base + os.h * os.w] {
                    *t = bv[oc];
                }
                for ic in 0..xs.c {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let wgt = wv[oc * ws.h + ic * 4 + ky * 2 + kx];
                            for y in 0..ih {
                                for xx in 0..iw {
                                    v[base + (2 * y + ky) * os.w + 2 * xx + kx] = v
                                        [base + (2 * y + ky) * os.w + 2 * xx + kx]
                                        + wgt * xv[ic * ih * iw + y * iw + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(os, v, Op::ConvTranspose2 { x, w, b }))
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(TomoError::Dimension(format!(
                "max pool needs even dims, got {:?}",
                xs
            )));
        }
        let os = Shape::new(xs.c, xs.h / 2, xs.w / 2);
        let mut v = vec![T::zero(); os.len()];
        let xv = &self.nodes[x.0].value;
        for c in 0..xs.c {
            for y in 0..os.h {
                for xx in 0..os.w {
                    let mut best = T::neg_infinity();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let t = xv[c * xs.h * xs.w + (2 * y + dy) * xs.w + 2 * xx + dx];
                            if t > best {
                                best = t;
                            }
                        }
                    }
                    v[c * os.h * os.w + y * os.w + xx] = best;
                }
            }
        }
        Ok(self.push(os, v, Op::MaxPool2(x)))
    }

    /// Bilinear doubling of the spatial dims (half-pixel aligned grids).
    pub fn bilinear_up2(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x);
        let os = Shape::new(xs.c, xs.h * 2, xs.w * 2);
        let mut v = vec![T::zero(); os.len()];
        let xv = &self.nodes[x.0].value;
        for c in 0..xs.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = T::zero();
                    for (sy, swy) in up2_taps(oy, xs.h) {
                        for (sx, swx) in up2_taps(ox, xs.w) {
                            let wgt = T::of(swy * swx);
                            acc = acc + wgt * xv[c * xs.h * xs.w + sy * xs.w + sx];
                        }
                    }
                    v[c * os.h * os.w + oy * os.w + ox] = acc;
                }
            }
        }
        self.push(os, v, Op::BilinearUp2(x))
    }

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.h != sb.h || sa.w != sb.w {
            return Err(TomoError::Dimension(format!(
                "concat spatial mismatch {:?} vs {:?}",
                sa, sb
            )));
        }
        let os = Shape::new(sa.c + sb.c, sa.h, sa.w);
        let mut v = Vec::with_capacity(os.len());
        v.extend_from_slice(&self.nodes[a.0].value);
        v.extend_from_slice(&self.nodes[b.0].value);
        Ok(self.push(os, v, Op::Concat(a, b)))
    }

    pub fn slice_channels(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let xs = self.shape(x);
        if start + len > xs.c {
            return Err(TomoError::Dimension(format!(
                "channel slice {start}..{} of {:?}",
                start + len,
                xs
            )));
        }
        let hw = xs.h * xs.w;
        let v = self.nodes[x.0].value[start * hw..(start + len) * hw].to_vec();
        Ok(self.push(Shape::new(len, xs.h, xs.w), v, Op::SliceChannels(x, start)))
    }

    /// Zero-pads the bottom/right spatial edges up to `(h, w)`.
    pub fn pad_to(&mut self, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let xs = self.shape(x);
        if h < xs.h || w < xs.w {
            return Err(TomoError::Dimension("pad target smaller than input".into()));
        }
        let os = Shape::new(xs.c, h, w);
        let mut v = vec![T::zero(); os.len()];
        let xv = &self.nodes[x.0].value;
        for c in 0..xs.c {
            for y in 0..xs.h {
                let src = c * xs.h * xs.w + y * xs.w;
                let dst = c * h * w + y * w;
                v[dst..dst + xs.w].copy_from_slice(&xv[src..src + xs.w]);
            }
        }
        Ok(self.push(os, v, Op::PadTo(x)))
    }

    /// Crops back to the top-left `(h, w)` region.
    pub fn crop_to(&mut self, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let xs = self.shape(x);
        if h > xs.h || w > xs.w {
            return Err(TomoError::Dimension("crop target larger than input".into()));
        }
        let os = Shape::new(xs.c, h, w);
        let mut v = vec![T::zero(); os.len()];
        let xv = &self.nodes[x.0].value;
        for c in 0..xs.c {
            for y in 0..h {
                let src = c * xs.h * xs.w + y * xs.w;
                let dst = c * h * w + y * w;
                v[dst..dst + w].copy_from_slice(&xv[src..src + w]);
            }
        }
        Ok(self.push(os, v, Op::CropTo(x)))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let v: Vec<T> = self.nodes[x.0]
            .value
            .iter()
            .map(|&t| if t > T::zero() { t } else { T::zero() })
            .collect();
        self.push(self.shape(x), v, Op::Relu(x))
    }

    /// PReLU with a learnable per-channel slope (shape `(c, 1, 1)`).
    pub fn prelu(&mut self, x: TensorId, slope: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if self.shape(slope) != Shape::new(xs.c, 1, 1) {
            return Err(TomoError::Dimension("prelu slope shape".into()));
        }
        let hw = xs.h * xs.w;
        let mut v = self.nodes[x.0].value.clone();
        for c in 0..xs.c {
            let a = self.nodes[slope.0].value[c];
            for t in &mut v[c * hw..(c + 1) * hw] {
                if *t < T::zero() {
                    *t = *t * a;
                }
            }
        }
        Ok(self.push(xs, v, Op::PRelu(x, slope)))
    }

    /// Scalar sum of all entries.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: T = self.nodes[x.0].value.iter().copied().sum();
        self.push(Shape::new(1, 1, 1), vec![s], Op::Sum(x))
    }

    /// Mean absolute error as a scalar node.
    pub fn l1_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        self.same_shape(pred, target)?;
        let n = T::of_usize(self.shape(pred).len());
        let s: T = self.nodes[pred.0]
            .value
            .iter()
            .zip(&self.nodes[target.0].value)
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        Ok(self.push(Shape::new(1, 1, 1), vec![s / n], Op::L1Loss(pred, target)))
    }

    /// Differentiable forward projection of a single-channel image tensor.
    pub fn project(&mut self, x: TensorId, geom: &Geometry) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.c != 1 || xs.h != xs.w {
            return Err(TomoError::Dimension(format!(
                "projector input must be (1, s, s), got {:?}",
                xs
            )));
        }
        let img = Image2D {
            size: xs.h,
            data: self.nodes[x.0].value.clone(),
        };
        let sino = forward_project_with(&img, geom, self.interp);
        Ok(self.push(
            Shape::new(1, geom.n_angles(), geom.n_detectors()),
            sino.data,
            Op::Project(x, geom.clone()),
        ))
    }

    /// Differentiable unfiltered back-projection (adjoint of [`Tape::project`]).
    pub fn backproject(&mut self, x: TensorId, geom: &Geometry, out_size: usize) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.c != 1 || xs.h != geom.n_angles() || xs.w != geom.n_detectors() {
            return Err(TomoError::Dimension(format!(
                "backprojector input {:?} vs geometry {}x{}",
                xs,
                geom.n_angles(),
                geom.n_detectors()
            )));
        }
        let sino = Sinogram {
            geometry: geom.clone(),
            data: self.nodes[x.0].value.clone(),
        };
        let img = back_project_with(&sino, geom, out_size, self.interp)?;
        Ok(self.push(
            Shape::new(1, out_size, out_size),
            img.data,
            Op::BackProject(x, geom.clone()),
        ))
    }

    /// Reverse pass from a scalar node; gradients of every node are
    /// populated, parameters keep theirs until absorbed into the store.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.shape(loss).len() != 1 {
            return Err(TomoError::Dimension("backward needs a scalar loss".into()));
        }
        for n in &mut self.nodes {
            for g in &mut n.grad {
                *g = T::zero();
            }
        }
        self.nodes[loss.0].grad[0] = T::one();
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.iter().all(|g| *g == T::zero()) {
                continue;
            }
            self.backward_node(i);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize) {
        let grad = std::mem::take(&mut self.nodes[i].grad);
        let shape = self.nodes[i].shape;
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param(_) => {}
            &Op::Add(a, b) => {
                for (k, &g) in grad.iter().enumerate() {
                    self.nodes[a.0].grad[k] = self.nodes[a.0].grad[k] + g;
                }
                for (k, &g) in grad.iter().enumerate() {
                    self.nodes[b.0].grad[k] = self.nodes[b.0].grad[k] + g;
                }
            }
            &Op::Mul(a, b) => {
                for k in 0..grad.len() {
                    let (va, vb) = (self.nodes[a.0].value[k], self.nodes[b.0].value[k]);
                    self.nodes[a.0].grad[k] = self.nodes[a.0].grad[k] + grad[k] * vb;
                    self.nodes[b.0].grad[k] = self.nodes[b.0].grad[k] + grad[k] * va;
                }
            }
            &Op::Affine(x, mul) => {
                let m = T::of(mul);
                for (k, &g) in grad.iter().enumerate() {
                    self.nodes[x.0].grad[k] = self.nodes[x.0].grad[k] + g * m;
                }
            }
            &Op::BiasAdd(x, b) => {
                let hw = shape.h * shape.w;
                for (k, &g) in grad.iter().enumerate() {
                    self.nodes[x.0].grad[k] = self.nodes[x.0].grad[k] + g;
                }
                for c in 0..shape.c {
                    let s: T = grad[c * hw..(c + 1) * hw].iter().copied().sum();
                    self.nodes[b.0].grad[c] = self.nodes[b.0].grad[c] + s;
                }
            }
            &Op::Conv2d { x, w, b, stride } => {
                let xs = self.nodes[x.0].shape;
                let ws = self.nodes[w.0].shape;
                let kernel = ((ws.h / xs.c) as f64).sqrt().round() as usize;
                let pad = kernel / 2;
                let (xv, wv) = (
                    std::mem::take(&mut self.nodes[x.0].value),
                    std::mem::take(&mut self.nodes[w.0].value),
                );
                {
                    let mut gx = std::mem::take(&mut self.nodes[x.0].grad);
                    let mut gw = std::mem::take(&mut self.nodes[w.0].grad);
                    let gb = &mut self.nodes[b.0].grad;
                    conv_backward(
                        &xv, xs, &wv, ws, kernel, stride, pad, shape, &grad, &mut gx, &mut gw,
                        gb,
                    );
                    self.nodes[x.0].grad = gx;
                    self.nodes[w.0].grad = gw;
                }
                self.nodes[x.0].value = xv;
                self.nodes[w.0].value = wv;
            }
            &Op::ConvTranspose2 { x, w, b } => {
                let xs = self.nodes[x.0].shape;
                let ws = self.nodes[w.0].shape;
                let (ih, iw) = (xs.h, xs.w);
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                let wv = std::mem::take(&mut self.nodes[w.0].value);
                let mut gx = std::mem::take(&mut self.nodes[x.0].grad);
                let mut gw = std::mem::take(&mut self.nodes[w.0].grad);
                for oc in 0..shape.c {
                    let base = oc * shape.h * shape.w;
                    let gsum: T = grad[base..base + shape.h * shape.w].iter().copied().sum();
                    self.nodes[b.0].grad[oc] = self.nodes[b.0].grad[oc] + gsum;
                    for ic in 0..xs.c {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let widx = oc * ws.h + ic * 4 + ky * 2 + kx;
                                let wgt = wv[widx];
                                let mut acc_w = T::zero();
                                for y in 0..ih {
                                    for xx in 0..iw {
                                        let g = grad[base + (2 * y + ky) * shape.w + 2 * xx + kx];
                                        let xi = ic * ih * iw + y * iw + xx;
                                        gx[xi] = gx[xi] + wgt * g;
                                        acc_w = acc_w + g * xv[xi];
                                    }
                                }
                                gw[widx] = gw[widx] + acc_w;
                            }
                        }
                    }
                }
                self.nodes[x.0].value = xv;
                self.nodes[w.0].value = wv;
                self.nodes[x.0].grad = gx;
                self.nodes[w.0].grad = gw;
            }
            &Op::MaxPool2(x) => {
                let xs = self.nodes[x.0].shape;
                for c in 0..shape.c {
                    for y in 0..shape.h {
                        for xx in 0..shape.w {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx =
                                        c * xs.h * xs.w + (2 * y + dy) * xs.w + 2 * xx + dx;
                                    let t = self.nodes[x.0].value[idx];
                                    if t > best {
                                        best = t;
                                        best_idx = idx;
                                    }
                                }
                            }
                            let g = grad[c * shape.h * shape.w + y * shape.w + xx];
                            self.nodes[x.0].grad[best_idx] =
                                self.nodes[x.0].grad[best_idx] + g;
                        }
                    }
                }
            }
            &Op::BilinearUp2(x) => {
                let xs = self.nodes[x.0].shape;
                for c in 0..shape.c {
                    for oy in 0..shape.h {
                        for ox in 0..shape.w {
                            let g = grad[c * shape.h * shape.w + oy * shape.w + ox];
                            if g == T::zero() {
                                continue;
                            }
                            for (sy, swy) in up2_taps(oy, xs.h) {
                                for (sx, swx) in up2_taps(ox, xs.w) {
                                    let idx = c * xs.h * xs.w + sy * xs.w + sx;
                                    self.nodes[x.0].grad[idx] =
                                        self.nodes[x.0].grad[idx] + g * T::of(swy * swx);
                                }
                            }
                        }
                    }
                }
            }
            &Op::Concat(a, b) => {
                let ca = self.nodes[a.0].shape.len();
                for (k, &g) in grad[..ca].iter().enumerate() {
                    self.nodes[a.0].grad[k] = self.nodes[a.0].grad[k] + g;
                }
                for (k, &g) in grad[ca..].iter().enumerate() {
                    self.nodes[b.0].grad[k] = self.nodes[b.0].grad[k] + g;
                }
            }
            &Op::SliceChannels(x, start) => {
                let xs = self.nodes[x.0].shape;
                let hw = xs.h * xs.w;
                for (k, &g) in grad.iter().enumerate() {
                    self.nodes[x.0].grad[start * hw + k] =
                        self.nodes[x.0].grad[start * hw + k] + g;
                }
            }
            &Op::PadTo(x) => {
                let xs = self.nodes[x.0].shape;
                for c in 0..xs.c {
                    for y in 0..xs.h {
                        for xx in 0..xs.w {
                            let g = grad[c * shape.h * shape.w + y * shape.w + xx];
                            let idx = c * xs.h * xs.w + y * xs.w + xx;
                            self.nodes[x.0].grad[idx] = self.nodes[x.0].grad[idx] + g;
                        }
                    }
                }
            }
            &Op::CropTo(x) => {
                let xs = self.nodes[x.0].shape;
                for c in 0..shape.c {
                    for y in 0..shape.h {
                        for xx in 0..shape.w {
                            let g = grad[c * shape.h * shape.w + y * shape.w + xx];
                            let idx = c * xs.h * xs.w + y * xs.w + xx;
                            self.nodes[x.0].grad[idx] = self.nodes[x.0].grad[idx] + g;
                        }
                    }
                }
            }
            &Op::Relu(x) => {
                for (k, &g) in grad.iter().enumerate() {
                    if self.nodes[x.0].value[k] > T::zero() {
                        self.nodes[x.0].grad[k] = self.nodes[x.0].grad[k] + g;
                    }
                }
            }
            &Op::PRelu(x, slope) => {
                let hw = shape.h * shape.w;
                for c in 0..shape.c {
                    let a = self.nodes[slope.0].value[c];
                    let mut gs = T::zero();
                    for k in c * hw..(c + 1) * hw {
                        let v = self.nodes[x.0].value[k];
                        if v >= T::zero() {
                            self.nodes[x.0].grad[k] = self.nodes[x.0].grad[k] + grad[k];
                        } else {
                            self.nodes[x.0].grad[k] = self.nodes[x.0].grad[k] + grad[k] * a;
                            gs = gs + grad[k] * v;
                        }
                    }
                    self.nodes[slope.0].grad[c] = self.nodes[slope.0].grad[c] + gs;
                }
            }
            &Op::Sum(x) => {
                let g = grad[0];
                for gk in self.nodes[x.0].grad.iter_mut() {
                    *gk = *gk + g;
                }
            }
            &Op::L1Loss(pred, target) => {
                let n = T::of_usize(self.nodes[pred.0].shape.len());
                let g = grad[0] / n;
                for k in 0..self.nodes[pred.0].shape.len() {
                    let d = self.nodes[pred.0].value[k] - self.nodes[target.0].value[k];
                    // subgradient 0 at exact ties
                    let s = if d > T::zero() {
                        g
                    } else if d < T::zero() {
                        -g
                    } else {
                        T::zero()
                    };
                    self.nodes[pred.0].grad[k] = self.nodes[pred.0].grad[k] + s;
                    self.nodes[target.0].grad[k] = self.nodes[target.0].grad[k] - s;
                }
            }
            Op::Project(x, geom) => {
                let (x, geom) = (*x, geom.clone());
                let sino = Sinogram {
                    geometry: geom.clone(),
                    data: grad.clone(),
                };
                let out_size = self.nodes[x.0].shape.h;
                let img = back_project_with(&sino, &geom, out_size, self.interp)
                    .expect("adjoint of a validated projection");
                for (gk, v) in self.nodes[x.0].grad.iter_mut().zip(img.data) {
                    *gk = *gk + v;
                }
            }
            Op::BackProject(x, geom) => {
                let (x, geom) = (*x, geom.clone());
                let img = Image2D {
                    size: shape.h,
                    data: grad.clone(),
                };
                let sino = forward_project_with(&img, &geom, self.interp);
                for (gk, v) in self.nodes[x.0].grad.iter_mut().zip(sino.data) {
                    *gk = *gk + v;
                }
            }
        }
        self.nodes[i].op = op;
        self.nodes[i].grad = grad;
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Source taps and weights for bilinear doubling along one axis
/// (half-pixel aligned: dst center `(o + 0.5)/2 - 0.5` in source units).
fn up2_taps(o: usize, src_len: usize) -> Vec<(usize, f64)> {
    let pos = (o as f64 + 0.5) / 2.0 - 0.5;
    let lo = pos.floor();
    let frac = pos - lo;
    let lo_i = lo as isize;
    let mut taps = Vec::with_capacity(2);
    let clamp = |i: isize| i.clamp(0, src_len as isize - 1) as usize;
    if frac < 1.0 {
        taps.push((clamp(lo_i), 1.0 - frac));
    }
    if frac > 0.0 {
        taps.push((clamp(lo_i + 1), frac));
    }
    taps
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(
    xv: &[T],
    xs: Shape,
    wv: &[T],
    bv: &[T],
    kernel: usize,
    stride: usize,
    pad: usize,
    os: Shape,
    out: &mut [T],
) {
    let klen = xs.c * kernel * kernel;
    for oc in 0..os.c {
        let wbase = oc * klen;
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut acc = bv[oc];
                for ic in 0..xs.c {
                    for ky in 0..kernel {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= xs.h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if x < 0 || x >= xs.w as isize {
                                continue;
                            }
                            acc = acc
                                + wv[wbase + ic * kernel * kernel + ky * kernel + kx]
                                    * xv[ic * xs.h * xs.w + y as usize * xs.w + x as usize];
                        }
                    }
                }
                out[oc * os.h * os.w + oy * os.w + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    xv: &[T],
    xs: Shape,
    wv: &[T],
    ws: Shape,
    kernel: usize,
    stride: usize,
    pad: usize,
    os: Shape,
    gout: &[T],
    gx: &mut [T],
    gw: &mut [T],
    gb: &mut [T],
) {
    let klen = ws.h;
    for oc in 0..os.c {
        let wbase = oc * klen;
        for oy in 0..os.h {
            for ox in 0..os.w {
                let g = gout[oc * os.h * os.w + oy * os.w + ox];
                if g == T::zero() {
                    continue;
                }
                gb[oc] = gb[oc] + g;
                for ic in 0..xs.c {
                    for ky in 0..kernel {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= xs.h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if x < 0 || x >= xs.w as isize {
                                continue;
                            }
                            let xi = ic * xs.h * xs.w + y as usize * xs.w + x as usize;
                            let wi = wbase + ic * kernel * kernel + ky * kernel + kx;
                            gx[xi] = gx[xi] + g * wv[wi];
                            gw[wi] = gw[wi] + g * xv[xi];
                        }
                    }
                }
            }
        }
    }
}

struct ParamEntry<T> {
    shape: Shape,
    value: Vec<T>,
    grad: Vec<T>,
    m: Vec<T>,
    v: Vec<T>,
}

/// Named parameters plus Adam state; gradients accumulate across passes
/// until [`ParamStore::adam_step`] or [`ParamStore::zero_grads`].
pub struct ParamStore<T: Real> {
    params: BTreeMap<String, ParamEntry<T>>,
    /// Adam step count (shared across parameters).
    pub step: usize,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    /// Registers a parameter if absent; existing entries keep their values.
    pub fn register(&mut self, name: &str, shape: Shape, init: impl FnOnce() -> Vec<T>) {
        self.params.entry(name.to_string()).or_insert_with(|| {
            let value = init();
            assert_eq!(value.len(), shape.len(), "init payload for {name}");
            ParamEntry {
                shape,
                value,
                grad: vec![T::zero(); shape.len()],
                m: vec![T::zero(); shape.len()],
                v: vec![T::zero(); shape.len()],
            }
        });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn shape_of(&self, name: &str) -> Option<Shape> {
        self.params.get(name).map(|e| e.shape)
    }

    pub fn value_of(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).map(|e| e.value.as_slice())
    }

    pub fn grad_of(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).map(|e| e.grad.as_slice())
    }

    pub fn set_value(&mut self, name: &str, value: Vec<T>) -> Result<()> {
        let entry = self
            .params
            .get_mut(name)
            .ok_or_else(|| TomoError::Config(format!("unknown parameter {name}")))?;
        if value.len() != entry.shape.len() {
            return Err(TomoError::Dimension(format!(
                "parameter {name} payload {}",
                value.len()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(|e| e.shape.len()).sum()
    }

    /// Adds the tape gradients of every `Op::Param` node into the store.
    pub fn accumulate_from(&mut self, tape: &Tape<T>) {
        for node in &tape.nodes {
            if let Op::Param(name) = &node.op {
                if let Some(entry) = self.params.get_mut(name) {
                    for (g, t) in entry.grad.iter_mut().zip(&node.grad) {
                        *g = *g + *t;
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in self.params.values_mut() {
            for g in &mut entry.grad {
                *g = T::zero();
            }
        }
    }

    /// Bias-corrected Adam update over all parameters; clears gradients
    /// only when `zero_grads` is set, so accumulation keeps working.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64, zero_grads: bool) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let one = T::one();
        let corr1 = T::of(1.0 - beta1.powi(t));
        let corr2 = T::of(1.0 - beta2.powi(t));
        let lr = T::of(lr);
        let eps = T::of(eps);
        for entry in self.params.values_mut() {
            for k in 0..entry.value.len() {
                let g = entry.grad[k];
                entry.m[k] = b1 * entry.m[k] + (one - b1) * g;
                entry.v[k] = b2 * entry.v[k] + (one - b2) * g * g;
                let m_hat = entry.m[k] / corr1;
                let v_hat = entry.v[k] / corr2;
                entry.value[k] = entry.value[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            if zero_grads {
                for g in &mut entry.grad {
                    *g = T::zero();
                }
            }
        }
    }

    /// Flat export in name order: `(name, shape, values, m, v)` per entry.
    pub fn export(&self) -> Vec<(String, Shape, Vec<T>, Vec<T>, Vec<T>)> {
        self.params
            .iter()
            .map(|(n, e)| {
                (
                    n.clone(),
                    e.shape,
                    e.value.clone(),
                    e.m.clone(),
                    e.v.clone(),
                )
            })
            .collect()
    }

    /// Restores one entry including optimizer state.
    pub fn import(
        &mut self,
        name: &str,
        shape: Shape,
        value: Vec<T>,
        m: Vec<T>,
        v: Vec<T>,
    ) -> Result<()> {
        if value.len() != shape.len() || m.len() != shape.len() || v.len() != shape.len() {
            return Err(TomoError::Dimension(format!(
                "checkpoint payload for {name} does not match {:?}",
                shape
            )));
        }
        self.params.insert(
            name.to_string(),
            ParamEntry {
                shape,
                value,
                grad: vec![T::zero(); shape.len()],
                m,
                v,
            },
        );
        Ok(())
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}
