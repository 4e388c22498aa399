//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the record in
//! reverse and adds the resulting gradients into the persistent
//! accumulators of the leaves that require them; repeated calls accumulate.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};
use crate::tomo::{backproject, radon, Geometry, Image, Sinogram};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    Conv2d { input: usize, weight: usize, bias: usize, padded: Vec<f64>, kernel: usize },
    LeakyRelu { input: usize, slope: f64 },
    AvgPool2 { input: usize },
    Upsample2 { input: usize },
    Concat { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { input: usize, factor: f64 },
    SumSquares { input: usize },
    ReflectPad { input: usize },
    Crop { input: usize },
    Radon { input: usize, geom: Arc<Geometry>, angle_ids: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => invalid(format!("{what} expects a [C, H, W] tensor, got {:?}", t.shape())),
    }
}

/// `C = A B + beta * C` on strided views. `a`, `b` and `c` carry
/// (slice, row stride, column stride).
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(a.0.len() >= extent(m, k, a.1, a.2));
    assert!(b.0.len() >= extent(k, n, b.1, b.2));
    assert!(c.0.len() >= extent(m, n, c.1, c.2));
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

/// Zero-padded copy of a `[C, H, W]` buffer with `p` pixels on every side.
fn pad_zero(x: &[f64], ch: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let wp = w + 2 * p;
    let plane = (h + 2 * p) * wp;
    let mut out = vec![0.0; ch * plane];
    for c in 0..ch {
        for r in 0..h {
            let dst = c * plane + (r + p) * wp + p;
            out[dst..dst + w].copy_from_slice(&x[(c * h + r) * w..(c * h + r + 1) * w]);
        }
    }
    out
}

/// Layout of a same-padded convolution computed as one GEMM per kernel tap.
/// Outputs live on a strip of the padded grid whose row stride is the padded
/// width; the last `2p` entries of each strip row are discarded.
#[derive(Clone, Copy)]
struct ConvGrid {
    k: usize,
    /// padded width
    wp: usize,
    /// padded plane size
    plane: usize,
    /// strip length
    len: usize,
}

impl ConvGrid {
    fn new(h: usize, w: usize, k: usize) -> Self {
        let p = k / 2;
        let wp = w + 2 * p;
        Self { k, wp, plane: (h + 2 * p) * wp, len: (h - 1) * wp + w }
    }

    /// Start of the input strip read by tap `(ky, kx)`.
    fn offset(&self, tap: usize) -> usize {
        (tap / self.k) * self.wp + tap % self.k
    }

    fn taps(&self) -> usize {
        self.k * self.k
    }
}

/// Source index of output position `i` under reflection padding of a
/// length-`n` axis (edge sample not repeated).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::InvalidState("variable is not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.data().iter().all(|v| v.is_finite()), "non-finite value produced on tape");
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Accumulated gradient of a leaf, `None` until a backward pass reaches it.
    pub fn grad(&self, v: Var) -> Result<Option<&[f64]>> {
        Ok(self.grads[self.idx(v)?].as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Same-padded 2D convolution. `x: [Cin, H, W]`, `weight: [Cout, Cin, k, k]`
    /// with odd `k`, `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(weight)?, self.idx(bias)?);
        let (cin, h, w) = dims3(&self.nodes[xi].value, "conv2d")?;
        let (cout, k) = match self.nodes[wi].value.shape()[..] {
            [co, ci, k1, k2] if ci == cin && k1 == k2 && k1 % 2 == 1 => (co, k1),
            _ => {
                return invalid(format!(
                    "conv2d weight {:?} incompatible with input {:?}",
                    self.nodes[wi].value.shape(),
                    self.nodes[xi].value.shape()
                ))
            }
        };
        if self.nodes[bi].value.shape() != [cout] {
            return invalid(format!("conv2d bias must be [{cout}]"));
        }
        let grid = ConvGrid::new(h, w, k);
        let padded = pad_zero(self.nodes[xi].value.data(), cin, h, w, k / 2);
        let weights = self.nodes[wi].value.data();
        let kk = grid.taps();
        let mut strip = vec![0.0; cout * grid.len];
        for tap in 0..kk {
            gemm(
                cout,
                cin,
                grid.len,
                (&weights[tap..], cin * kk, kk),
                (&padded[grid.offset(tap)..], grid.plane, 1),
                1.0,
                (&mut strip, grid.len, 1),
            );
        }
        let mut out = Vec::with_capacity(cout * h * w);
        for (co, &b) in self.nodes[bi].value.data().iter().enumerate() {
            for r in 0..h {
                let row = &strip[co * grid.len + r * grid.wp..co * grid.len + r * grid.wp + w];
                out.extend(row.iter().map(|v| v + b));
            }
        }
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        let value = Tensor::new(vec![cout, h, w], out)?;
        Ok(self.push(value, Op::Conv2d { input: xi, weight: wi, bias: bi, padded, kernel: k }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = &self.nodes[xi].value;
        let data = src.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::LeakyRelu { input: xi, slope }, rg))
    }

    /// 2x2 average pooling; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (c, h, w) = dims3(&self.nodes[xi].value, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return invalid(format!("avg_pool2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.nodes[xi].value.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let base = ch * h * w + 2 * r * w + 2 * col;
                    out[(ch * oh + r) * ow + col] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::AvgPool2 { input: xi }, rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (c, h, w) = dims3(&self.nodes[xi].value, "upsample2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.nodes[xi].value.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    out[(ch * oh + r) * ow + col] = src[(ch * h + r / 2) * w + col / 2];
                }
            }
        }
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::Upsample2 { input: xi }, rg))
    }

    /// Channel concatenation of two `[C, H, W]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ca, ha, wa) = dims3(&self.nodes[ai].value, "concat")?;
        let (cb, hb, wb) = dims3(&self.nodes[bi].value, "concat")?;
        if (ha, wa) != (hb, wb) {
            return invalid(format!("concat spatial mismatch {ha}x{wa} vs {hb}x{wb}"));
        }
        let mut data = self.nodes[ai].value.data().to_vec();
        data.extend_from_slice(self.nodes[bi].value.data());
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(Tensor::new(vec![ca + cb, ha, wa], data)?, Op::Concat { a: ai, b: bi }, rg))
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return invalid(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ai, bi, "add")?;
        let data = self.nodes[ai].value.data().iter().zip(self.nodes[bi].value.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.nodes[ai].value.shape().to_vec(), data)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(value, Op::Add { a: ai, b: bi }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ai, bi, "sub")?;
        let data = self.nodes[ai].value.data().iter().zip(self.nodes[bi].value.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.nodes[ai].value.shape().to_vec(), data)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(value, Op::Sub { a: ai, b: bi }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = &self.nodes[xi].value;
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v * factor).collect())?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Scale { input: xi, factor }, rg))
    }

    /// Scalar sum of squared entries.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.data().iter().map(|v| v * v).sum();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(s), Op::SumSquares { input: xi }, rg))
    }

    /// Reflection-pads the bottom and right of a `[C, H, W]` tensor to
    /// `target_h x target_w`.
    pub fn reflect_pad(&mut self, x: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (c, h, w) = dims3(&self.nodes[xi].value, "reflect_pad")?;
        if target_h < h || target_w < w || target_h - h >= h.max(2) || target_w - w >= w.max(2) {
            return invalid(format!("cannot reflect-pad {h}x{w} to {target_h}x{target_w}"));
        }
        let src = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(c * target_h * target_w);
        for ch in 0..c {
            for r in 0..target_h {
                let sr = reflect(r, h);
                for col in 0..target_w {
                    out.push(src[(ch * h + sr) * w + reflect(col, w)]);
                }
            }
        }
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(vec![c, target_h, target_w], out)?, Op::ReflectPad { input: xi }, rg))
    }

    /// Keeps the top-left `h x w` window of a `[C, H, W]` tensor.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (c, sh, sw) = dims3(&self.nodes[xi].value, "crop")?;
        if h > sh || w > sw {
            return invalid(format!("cannot crop {sh}x{sw} to {h}x{w}"));
        }
        let src = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for r in 0..h {
                out.extend_from_slice(&src[(ch * sh + r) * sw..(ch * sh + r) * sw + w]);
            }
        }
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::Crop { input: xi }, rg))
    }

    /// Radon transform of a `[1, H, W]` image at `angle_ids`; output is
    /// `[rows, n_detectors]`. The backward pass is [`backproject`].
    pub fn radon(&mut self, x: Var, geom: &Arc<Geometry>, angle_ids: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let img = self.nodes[xi].value.to_image()?;
        let sino = radon(&img, geom, angle_ids)?;
        let value = Tensor::new(vec![sino.n_rows(), sino.n_detectors()], sino.data().to_vec())?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Radon { input: xi, geom: Arc::clone(geom), angle_ids: angle_ids.to_vec() }, rg))
    }

    /// Back-propagates from the scalar `loss` into every leaf that requires
    /// a gradient, adding to previously accumulated gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return invalid(format!("backward needs a scalar, got shape {:?}", self.nodes[li].value.shape()));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::InvalidState("loss does not depend on any trainable leaf".into()));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        local[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut local)?;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Vec<f64>, local: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        macro_rules! acc {
            ($j:expr) => {
                slot(local, $j, nodes[$j].value.numel())
            };
        }
        match &nodes[i].op {
            Op::Leaf => {
                let entry = self.grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                entry.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            Op::Conv2d { input, weight, bias, padded, kernel } => {
                let (cin, h, w) = dims3(&nodes[*input].value, "conv2d")?;
                let grid = ConvGrid::new(h, w, *kernel);
                let kk = grid.taps();
                let hw = h * w;
                let cout = g.len() / hw;
                if needs(*bias) {
                    let db = acc!(*bias);
                    for (d, row) in db.iter_mut().zip(g.chunks(hw)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
                let mut gstrip = vec![0.0; cout * grid.len];
                for co in 0..cout {
                    for r in 0..h {
                        let dst = co * grid.len + r * grid.wp;
                        gstrip[dst..dst + w].copy_from_slice(&g[(co * h + r) * w..(co * h + r + 1) * w]);
                    }
                }
                if needs(*weight) {
                    let dw = acc!(*weight);
                    for tap in 0..kk {
                        // dW_tap[cout, cin] += G[cout, len] * X_tap[cin, len]^T
                        gemm(
                            cout,
                            grid.len,
                            cin,
                            (&gstrip, grid.len, 1),
                            (&padded[grid.offset(tap)..], 1, grid.plane),
                            1.0,
                            (&mut dw[tap..], cin * kk, kk),
                        );
                    }
                }
                if needs(*input) {
                    let wdata = nodes[*weight].value.data();
                    let mut dpad = vec![0.0; cin * grid.plane];
                    for tap in 0..kk {
                        // dX_tap[cin, len] += W_tap[cout, cin]^T * G[cout, len]
                        gemm(
                            cin,
                            cout,
                            grid.len,
                            (&wdata[tap..], kk, cin * kk),
                            (&gstrip, grid.len, 1),
                            1.0,
                            (&mut dpad[grid.offset(tap)..], grid.plane, 1),
                        );
                    }
                    let p = grid.k / 2;
                    let dx = acc!(*input);
                    for ci in 0..cin {
                        for r in 0..h {
                            let src = ci * grid.plane + (r + p) * grid.wp + p;
                            let dst = &mut dx[(ci * h + r) * w..(ci * h + r + 1) * w];
                            dst.iter_mut().zip(&dpad[src..src + w]).for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::LeakyRelu { input, slope } => {
                if needs(*input) {
                    let x = nodes[*input].value.data();
                    let dx = acc!(*input);
                    for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(x) {
                        *d += if xv > 0.0 { gv } else { slope * gv };
                    }
                }
            }
            Op::AvgPool2 { input } => {
                if needs(*input) {
                    let (c, h, w) = dims3(&nodes[*input].value, "avg_pool2")?;
                    let (oh, ow) = (h / 2, w / 2);
                    let dx = acc!(*input);
                    for ch in 0..c {
                        for r in 0..oh {
                            for col in 0..ow {
                                let q = 0.25 * g[(ch * oh + r) * ow + col];
                                let base = ch * h * w + 2 * r * w + 2 * col;
                                dx[base] += q;
                                dx[base + 1] += q;
                                dx[base + w] += q;
                                dx[base + w + 1] += q;
                            }
                        }
                    }
                }
            }
            Op::Upsample2 { input } => {
                if needs(*input) {
                    let (c, h, w) = dims3(&nodes[*input].value, "upsample2")?;
                    let (oh, ow) = (2 * h, 2 * w);
                    let dx = acc!(*input);
                    for ch in 0..c {
                        for r in 0..oh {
                            for col in 0..ow {
                                dx[(ch * h + r / 2) * w + col / 2] += g[(ch * oh + r) * ow + col];
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let na = nodes[*a].value.numel();
                if needs(*a) {
                    acc!(*a).iter_mut().zip(&g[..na]).for_each(|(d, s)| *d += s);
                }
                if needs(*b) {
                    acc!(*b).iter_mut().zip(&g[na..]).for_each(|(d, s)| *d += s);
                }
            }
            Op::Add { a, b } => {
                for j in [*a, *b] {
                    if needs(j) {
                        acc!(j).iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    acc!(*a).iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                }
                if needs(*b) {
                    acc!(*b).iter_mut().zip(&g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Scale { input, factor } => {
                if needs(*input) {
                    acc!(*input).iter_mut().zip(&g).for_each(|(d, s)| *d += factor * s);
                }
            }
            Op::SumSquares { input } => {
                if needs(*input) {
                    let x = nodes[*input].value.data();
                    let s = 2.0 * g[0];
                    acc!(*input).iter_mut().zip(x).for_each(|(d, v)| *d += s * v);
                }
            }
            Op::ReflectPad { input } => {
                if needs(*input) {
                    let (c, h, w) = dims3(&nodes[*input].value, "reflect_pad")?;
                    let (_, th, tw) = dims3(&nodes[i].value, "reflect_pad")?;
                    let dx = acc!(*input);
                    for ch in 0..c {
                        for r in 0..th {
                            let sr = reflect(r, h);
                            for col in 0..tw {
                                dx[(ch * h + sr) * w + reflect(col, w)] += g[(ch * th + r) * tw + col];
                            }
                        }
                    }
                }
            }
            Op::Crop { input } => {
                if needs(*input) {
                    let (c, sh, sw) = dims3(&nodes[*input].value, "crop")?;
                    let (_, h, w) = dims3(&nodes[i].value, "crop")?;
                    let dx = acc!(*input);
                    for ch in 0..c {
                        for r in 0..h {
                            let dst = &mut dx[(ch * sh + r) * sw..(ch * sh + r) * sw + w];
                            dst.iter_mut().zip(&g[(ch * h + r) * w..(ch * h + r + 1) * w]).for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::Radon { input, geom, angle_ids } => {
                if needs(*input) {
                    let sino = Sinogram::from_vec(angle_ids.clone(), geom.n_detectors(), g)?;
                    let bp: Image = backproject(&sino, geom)?;
                    acc!(*input).iter_mut().zip(bp.data()).for_each(|(d, s)| *d += s);
                }
            }
        }
        Ok(())
    }
}

fn slot(local: &mut [Option<Vec<f64>>], j: usize, n: usize) -> &mut Vec<f64> {
    local[j].get_or_insert_with(|| vec![0.0; n])
}
