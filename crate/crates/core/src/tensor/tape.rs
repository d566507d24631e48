//! Reverse-mode autodiff on a linear tape.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Ops push a
//! node recording the operation and its inputs and return a [`Var`] handle
//! (an index into the tape). Because inputs always point at earlier nodes,
//! walking the tape backwards is already a reverse topological order, so
//! [`Tape::backward`] is a single reverse sweep that accumulates gradients
//! into per-node buffers. When several consumers feed the same node their
//! contributions sum, which is exactly the multivariate chain rule.
//!
//! Nodes created through [`Tape::constant`] are excluded from gradient
//! propagation: any subgraph that depends only on constants is skipped
//! entirely (the NCC box-filter kernels rely on this).

use super::kernels;
use super::TensorData;
use crate::error::{Error, Result};

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Sqrt(usize),
    LeakyRelu(usize, f64),
    SumAll(usize),
    MeanAll(usize),
    Conv3d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    BoxSum {
        x: usize,
        window: usize,
    },
    MaxPool3d {
        x: usize,
        argmax: Vec<usize>,
    },
    Upsample2x(usize),
    Warp {
        x: usize,
        field: usize,
    },
    ConcatChannels(usize, usize),
    SliceChannels {
        x: usize,
        lo: usize,
    },
    SpatialDiff {
        x: usize,
        axis: usize,
    },
    /// Forward x^2 with a deliberately wrong backward. Exists so tests can
    /// prove the finite-difference checker rejects a bad derivative; never
    /// use it in a real graph.
    CorruptedSquare(usize),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`, if `v` required one and was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records one forward computation and replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that gradients do not flow into.
    pub fn constant(&mut self, t: TensorData) -> Var {
        self.push(t.shape().to_vec(), t.into_data(), false, Op::Leaf)
    }

    /// Trainable input: backward produces a gradient for it.
    pub fn param(&mut self, t: TensorData) -> Var {
        self.push(t.shape().to_vec(), t.into_data(), true, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn to_tensor(&self, v: Var) -> TensorData {
        TensorData::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node is internally consistent")
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims5(&self, v: Var, what: &str) -> Result<[usize; 5]> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 5 {
            return Err(Error::shape(format!(
                "{} expects a rank-5 tensor, got shape {:?}",
                what, s
            )));
        }
        Ok([s[0], s[1], s[2], s[3], s[4]])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(format!(
                "{} needs matching shapes, got {:?} vs {:?}",
                what,
                self.nodes[a.0].shape,
                self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    fn elementwise(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, needs, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Elementwise division. The caller is responsible for keeping the
    /// denominator away from zero (the losses add an epsilon for this).
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x + s).collect();
        let needs = self.needs(a.0);
        self.push(self.nodes[a.0].shape.clone(), data, needs, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * s).collect();
        let needs = self.needs(a.0);
        self.push(self.nodes[a.0].shape.clone(), data, needs, Op::MulScalar(a.0, s))
    }

    /// Elementwise square root; negative inputs are a numerical contract
    /// violation rather than silent NaNs.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].data.iter().any(|&x| x < 0.0) {
            return Err(Error::Numeric(
                "sqrt of a negative value; an epsilon guard is missing upstream".to_string(),
            ));
        }
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.sqrt()).collect();
        let needs = self.needs(a.0);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, needs, Op::Sqrt(a.0)))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let needs = self.needs(a.0);
        self.push(self.nodes[a.0].shape.clone(), data, needs, Op::LeakyRelu(a.0, slope))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a.0);
        self.push(vec![1], vec![s], needs, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a.0);
        self.push(vec![1], vec![s / n], needs, Op::MeanAll(a.0))
    }

    /// Cross-correlation with a cubic odd-sized kernel, zero padding,
    /// differentiable in input, weight and bias.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.dims5(x, "conv3d input")?;
        let ws = self.dims5(w, "conv3d weight")?;
        let bs = &self.nodes[b.0].shape;
        if bs.len() != 1 || bs[0] != ws[0] {
            return Err(Error::shape(format!(
                "conv3d bias must have shape [{}], got {:?}",
                ws[0], bs
            )));
        }
        let os = kernels::conv3d_out_dims(xs, ws, stride, pad)?;
        let needs = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        let out = kernels::conv3d_forward(
            &self.nodes[x.0].data,
            xs,
            &self.nodes[w.0].data,
            ws,
            &self.nodes[b.0].data,
            stride,
            pad,
            os,
        );
        Ok(self.push(
            os.to_vec(),
            out,
            needs,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
        ))
    }

    /// Sum over the cubic `window` around each voxel, clipped at the border.
    /// Same values as conv3d with an all-ones kernel and `pad = window/2`,
    /// but computed separably; the window size does not affect cost.
    pub fn box_sum(&mut self, x: Var, window: usize) -> Result<Var> {
        let xs = self.dims5(x, "box_sum input")?;
        if window == 0 || window % 2 == 0 {
            return Err(Error::shape(format!(
                "box_sum window must be odd and positive, got {}",
                window
            )));
        }
        let out = kernels::box_sum_forward(&self.nodes[x.0].data, xs, window);
        let needs = self.needs(x.0);
        Ok(self.push(xs.to_vec(), out, needs, Op::BoxSum { x: x.0, window }))
    }

    /// 2x2x2 max pooling with stride 2; ties pick the first element in scan
    /// order and backward routes the gradient only there.
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let xs = self.dims5(x, "maxpool3d")?;
        let (out, argmax, os) = kernels::maxpool3d_forward(&self.nodes[x.0].data, xs)?;
        let needs = self.needs(x.0);
        Ok(self.push(os.to_vec(), out, needs, Op::MaxPool3d { x: x.0, argmax }))
    }

    /// Trilinear 2x upsampling, align-corners-false.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.dims5(x, "upsample2x")?;
        let (out, os) = kernels::upsample2x_forward(&self.nodes[x.0].data, xs);
        let needs = self.needs(x.0);
        Ok(self.push(os.to_vec(), out, needs, Op::Upsample2x(x.0)))
    }

    /// Trilinear resampling of `x` at voxel + displacement, clamped at the
    /// border. `field` is `[B,3,D,H,W]` with (depth, height, width)
    /// components in voxels. Differentiable in both arguments.
    pub fn warp(&mut self, x: Var, field: Var) -> Result<Var> {
        let xs = self.dims5(x, "warp input")?;
        let fs = self.dims5(field, "warp field")?;
        kernels::warp_check_shapes(xs, fs)?;
        let out = kernels::warp_forward(&self.nodes[x.0].data, xs, &self.nodes[field.0].data);
        let needs = self.needs(x.0) || self.needs(field.0);
        Ok(self.push(
            xs.to_vec(),
            out,
            needs,
            Op::Warp {
                x: x.0,
                field: field.0,
            },
        ))
    }

    /// Stack `a` and `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let asz = self.dims5(a, "concat_channels")?;
        let bsz = self.dims5(b, "concat_channels")?;
        if asz[0] != bsz[0] || asz[2..] != bsz[2..] {
            return Err(Error::shape(format!(
                "concat_channels needs matching batch and grid, got {:?} vs {:?}",
                asz, bsz
            )));
        }
        let (batch, ca, cb) = (asz[0], asz[1], bsz[1]);
        let sp = asz[2] * asz[3] * asz[4];
        let mut data = Vec::with_capacity((ca + cb) * batch * sp);
        for bi in 0..batch {
            data.extend_from_slice(&self.nodes[a.0].data[bi * ca * sp..][..ca * sp]);
            data.extend_from_slice(&self.nodes[b.0].data[bi * cb * sp..][..cb * sp]);
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(
            vec![batch, ca + cb, asz[2], asz[3], asz[4]],
            data,
            needs,
            Op::ConcatChannels(a.0, b.0),
        ))
    }

    /// Fold a list of tensors into one channel concatenation; a single
    /// input is returned unchanged.
    pub fn concat_many(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::shape("concat_many needs at least one input".to_string()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.concat_channels(acc, v)?;
        }
        Ok(acc)
    }

    /// Channels `lo..hi` of `x` (half-open).
    pub fn slice_channels(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let xs = self.dims5(x, "slice_channels")?;
        if lo >= hi || hi > xs[1] {
            return Err(Error::shape(format!(
                "slice_channels range {}..{} invalid for {} channels",
                lo, hi, xs[1]
            )));
        }
        let sp = xs[2] * xs[3] * xs[4];
        let c = hi - lo;
        let mut data = Vec::with_capacity(xs[0] * c * sp);
        for bi in 0..xs[0] {
            data.extend_from_slice(&self.nodes[x.0].data[(bi * xs[1] + lo) * sp..][..c * sp]);
        }
        let needs = self.needs(x.0);
        Ok(self.push(
            vec![xs[0], c, xs[2], xs[3], xs[4]],
            data,
            needs,
            Op::SliceChannels { x: x.0, lo },
        ))
    }

    /// Forward difference along a spatial axis (0 = depth, 1 = height,
    /// 2 = width); the last slice along the axis is zero, so the output
    /// keeps the input shape.
    pub fn spatial_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.dims5(x, "spatial_diff")?;
        if axis > 2 {
            return Err(Error::shape(format!(
                "spatial_diff axis must be 0, 1 or 2, got {}",
                axis
            )));
        }
        let [bsz, c, d, h, w] = xs;
        let sp = d * h * w;
        let (ext, st) = match axis {
            0 => (d, h * w),
            1 => (h, w),
            _ => (w, 1),
        };
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; xd.len()];
        for bc in 0..bsz * c {
            let base = bc * sp;
            for id in 0..d {
                for ih in 0..h {
                    let row = base + (id * h + ih) * w;
                    for iw in 0..w {
                        let ia = [id, ih, iw][axis];
                        if ia + 1 < ext {
                            data[row + iw] = xd[row + iw + st] - xd[row + iw];
                        }
                    }
                }
            }
        }
        let needs = self.needs(x.0);
        Ok(self.push(xs.to_vec(), data, needs, Op::SpatialDiff { x: x.0, axis }))
    }

    /// See [`Op::CorruptedSquare`]: a checker self-test, not a real op.
    #[doc(hidden)]
    pub fn corrupted_square(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * x).collect();
        let needs = self.needs(a.0);
        self.push(self.nodes[a.0].shape.clone(), data, needs, Op::CorruptedSquare(a.0))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient buffer per
    /// reachable node that was created with [`Tape::param`] (or depends on
    /// one); everything else is skipped.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.needs_grad {
            return Err(Error::Contract(
                "loss does not depend on any differentiable input".to_string(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.dispatch(i, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn dispatch(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ensure = |grads: &mut [Option<Vec<f64>>], idx: usize, numel: usize| -> () {
            if grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; numel]);
            }
        };
        macro_rules! buf {
            ($grads:expr, $idx:expr) => {{
                ensure($grads, $idx, self.nodes[$idx].data.len());
                $grads[$idx].as_mut().unwrap()
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled in backward()"),
            Op::Add(a, b) => {
                if self.needs(*a) {
                    for (ga, gv) in buf!(grads, *a).iter_mut().zip(g) {
                        *ga += gv;
                    }
                }
                if self.needs(*b) {
                    for (gb, gv) in buf!(grads, *b).iter_mut().zip(g) {
                        *gb += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    for (ga, gv) in buf!(grads, *a).iter_mut().zip(g) {
                        *ga += gv;
                    }
                }
                if self.needs(*b) {
                    for (gb, gv) in buf!(grads, *b).iter_mut().zip(g) {
                        *gb -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = &self.nodes[*b].data;
                    let ga = buf!(grads, *a);
                    for k in 0..g.len() {
                        ga[k] += g[k] * bd[k];
                    }
                }
                if self.needs(*b) {
                    let ad = &self.nodes[*a].data;
                    let gb = buf!(grads, *b);
                    for k in 0..g.len() {
                        gb[k] += g[k] * ad[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let bd = &self.nodes[*b].data;
                if self.needs(*a) {
                    let ga = buf!(grads, *a);
                    for k in 0..g.len() {
                        ga[k] += g[k] / bd[k];
                    }
                }
                if self.needs(*b) {
                    let out = &self.nodes[i].data;
                    let gb = buf!(grads, *b);
                    for k in 0..g.len() {
                        gb[k] -= g[k] * out[k] / bd[k];
                    }
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    for (ga, gv) in buf!(grads, *a).iter_mut().zip(g) {
                        *ga += gv;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                if self.needs(*a) {
                    let s = *s;
                    for (ga, gv) in buf!(grads, *a).iter_mut().zip(g) {
                        *ga += s * gv;
                    }
                }
            }
            Op::Sqrt(a) => {
                if self.needs(*a) {
                    let out = &self.nodes[i].data;
                    let ga = buf!(grads, *a);
                    for k in 0..g.len() {
                        ga[k] += g[k] * 0.5 / out[k];
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.needs(*a) {
                    let xd = &self.nodes[*a].data;
                    let slope = *slope;
                    let ga = buf!(grads, *a);
                    for k in 0..g.len() {
                        ga[k] += g[k] * if xd[k] >= 0.0 { 1.0 } else { slope };
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let gv = g[0];
                    for ga in buf!(grads, *a).iter_mut() {
                        *ga += gv;
                    }
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let gv = g[0] / self.nodes[*a].data.len() as f64;
                    for ga in buf!(grads, *a).iter_mut() {
                        *ga += gv;
                    }
                }
            }
            Op::Conv3d { x, w, b, stride, pad } => {
                let os = shape5(&self.nodes[i].shape);
                let xs = shape5(&self.nodes[*x].shape);
                let ws = shape5(&self.nodes[*w].shape);
                if self.needs(*x) {
                    ensure(grads, *x, self.nodes[*x].data.len());
                    let gx = grads[*x].as_mut().unwrap();
                    kernels::conv3d_backward_input(g, os, &self.nodes[*w].data, ws, xs, *stride, *pad, gx);
                }
                if self.needs(*w) {
                    ensure(grads, *w, self.nodes[*w].data.len());
                    let gw = grads[*w].as_mut().unwrap();
                    kernels::conv3d_backward_weight(g, os, &self.nodes[*x].data, xs, ws, *stride, *pad, gw);
                }
                if self.needs(*b) {
                    ensure(grads, *b, self.nodes[*b].data.len());
                    let gb = grads[*b].as_mut().unwrap();
                    kernels::conv3d_backward_bias(g, os, gb);
                }
            }
            Op::BoxSum { x, window } => {
                if self.needs(*x) {
                    // The clipped box window is symmetric, so the adjoint is
                    // the same box sum applied to the cotangent.
                    let xs = shape5(&self.nodes[*x].shape);
                    let gsum = kernels::box_sum_forward(g, xs, *window);
                    let gx = buf!(grads, *x);
                    for (gv, s) in gx.iter_mut().zip(&gsum) {
                        *gv += s;
                    }
                }
            }
            Op::MaxPool3d { x, argmax } => {
                if self.needs(*x) {
                    kernels::maxpool3d_backward(g, argmax, buf!(grads, *x));
                }
            }
            Op::Upsample2x(x) => {
                if self.needs(*x) {
                    let xs = shape5(&self.nodes[*x].shape);
                    kernels::upsample2x_backward(g, xs, buf!(grads, *x));
                }
            }
            Op::Warp { x, field } => {
                let xs = shape5(&self.nodes[*x].shape);
                let (nx, nf) = (self.needs(*x), self.needs(*field));
                if nx {
                    ensure(grads, *x, self.nodes[*x].data.len());
                }
                if nf {
                    ensure(grads, *field, self.nodes[*field].data.len());
                }
                if nx && nf && *x != *field {
                    // Split the borrows: take the x buffer out, write both,
                    // put it back.
                    let mut gx = grads[*x].take().unwrap();
                    let gf = grads[*field].as_mut().unwrap();
                    kernels::warp_backward(
                        g,
                        &self.nodes[*x].data,
                        xs,
                        &self.nodes[*field].data,
                        Some(&mut gx),
                        Some(gf),
                    );
                    grads[*x] = Some(gx);
                } else if nx && nf {
                    let gb = grads[*x].as_mut().unwrap();
                    // x and field are the same node (degenerate but legal):
                    // run the two halves sequentially into one buffer.
                    kernels::warp_backward(
                        g,
                        &self.nodes[*x].data,
                        xs,
                        &self.nodes[*field].data,
                        Some(gb),
                        None,
                    );
                    let gb = grads[*x].as_mut().unwrap();
                    kernels::warp_backward(
                        g,
                        &self.nodes[*x].data,
                        xs,
                        &self.nodes[*field].data,
                        None,
                        Some(gb),
                    );
                } else if nx {
                    kernels::warp_backward(
                        g,
                        &self.nodes[*x].data,
                        xs,
                        &self.nodes[*field].data,
                        Some(buf!(grads, *x)),
                        None,
                    );
                } else if nf {
                    kernels::warp_backward(
                        g,
                        &self.nodes[*x].data,
                        xs,
                        &self.nodes[*field].data,
                        None,
                        Some(buf!(grads, *field)),
                    );
                }
            }
            Op::ConcatChannels(a, b) => {
                let asz = shape5(&self.nodes[*a].shape);
                let bsz = shape5(&self.nodes[*b].shape);
                let sp = asz[2] * asz[3] * asz[4];
                let (ca, cb) = (asz[1], bsz[1]);
                if self.needs(*a) {
                    let ga = buf!(grads, *a);
                    for bi in 0..asz[0] {
                        let src = &g[bi * (ca + cb) * sp..][..ca * sp];
                        let dst = &mut ga[bi * ca * sp..][..ca * sp];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = buf!(grads, *b);
                    for bi in 0..asz[0] {
                        let src = &g[(bi * (ca + cb) + ca) * sp..][..cb * sp];
                        let dst = &mut gb[bi * cb * sp..][..cb * sp];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceChannels { x, lo } => {
                if self.needs(*x) {
                    let xs = shape5(&self.nodes[*x].shape);
                    let os = shape5(&self.nodes[i].shape);
                    let sp = xs[2] * xs[3] * xs[4];
                    let c = os[1];
                    let gx = buf!(grads, *x);
                    for bi in 0..xs[0] {
                        let src = &g[bi * c * sp..][..c * sp];
                        let dst = &mut gx[(bi * xs[1] + lo) * sp..][..c * sp];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SpatialDiff { x, axis } => {
                if self.needs(*x) {
                    let [bsz, c, d, h, w] = shape5(&self.nodes[*x].shape);
                    let sp = d * h * w;
                    let (ext, st) = match axis {
                        0 => (d, h * w),
                        1 => (h, w),
                        _ => (w, 1),
                    };
                    let gx = buf!(grads, *x);
                    for bc in 0..bsz * c {
                        let base = bc * sp;
                        for id in 0..d {
                            for ih in 0..h {
                                let row = base + (id * h + ih) * w;
                                for iw in 0..w {
                                    let ia = [id, ih, iw][*axis];
                                    if ia + 1 < ext {
                                        let gv = g[row + iw];
                                        gx[row + iw + st] += gv;
                                        gx[row + iw] -= gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::CorruptedSquare(a) => {
                if self.needs(*a) {
                    let xd = &self.nodes[*a].data;
                    let ga = buf!(grads, *a);
                    for k in 0..g.len() {
                        // Correct would be 2x; the +0.3 is the planted fault.
                        ga[k] += g[k] * (2.0 * xd[k] + 0.3);
                    }
                }
            }
        }
    }
}

fn shape5(s: &[usize]) -> [usize; 5] {
    [s[0], s[1], s[2], s[3], s[4]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_tape() -> (Tape, Var) {
        let mut t = Tape::new();
        let x = t.param(TensorData::new(vec![1, 1, 1, 1, 2], vec![1.5, -2.0]).unwrap());
        (t, x)
    }

    #[test]
    fn add_and_mul_accumulate_fan_out() {
        // y = sum(x*x + x) -> dy/dx = 2x + 1
        let (mut t, x) = scalar_tape();
        let sq = t.mul(x, x).unwrap();
        let s = t.add(sq, x).unwrap();
        let y = t.sum_all(s);
        let g = t.backward(y).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx, &[2.0 * 1.5 + 1.0, 2.0 * -2.0 + 1.0]);
    }

    #[test]
    fn constants_are_pruned() {
        let mut t = Tape::new();
        let x = t.param(TensorData::new(vec![1, 1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let c = t.constant(TensorData::new(vec![1, 1, 1, 1, 2], vec![3.0, 4.0]).unwrap());
        let y = t.mul(x, c).unwrap();
        let s = t.sum_all(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (mut t, x) = scalar_tape();
        let y = t.mul(x, x).unwrap();
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn leaky_relu_slope_on_negative_side() {
        let (mut t, x) = scalar_tape();
        let y = t.leaky_relu(x, 0.1);
        let s = t.sum_all(y);
        assert_eq!(t.data(y), &[1.5, -0.2]);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.1]);
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let mut t = Tape::new();
        let a = t.param(TensorData::new(vec![1, 2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.param(TensorData::new(vec![1, 1, 1, 1, 2], vec![5.0, 6.0]).unwrap());
        let cat = t.concat_channels(a, b).unwrap();
        assert_eq!(t.shape(cat), &[1, 3, 1, 1, 2]);
        assert_eq!(t.data(cat), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = t.slice_channels(cat, 2, 3).unwrap();
        assert_eq!(t.data(back), &[5.0, 6.0]);
        let s = t.sum_all(back);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.get(a).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn spatial_diff_zero_at_far_edge() {
        let mut t = Tape::new();
        let x = t.param(TensorData::new(vec![1, 1, 1, 1, 3], vec![1.0, 4.0, 9.0]).unwrap());
        let dx = t.spatial_diff(x, 2).unwrap();
        assert_eq!(t.data(dx), &[3.0, 5.0, 0.0]);
        let s = t.sum_all(dx);
        let g = t.backward(s).unwrap();
        // d/dx of (x1-x0) + (x2-x1): [-1, 0, 1]
        assert_eq!(g.get(x).unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let mut t = Tape::new();
        let x = t.param(TensorData::new(vec![1, 1, 2, 2, 2], vec![7.0; 8]).unwrap());
        let y = t.maxpool3d(x).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1, 1]);
        assert_eq!(t.data(y), &[7.0]);
        let s = t.sum_all(y);
        let g = t.backward(s).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx[0], 1.0);
        assert!(gx[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_with_zero_field_is_identity() {
        let mut t = Tape::new();
        let vals: Vec<f64> = (0..27).map(|i| (i as f64).sin()).collect();
        let x = t.param(TensorData::new(vec![1, 1, 3, 3, 3], vals.clone()).unwrap());
        let f = t.constant(TensorData::zeros(&[1, 3, 3, 3, 3]));
        let y = t.warp(x, f).unwrap();
        assert_eq!(t.data(y), vals.as_slice());
    }

    #[test]
    fn upsample_preserves_mean() {
        let mut t = Tape::new();
        let vals: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).cos()).collect();
        let x = t.param(TensorData::new(vec![1, 1, 4, 4, 4], vals.clone()).unwrap());
        let y = t.upsample2x(x).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 8, 8, 8]);
        let mean_in: f64 = vals.iter().sum::<f64>() / 64.0;
        let mean_out: f64 = t.data(y).iter().sum::<f64>() / 512.0;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn conv3d_shape_errors() {
        let mut t = Tape::new();
        let x = t.param(TensorData::zeros(&[1, 2, 4, 4, 4]));
        let w = t.param(TensorData::zeros(&[3, 1, 3, 3, 3])); // wrong cin
        let b = t.param(TensorData::zeros(&[3]));
        assert!(t.conv3d(x, w, b, 1, 1).is_err());
        let w2 = t.param(TensorData::zeros(&[3, 2, 2, 2, 2])); // even kernel
        assert!(t.conv3d(x, w2, b, 1, 1).is_err());
    }

    #[test]
    fn sqrt_rejects_negative() {
        let (mut t, x) = scalar_tape(); // contains -2.0
        assert!(matches!(t.sqrt(x), Err(crate::error::Error::Numeric(_))));
    }
}
