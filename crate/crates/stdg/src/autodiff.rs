//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! The operator set is exactly what the detection/relation model needs:
//! strided 2-d cross-correlation, deformable convolution with learned
//! per-location sampling offsets, relu, sigmoid, channel slicing, masked
//! mean-squared error and a handful of scalar combinators.
//!
//! A forward pass appends nodes to a [`Tape`]; because every operation only
//! references earlier nodes, tape order is a topological order and
//! [`Tape::backward`] is a single reverse sweep. Each backward call runs on
//! fresh scratch adjoints and then adds them into the persistent gradient
//! accumulators, so repeated calls without [`Tape::zero_grad`] accumulate.
//!
//! All math is in f64 and every loop runs in a fixed order, so gradients are
//! bit-for-bit reproducible across runs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-location sampling displacements for one deformable layer.
///
/// `values` has shape `[2K, H, W]` where `K = k*k` is the kernel sample
/// count; channel `2m` holds dy and channel `2m+1` holds dx for kernel
/// sample `m` (row-major over the k×k kernel), in feature-grid cells.
/// An all-zeros field reduces deformable convolution to standard
/// convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub values: Tensor,
    pub kernel: usize,
}

impl OffsetField {
    pub fn new(values: Tensor, kernel: usize) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape_mismatch(
                "offset field",
                &[2 * kernel * kernel, 0, 0],
                values.shape(),
            ));
        }
        if values.shape()[0] != 2 * kernel * kernel {
            return Err(Error::InvalidArgument(format!(
                "offset field for a {k}x{k} kernel needs {} channels, got {}",
                2 * kernel * kernel,
                values.shape()[0],
                k = kernel
            )));
        }
        Ok(OffsetField { values, kernel })
    }

    pub fn zeros(kernel: usize, h: usize, w: usize) -> Self {
        OffsetField {
            values: Tensor::zeros(&[2 * kernel * kernel, h, w]),
            kernel,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    Conv2d {
        input: Var,
        weights: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    DeformConv2d {
        input: Var,
        weights: Var,
        offsets: Var,
    },
    Mse {
        a: Var,
        b: Var,
        mask: Option<Tensor>,
        count: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// Records a computation graph and runs reverse-mode differentiation on it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn grad(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].grad
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        debug_assert!(self.nodes[var.0].value.is_scalar());
        self.nodes[var.0].value.data()[0]
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape_mismatch("add", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Multiply by a compile-time constant (not differentiated through).
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x * factor).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        self.push(out, Op::Scale(a, factor))
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        self.push(out, Op::Relu(a))
    }

    /// Elementwise logistic squashing to (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        self.push(out, Op::Sigmoid(a))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// View of channels `start..start+len` of a rank-3 tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[input.0].value;
        if v.rank() != 3 {
            return Err(Error::InvalidArgument(format!(
                "slice_channels expects rank 3, got shape {:?}",
                v.shape()
            )));
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        if start + len > c {
            return Err(Error::InvalidArgument(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let data = v.data()[start * plane..(start + len) * plane].to_vec();
        let out = Tensor::from_vec(&[len, h, w], data)?;
        Ok(self.push(out, Op::SliceChannels { input, start }))
    }

    /// Mean squared error between `a` and `b`, optionally restricted to the
    /// elements where `mask` is 1. An empty selection yields exactly 0.
    pub fn mse(&mut self, a: Var, b: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape_mismatch("mse", va.shape(), vb.shape()));
        }
        if let Some(m) = mask {
            if m.shape() != va.shape() {
                return Err(Error::shape_mismatch("mse mask", va.shape(), m.shape()));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(
                    "mse mask must contain only 0 and 1".into(),
                ));
            }
        }
        let count = match mask {
            Some(m) => m.data().iter().sum::<f64>(),
            None => va.len() as f64,
        };
        let value = if count == 0.0 {
            0.0
        } else {
            let mut acc = 0.0;
            match mask {
                Some(m) => {
                    for ((x, y), w) in va.data().iter().zip(vb.data()).zip(m.data()) {
                        let d = x - y;
                        acc += w * d * d;
                    }
                }
                None => {
                    for (x, y) in va.data().iter().zip(vb.data()) {
                        let d = x - y;
                        acc += d * d;
                    }
                }
            }
            acc / count
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::Mse {
                a,
                b,
                mask: mask.cloned(),
                count,
            },
        ))
    }

    /// Standard strided cross-correlation with zero padding.
    ///
    /// `input` is `[Cin, H, W]`, `weights` `[Cout, Cin, k, k]` with odd `k`,
    /// `bias` `[Cout]`. Output is `[Cout, H', W']` with
    /// `H' = (H + 2*padding - k)/stride + 1`, which must be integral.
    pub fn conv2d(
        &mut self,
        input: Var,
        weights: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (vi, vw, vb) = (
            &self.nodes[input.0].value,
            &self.nodes[weights.0].value,
            &self.nodes[bias.0].value,
        );
        let (cin, h, w, cout, k) = check_conv_shapes(vi, vw, vb)?;
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if (h + 2 * padding) < k || (w + 2 * padding) < k {
            return Err(Error::InvalidArgument(format!(
                "kernel {k} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if (h + 2 * padding - k) % stride != 0 || (w + 2 * padding - k) % stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d geometry not integral: input {h}x{w}, kernel {k}, stride {stride}, padding {padding}"
            )));
        }
        let hout = (h + 2 * padding - k) / stride + 1;
        let wout = (w + 2 * padding - k) / stride + 1;

        let mut out = Tensor::zeros(&[cout, hout, wout]);
        {
            let ov = out.data_mut();
            for co in 0..cout {
                let b = vb.data()[co];
                ov[co * hout * wout..(co + 1) * hout * wout].fill(b);
            }
            let id = vi.data();
            let wd = vw.data();
            for co in 0..cout {
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wd[((co * cin + ci) * k + ky) * k + kx];
                            accumulate_conv_row(
                                ov, id, wv, co, ci, ky, kx, h, w, hout, wout, stride, padding,
                            );
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Deformable convolution: each kernel sample point is displaced by its
    /// learned (dy, dx) offset and the input is read through bilinear
    /// interpolation; out-of-bounds reads contribute zero.
    ///
    /// Runs at stride 1 with same padding `(k-1)/2`, so the output grid (and
    /// the offset grid) matches the input spatial dims. Differentiable with
    /// respect to input, weights and offsets.
    pub fn deform_conv2d(&mut self, input: Var, weights: Var, offsets: Var) -> Result<Var> {
        let (vi, vw, vo) = (
            &self.nodes[input.0].value,
            &self.nodes[weights.0].value,
            &self.nodes[offsets.0].value,
        );
        let (cin, h, w, cout, k) = check_deform_shapes(vi, vw, vo)?;
        let kk = k * k;
        let pad = (k - 1) / 2;

        // im2col-style buffer of bilinearly sampled inputs: [Cin*K, H*W].
        let mut col = vec![0.0; cin * kk * h * w];
        let id = vi.data();
        let od = vo.data();
        let plane = h * w;
        for m in 0..kk {
            let (ky, kx) = (m / k, m % k);
            for oh in 0..h {
                for ow in 0..w {
                    let cell = oh * w + ow;
                    let dy = od[(2 * m) * plane + cell];
                    let dx = od[(2 * m + 1) * plane + cell];
                    let y = oh as f64 - pad as f64 + ky as f64 + dy;
                    let x = ow as f64 - pad as f64 + kx as f64 + dx;
                    let s = BilinearSample::at(y, x, h, w);
                    for ci in 0..cin {
                        col[(ci * kk + m) * plane + cell] = s.read(&id[ci * plane..(ci + 1) * plane], w);
                    }
                }
            }
        }

        let mut out = Tensor::zeros(&[cout, h, w]);
        {
            let ov = out.data_mut();
            let wd = vw.data();
            for co in 0..cout {
                let orow = &mut ov[co * plane..(co + 1) * plane];
                for cik in 0..cin * kk {
                    let wv = wd[co * cin * kk + cik];
                    let crow = &col[cik * plane..(cik + 1) * plane];
                    for (o, c) in orow.iter_mut().zip(crow) {
                        *o += wv * c;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::DeformConv2d {
                input,
                weights,
                offsets,
            },
        ))
    }

    /// Reverse sweep from a scalar root. Scratch adjoints are seeded with 1
    /// at the root and folded into the persistent gradient accumulators, so
    /// calling twice without [`Tape::zero_grad`] doubles every gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut adj: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        adj[root.0].data_mut()[0] = 1.0;

        for idx in (0..=root.0).rev() {
            // Split scratch storage so the node's own adjoint can be read
            // while earlier adjoints are written.
            let (head, tail) = adj.split_at_mut(idx);
            let go = &tail[0];
            if go.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    add_into(&mut head[a.0], go.data());
                    add_into(&mut head[b.0], go.data());
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    for (g, o) in head[a.0].data_mut().iter_mut().zip(go.data()) {
                        *g += f * o;
                    }
                }
                Op::Relu(a) => {
                    let xv = &self.nodes[a.0].value;
                    for ((g, x), o) in head[a.0]
                        .data_mut()
                        .iter_mut()
                        .zip(xv.data())
                        .zip(go.data())
                    {
                        if *x > 0.0 {
                            *g += o;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let yv = &self.nodes[idx].value;
                    for ((g, y), o) in head[a.0]
                        .data_mut()
                        .iter_mut()
                        .zip(yv.data())
                        .zip(go.data())
                    {
                        *g += o * y * (1.0 - y);
                    }
                }
                Op::Sum(a) => {
                    let o = go.data()[0];
                    for g in head[a.0].data_mut() {
                        *g += o;
                    }
                }
                Op::SliceChannels { input, start } => {
                    let out_shape = self.nodes[idx].value.shape().to_vec();
                    let plane = out_shape[1] * out_shape[2];
                    let offset = start * plane;
                    let gi = head[input.0].data_mut();
                    for (i, o) in go.data().iter().enumerate() {
                        gi[offset + i] += o;
                    }
                }
                Op::Conv2d {
                    input,
                    weights,
                    bias,
                    stride,
                    padding,
                } => {
                    let (input, weights, bias, stride, padding) =
                        (*input, *weights, *bias, *stride, *padding);
                    self.backward_conv2d(head, go, input, weights, bias, stride, padding);
                }
                Op::DeformConv2d {
                    input,
                    weights,
                    offsets,
                } => {
                    let (input, weights, offsets) = (*input, *weights, *offsets);
                    self.backward_deform(head, go, input, weights, offsets);
                }
                Op::Mse { a, b, mask, count } => {
                    if *count > 0.0 {
                        let o = go.data()[0];
                        let f = 2.0 * o / count;
                        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                        let (a, b) = (*a, *b);
                        match mask {
                            Some(m) => {
                                for i in 0..av.len() {
                                    let d = f * m.data()[i] * (av.data()[i] - bv.data()[i]);
                                    head[a.0].data_mut()[i] += d;
                                    head[b.0].data_mut()[i] -= d;
                                }
                            }
                            None => {
                                for i in 0..av.len() {
                                    let d = f * (av.data()[i] - bv.data()[i]);
                                    head[a.0].data_mut()[i] += d;
                                    head[b.0].data_mut()[i] -= d;
                                }
                            }
                        }
                    }
                }
            }
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            add_into(&mut node.grad, a.data());
        }
        Ok(())
    }

    fn backward_conv2d(
        &self,
        adj: &mut [Tensor],
        go: &Tensor,
        input: Var,
        weights: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) {
        let vi = &self.nodes[input.0].value;
        let vw = &self.nodes[weights.0].value;
        let (cin, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
        let (cout, k) = (vw.shape()[0], vw.shape()[2]);
        let (hout, wout) = (go.shape()[1], go.shape()[2]);
        let god = go.data();
        let id = vi.data();
        let wd = vw.data();

        // Bias gradient: per-channel sum of the output adjoint.
        for co in 0..cout {
            let s: f64 = god[co * hout * wout..(co + 1) * hout * wout].iter().sum();
            adj[bias.0].data_mut()[co] += s;
        }

        for co in 0..cout {
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = wd[widx];
                        let mut wgrad = 0.0;
                        let (lo, hi) = valid_out_range(kx, padding, stride, w, wout);
                        if lo > hi {
                            continue;
                        }
                        for oh in 0..hout {
                            let ih = oh * stride + ky;
                            if ih < padding || ih - padding >= h {
                                continue;
                            }
                            let ih = ih - padding;
                            let grow = &god[(co * hout + oh) * wout..(co * hout + oh + 1) * wout];
                            let ibase = (ci * h + ih) * w;
                            let gibase = adj[input.0].data_mut();
                            for ow in lo..=hi {
                                let iw = ow * stride + kx - padding;
                                let g = grow[ow];
                                wgrad += g * id[ibase + iw];
                                gibase[ibase + iw] += g * wv;
                            }
                        }
                        adj[weights.0].data_mut()[widx] += wgrad;
                    }
                }
            }
        }
    }

    fn backward_deform(
        &self,
        adj: &mut [Tensor],
        go: &Tensor,
        input: Var,
        weights: Var,
        offsets: Var,
    ) {
        let vi = &self.nodes[input.0].value;
        let vw = &self.nodes[weights.0].value;
        let vo = &self.nodes[offsets.0].value;
        let (cin, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
        let (cout, k) = (vw.shape()[0], vw.shape()[2]);
        let kk = k * k;
        let pad = (k - 1) / 2;
        let plane = h * w;
        let id = vi.data();
        let wd = vw.data();
        let od = vo.data();
        let god = go.data();

        // Rebuild the sampled-input buffer and keep the sample descriptors:
        // the weight gradient is go x col^T, the column gradient is W^T x go.
        let mut col = vec![0.0; cin * kk * plane];
        let mut samples = Vec::with_capacity(kk * plane);
        for m in 0..kk {
            let (ky, kx) = (m / k, m % k);
            for oh in 0..h {
                for ow in 0..w {
                    let cell = oh * w + ow;
                    let dy = od[(2 * m) * plane + cell];
                    let dx = od[(2 * m + 1) * plane + cell];
                    let y = oh as f64 - pad as f64 + ky as f64 + dy;
                    let x = ow as f64 - pad as f64 + kx as f64 + dx;
                    let s = BilinearSample::at(y, x, h, w);
                    for ci in 0..cin {
                        col[(ci * kk + m) * plane + cell] =
                            s.read(&id[ci * plane..(ci + 1) * plane], w);
                    }
                    samples.push(s);
                }
            }
        }

        {
            let gw = adj[weights.0].data_mut();
            for co in 0..cout {
                let grow = &god[co * plane..(co + 1) * plane];
                for cik in 0..cin * kk {
                    let crow = &col[cik * plane..(cik + 1) * plane];
                    let mut acc = 0.0;
                    for (g, c) in grow.iter().zip(crow) {
                        acc += g * c;
                    }
                    gw[co * cin * kk + cik] += acc;
                }
            }
        }

        let mut dcol = vec![0.0; cin * kk * plane];
        for co in 0..cout {
            let grow = &god[co * plane..(co + 1) * plane];
            for cik in 0..cin * kk {
                let wv = wd[co * cin * kk + cik];
                if wv == 0.0 {
                    continue;
                }
                let drow = &mut dcol[cik * plane..(cik + 1) * plane];
                for (d, g) in drow.iter_mut().zip(grow) {
                    *d += wv * g;
                }
            }
        }

        for m in 0..kk {
            for cell in 0..plane {
                let s = samples[m * plane + cell];
                let mut gy = 0.0;
                let mut gx = 0.0;
                for ci in 0..cin {
                    let dval = dcol[(ci * kk + m) * plane + cell];
                    if dval == 0.0 {
                        continue;
                    }
                    let chan = &id[ci * plane..(ci + 1) * plane];
                    let (dy_contrib, dx_contrib) = s.position_grads(chan, w);
                    gy += dval * dy_contrib;
                    gx += dval * dx_contrib;
                    let gi = adj[input.0].data_mut();
                    s.scatter(&mut gi[ci * plane..(ci + 1) * plane], w, dval);
                }
                let goff = adj[offsets.0].data_mut();
                goff[(2 * m) * plane + cell] += gy;
                goff[(2 * m + 1) * plane + cell] += gx;
            }
        }
    }
}

fn add_into(dst: &mut Tensor, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

fn check_conv_shapes(vi: &Tensor, vw: &Tensor, vb: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    if vi.rank() != 3 || vw.rank() != 4 || vb.rank() != 1 {
        return Err(Error::InvalidArgument(format!(
            "conv2d expects input rank 3, weights rank 4, bias rank 1; got {:?}, {:?}, {:?}",
            vi.shape(),
            vw.shape(),
            vb.shape()
        )));
    }
    let (cin, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
    let (cout, wcin, k, k2) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
    if k != k2 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernel must be square with odd side, got {k}x{k2}"
        )));
    }
    if wcin != cin {
        return Err(Error::shape_mismatch("conv2d weights vs input", &[cout, cin, k, k], vw.shape()));
    }
    if vb.shape()[0] != cout {
        return Err(Error::shape_mismatch("conv2d bias", &[cout], vb.shape()));
    }
    Ok((cin, h, w, cout, k))
}

fn check_deform_shapes(vi: &Tensor, vw: &Tensor, vo: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    if vi.rank() != 3 || vw.rank() != 4 || vo.rank() != 3 {
        return Err(Error::InvalidArgument(format!(
            "deform_conv2d expects input rank 3, weights rank 4, offsets rank 3; got {:?}, {:?}, {:?}",
            vi.shape(),
            vw.shape(),
            vo.shape()
        )));
    }
    let (cin, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
    let (cout, wcin, k, k2) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
    if k != k2 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "deform_conv2d kernel must be square with odd side, got {k}x{k2}"
        )));
    }
    if wcin != cin {
        return Err(Error::shape_mismatch(
            "deform_conv2d weights vs input",
            &[cout, cin, k, k],
            vw.shape(),
        ));
    }
    if vo.shape()[0] != 2 * k * k {
        return Err(Error::InvalidArgument(format!(
            "deform_conv2d offsets need {} channels for a {k}x{k} kernel, got {}",
            2 * k * k,
            vo.shape()[0]
        )));
    }
    if vo.shape()[1] != h || vo.shape()[2] != w {
        return Err(Error::shape_mismatch(
            "deform_conv2d offsets vs output grid",
            &[2 * k * k, h, w],
            vo.shape(),
        ));
    }
    Ok((cin, h, w, cout, k))
}

#[inline]
fn valid_out_range(kx: usize, padding: usize, stride: usize, input_dim: usize, out_dim: usize) -> (usize, usize) {
    // Output positions ow with 0 <= ow*stride + kx - padding < input_dim.
    let lo = if kx >= padding {
        0
    } else {
        (padding - kx).div_ceil(stride)
    };
    let top = input_dim + padding;
    if top <= kx {
        return (1, 0);
    }
    let hi = ((top - kx - 1) / stride).min(out_dim.saturating_sub(1));
    (lo, hi)
}

#[inline]
fn accumulate_conv_row(
    out: &mut [f64],
    input: &[f64],
    wv: f64,
    co: usize,
    ci: usize,
    ky: usize,
    kx: usize,
    h: usize,
    w: usize,
    hout: usize,
    wout: usize,
    stride: usize,
    padding: usize,
) {
    if wv == 0.0 {
        return;
    }
    let (lo, hi) = valid_out_range(kx, padding, stride, w, wout);
    if lo > hi {
        return;
    }
    for oh in 0..hout {
        let ih = oh * stride + ky;
        if ih < padding || ih - padding >= h {
            continue;
        }
        let ih = ih - padding;
        let irow = &input[(ci * h + ih) * w..(ci * h + ih + 1) * w];
        let orow = &mut out[(co * hout + oh) * wout..(co * hout + oh + 1) * wout];
        for ow in lo..=hi {
            let iw = ow * stride + kx - padding;
            orow[ow] += wv * irow[iw];
        }
    }
}

/// One bilinear read at continuous position (y, x) over an H×W grid, with
/// zero contribution outside the grid. Immutable description of the four
/// corner taps, reused for value, input-gradient scatter and position
/// gradients.
#[derive(Debug, Clone, Copy)]
struct BilinearSample {
    // Corner (row, col) indices; usize::MAX marks out-of-bounds corners.
    rows: [usize; 2],
    cols: [usize; 2],
    // Interpolation fractions.
    ly: f64,
    lx: f64,
    inside: bool,
}

const OUT: usize = usize::MAX;

impl BilinearSample {
    #[inline]
    fn at(y: f64, x: f64, h: usize, w: usize) -> Self {
        let inside = y > -1.0 && y < h as f64 && x > -1.0 && x < w as f64;
        if !inside {
            return BilinearSample {
                rows: [OUT, OUT],
                cols: [OUT, OUT],
                ly: 0.0,
                lx: 0.0,
                inside,
            };
        }
        let y0 = y.floor();
        let x0 = x.floor();
        let ly = y - y0;
        let lx = x - x0;
        let row = |v: f64| -> usize {
            if v >= 0.0 && (v as usize) < h {
                v as usize
            } else {
                OUT
            }
        };
        let col = |v: f64| -> usize {
            if v >= 0.0 && (v as usize) < w {
                v as usize
            } else {
                OUT
            }
        };
        BilinearSample {
            rows: [row(y0), row(y0 + 1.0)],
            cols: [col(x0), col(x0 + 1.0)],
            ly,
            lx,
            inside,
        }
    }

    #[inline]
    fn corner(&self, chan: &[f64], w: usize, r: usize, c: usize) -> f64 {
        if self.rows[r] == OUT || self.cols[c] == OUT {
            0.0
        } else {
            chan[self.rows[r] * w + self.cols[c]]
        }
    }

    #[inline]
    fn read(&self, chan: &[f64], w: usize) -> f64 {
        if !self.inside {
            return 0.0;
        }
        let v00 = self.corner(chan, w, 0, 0);
        let v01 = self.corner(chan, w, 0, 1);
        let v10 = self.corner(chan, w, 1, 0);
        let v11 = self.corner(chan, w, 1, 1);
        let (ly, lx) = (self.ly, self.lx);
        (1.0 - ly) * ((1.0 - lx) * v00 + lx * v01) + ly * ((1.0 - lx) * v10 + lx * v11)
    }

    /// (d value / d y, d value / d x) of the bilinear read.
    #[inline]
    fn position_grads(&self, chan: &[f64], w: usize) -> (f64, f64) {
        if !self.inside {
            return (0.0, 0.0);
        }
        let v00 = self.corner(chan, w, 0, 0);
        let v01 = self.corner(chan, w, 0, 1);
        let v10 = self.corner(chan, w, 1, 0);
        let v11 = self.corner(chan, w, 1, 1);
        let (ly, lx) = (self.ly, self.lx);
        let dy = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01);
        let dx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10);
        (dy, dx)
    }

    /// Scatter `g` into the four corner taps with bilinear weights.
    #[inline]
    fn scatter(&self, grad_chan: &mut [f64], w: usize, g: f64) {
        if !self.inside {
            return;
        }
        let (ly, lx) = (self.ly, self.lx);
        let weights = [
            (0, 0, (1.0 - ly) * (1.0 - lx)),
            (0, 1, (1.0 - ly) * lx),
            (1, 0, ly * (1.0 - lx)),
            (1, 1, ly * lx),
        ];
        for (r, c, wgt) in weights {
            if self.rows[r] != OUT && self.cols[c] != OUT {
                grad_chan[self.rows[r] * w + self.cols[c]] += g * wgt;
            }
        }
    }
}
