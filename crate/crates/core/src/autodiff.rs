//! Minimal tape-based reverse-mode autodiff over [`Tensor`].
//!
//! Each forward pass builds a fresh [`Tape`]. Nodes are appended in
//! topological order, so the backward sweep is a single reverse walk.
//! Custom operations (the detection losses live in [`crate::detector`])
//! implement [`Operation`] and are pushed with [`Tape::push`].

use crate::tensor::{idx3, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

/// Backward rule for one tape node.
pub trait Operation {
    /// Accumulates gradients for this node's inputs given `grad_out`.
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor);
}

/// View of the tape handed to [`Operation::backward`].
pub struct BackwardCtx<'a> {
    inputs: &'a [VarId],
    values: &'a [Tensor],
    grads: &'a mut [Option<Tensor>],
    needs: &'a [bool],
    out_value: &'a Tensor,
}

impl BackwardCtx<'_> {
    pub fn input(&self, i: usize) -> VarId {
        self.inputs[i]
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn out_value(&self) -> &Tensor {
        self.out_value
    }

    pub fn needs_grad(&self, id: VarId) -> bool {
        self.needs[id.0]
    }

    /// Adds `grad` into the accumulator of `id`; no-op for constants.
    pub fn accumulate(&mut self, id: VarId, grad: Tensor) {
        if !self.needs[id.0] {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_scaled(&grad, 1.0),
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Gradients returned by [`Tape::backward`], indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Forward-pass recording of tensor operations. Node attributes live in
/// parallel vectors so the backward sweep can borrow values immutably while
/// mutating gradient accumulators.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    inputs: Vec<Vec<VarId>>,
    ops: Vec<Option<Box<dyn Operation>>>,
    needs: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A constant input; gradients do not flow into it.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.insert(value, Vec::new(), None, false)
    }

    /// A differentiable leaf (model parameter or probed input).
    pub fn param(&mut self, value: Tensor) -> VarId {
        self.insert(value, Vec::new(), None, true)
    }

    /// Appends a custom operation node.
    pub fn push(&mut self, value: Tensor, inputs: Vec<VarId>, op: Box<dyn Operation>) -> VarId {
        let needs = inputs.iter().any(|id| self.needs[id.0]);
        self.insert(value, inputs, Some(op), needs)
    }

    fn insert(
        &mut self,
        value: Tensor,
        inputs: Vec<VarId>,
        op: Option<Box<dyn Operation>>,
        needs: bool,
    ) -> VarId {
        self.values.push(value);
        self.inputs.push(inputs);
        self.ops.push(op);
        self.needs.push(needs);
        VarId(self.values.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reverse sweep from a scalar root. Interior gradients are dropped once
    /// consumed; leaves keep theirs for the caller.
    pub fn backward(&self, root: VarId) -> Gradients {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.values.len());
        grads.resize_with(self.values.len(), || None);
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.needs[i] {
                grads[i] = None;
                continue;
            }
            let Some(op) = self.ops[i].as_ref() else {
                continue; // leaf: keep accumulated grad for the caller
            };
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            let mut ctx = BackwardCtx {
                inputs: &self.inputs[i],
                values: &self.values,
                grads: &mut grads,
                needs: &self.needs,
                out_value: &self.values[i],
            };
            op.backward(&mut ctx, &grad_out);
        }
        Gradients { grads }
    }
}

// ---------------------------------------------------------------------------
// Built-in operations
// ---------------------------------------------------------------------------

struct Conv2dOp {
    stride: usize,
    pad: usize,
    has_bias: bool,
}

struct GroupNormOp {
    groups: usize,
    eps: f64,
}

struct ReluOp;
struct AddOp;
struct ScaleOp {
    factor: f64,
}
struct ExpOp;
struct Upsample2Op;
struct MatMulOp;
struct TransposeOp;
struct SoftmaxRowsOp;
struct ReshapeOp;
struct MeanAbsChannelsOp;
struct MseOp;

impl Tape {
    /// 2-D convolution: input `(Cin,H,W)`, weight `(Cout,Cin,K,K)`,
    /// optional bias `(Cout)`.
    pub fn conv2d(
        &mut self,
        input: VarId,
        weight: VarId,
        bias: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let value = conv2d_fwd(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        );
        let mut inputs = vec![input, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.push(
            value,
            inputs,
            Box::new(Conv2dOp {
                stride,
                pad,
                has_bias: bias.is_some(),
            }),
        )
    }

    /// Group normalization over `(C,H,W)` with per-channel affine.
    pub fn group_norm(
        &mut self,
        input: VarId,
        gamma: VarId,
        beta: VarId,
        groups: usize,
        eps: f64,
    ) -> VarId {
        let value = group_norm_fwd(self.value(input), self.value(gamma), self.value(beta), groups, eps);
        self.push(
            value,
            vec![input, gamma, beta],
            Box::new(GroupNormOp { groups, eps }),
        )
    }

    pub fn relu(&mut self, input: VarId) -> VarId {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push(value, vec![input], Box::new(ReluOp))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_scaled(vb, 1.0);
        self.push(out, vec![a, b], Box::new(AddOp))
    }

    pub fn scale(&mut self, input: VarId, factor: f64) -> VarId {
        let value = self.value(input).map(|v| v * factor);
        self.push(value, vec![input], Box::new(ScaleOp { factor }))
    }

    pub fn exp(&mut self, input: VarId) -> VarId {
        let value = self.value(input).map(f64::exp);
        self.push(value, vec![input], Box::new(ExpOp))
    }

    /// Nearest-neighbor 2x spatial upsampling of `(C,H,W)`.
    pub fn upsample2(&mut self, input: VarId) -> VarId {
        let value = upsample2_fwd(self.value(input));
        self.push(value, vec![input], Box::new(Upsample2Op))
    }

    /// Matrix product of 2-D tensors `(m,k) x (k,n)`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = matmul(self.value(a), self.value(b), false, false);
        self.push(value, vec![a, b], Box::new(MatMulOp))
    }

    pub fn transpose(&mut self, input: VarId) -> VarId {
        let value = transpose2(self.value(input));
        self.push(value, vec![input], Box::new(TransposeOp))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, input: VarId) -> VarId {
        let value = softmax_rows_fwd(self.value(input));
        self.push(value, vec![input], Box::new(SoftmaxRowsOp))
    }

    pub fn reshape(&mut self, input: VarId, shape: &[usize]) -> VarId {
        let value = self.value(input).reshaped(shape);
        self.push(value, vec![input], Box::new(ReshapeOp))
    }

    /// Channel-mean of absolute values: `(C,H,W)` -> `(1, H*W)`.
    pub fn mean_abs_channels(&mut self, input: VarId) -> VarId {
        let value = mean_abs_channels_fwd(self.value(input));
        self.push(value, vec![input], Box::new(MeanAbsChannelsOp))
    }

    /// Mean squared difference, scalar.
    pub fn mse(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let n = va.len() as f64;
        let sum: f64 = va
            .iter()
            .zip(vb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(sum / n), vec![a, b], Box::new(MseOp))
    }
}

impl Operation for Conv2dOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let input = ctx.input(0);
        let weight = ctx.input(1);
        if ctx.needs_grad(input) {
            let g = conv2d_bwd_input(
                ctx.value(weight),
                grad_out,
                ctx.value(input).shape(),
                self.stride,
                self.pad,
            );
            ctx.accumulate(input, g);
        }
        if ctx.needs_grad(weight) {
            let g = conv2d_bwd_weight(
                ctx.value(input),
                grad_out,
                ctx.value(weight).shape(),
                self.stride,
                self.pad,
            );
            ctx.accumulate(weight, g);
        }
        if self.has_bias {
            let bias = ctx.input(2);
            if ctx.needs_grad(bias) {
                ctx.accumulate(bias, conv2d_bwd_bias(grad_out));
            }
        }
    }
}

impl Operation for GroupNormOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let (dx, dgamma, dbeta) = group_norm_bwd(
            ctx.value(ctx.input(0)),
            ctx.value(ctx.input(1)),
            grad_out,
            self.groups,
            self.eps,
        );
        let (input, gamma, beta) = (ctx.input(0), ctx.input(1), ctx.input(2));
        if ctx.needs_grad(input) {
            ctx.accumulate(input, dx);
        }
        if ctx.needs_grad(gamma) {
            ctx.accumulate(gamma, dgamma);
        }
        if ctx.needs_grad(beta) {
            ctx.accumulate(beta, dbeta);
        }
    }
}

impl Operation for ReluOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let input = ctx.input(0);
        if !ctx.needs_grad(input) {
            return;
        }
        let x = ctx.value(input);
        let mut g = grad_out.clone();
        for (gv, xv) in g.data_mut().iter_mut().zip(x.iter()) {
            if *xv <= 0.0 {
                *gv = 0.0;
            }
        }
        ctx.accumulate(input, g);
    }
}

impl Operation for AddOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let (a, b) = (ctx.input(0), ctx.input(1));
        if ctx.needs_grad(a) {
            ctx.accumulate(a, grad_out.clone());
        }
        if ctx.needs_grad(b) {
            ctx.accumulate(b, grad_out.clone());
        }
    }
}

impl Operation for ScaleOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let input = ctx.input(0);
        if ctx.needs_grad(input) {
            ctx.accumulate(input, grad_out.map(|v| v * self.factor));
        }
    }
}

impl Operation for ExpOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let input = ctx.input(0);
        if !ctx.needs_grad(input) {
            return;
        }
        let out = ctx.out_value();
        let mut g = grad_out.clone();
        for (gv, yv) in g.data_mut().iter_mut().zip(out.iter()) {
            *gv *= yv;
        }
        ctx.accumulate(input, g);
    }
}

impl Operation for Upsample2Op {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let input = ctx.input(0);
        if !ctx.needs_grad(input) {
            return;
        }
        let shape = ctx.value(input).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut g = Tensor::zeros(&shape);
        let go = grad_out.data();
        let gd = g.data_mut();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += go[idx3(2 * w, 2 * h, ch, 2 * y + dy, 2 * x + dx)];
                        }
                    }
                    gd[idx3(w, h, ch, y, x)] = s;
                }
            }
        }
        ctx.accumulate(input, g);
    }
}

impl Operation for MatMulOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let (a, b) = (ctx.input(0), ctx.input(1));
        if ctx.needs_grad(a) {
            // dA = dC . B^T
            ctx.accumulate(a, matmul(grad_out, ctx.value(b), false, true));
        }
        if ctx.needs_grad(b) {
            // dB = A^T . dC
            ctx.accumulate(b, matmul(ctx.value(a), grad_out, true, false));
        }
    }
}

impl Operation for TransposeOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let input = ctx.input(0);
        if ctx.needs_grad(input) {
            ctx.accumulate(input, transpose2(grad_out));
        }
    }
}

impl Operation for SoftmaxRowsOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let input = ctx.input(0);
        if !ctx.needs_grad(input) {
            return;
        }
        let y = ctx.out_value();
        let (rows, cols) = (y.shape()[0], y.shape()[1]);
        let mut g = Tensor::zeros(y.shape());
        let (yd, god, gd) = (y.data(), grad_out.data(), g.data_mut());
        for r in 0..rows {
            let base = r * cols;
            let dot: f64 = (0..cols).map(|c| god[base + c] * yd[base + c]).sum();
            for c in 0..cols {
                gd[base + c] = yd[base + c] * (god[base + c] - dot);
            }
        }
        ctx.accumulate(input, g);
    }
}

impl Operation for ReshapeOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let input = ctx.input(0);
        if ctx.needs_grad(input) {
            let shape = ctx.value(input).shape().to_vec();
            ctx.accumulate(input, grad_out.reshaped(&shape));
        }
    }
}

impl Operation for MeanAbsChannelsOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let input = ctx.input(0);
        if !ctx.needs_grad(input) {
            return;
        }
        let x = ctx.value(input);
        let c = x.shape()[0];
        let spatial = x.len() / c;
        let mut g = Tensor::zeros(x.shape());
        let (xd, god, gd) = (x.data(), grad_out.data(), g.data_mut());
        for ch in 0..c {
            for p in 0..spatial {
                let v = xd[ch * spatial + p];
                gd[ch * spatial + p] = god[p] * v.signum_or_zero() / c as f64;
            }
        }
        ctx.accumulate(input, g);
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

impl Operation for MseOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, grad_out: &Tensor) {
        let (a, b) = (ctx.input(0), ctx.input(1));
        let scale = 2.0 * grad_out.item() / ctx.value(a).len() as f64;
        if ctx.needs_grad(a) {
            let mut g = ctx.value(a).clone();
            g.add_scaled(ctx.value(b), -1.0);
            ctx.accumulate(a, g.map(|v| v * scale));
        }
        if ctx.needs_grad(b) {
            let mut g = ctx.value(b).clone();
            g.add_scaled(ctx.value(a), -1.0);
            ctx.accumulate(b, g.map(|v| v * scale));
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

pub(crate) fn conv2d_fwd(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    assert_eq!(k, w.shape()[3]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (win + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();
    for oc in 0..cout {
        let out_base = oc * ho * wo;
        if let Some(bias) = b {
            let bv = bias.data()[oc];
            od[out_base..out_base + ho * wo].fill(bv);
        }
        for ic in 0..cin {
            let in_base = ic * h * win;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((oc * cin + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = in_base + iy as usize * win;
                        let out_row = out_base + oy * wo;
                        let (lo, hi) = conv_x_range(wo, win, stride, kx, pad);
                        for ox in lo..hi {
                            let ix = ox * stride + kx - pad;
                            od[out_row + ox] += wv * xd[in_row + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Valid output-x range so that `ix = ox*stride + kx - pad` stays in `[0, w)`.
#[inline]
fn conv_x_range(wo: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx + stride - 1) / stride
    };
    let hi_num = w + pad;
    let hi = if hi_num > kx {
        ((hi_num - kx + stride - 1) / stride).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_bwd_input(
    w: &Tensor,
    dout: &Tensor,
    in_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let (cin, h, win) = (in_shape[0], in_shape[1], in_shape[2]);
    let (cout, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (ho, wo) = (dout.shape()[1], dout.shape()[2]);
    let mut din = Tensor::zeros(in_shape);
    let (wd, dod) = (w.data(), dout.data());
    let dd = din.data_mut();
    for oc in 0..cout {
        let out_base = oc * ho * wo;
        for ic in 0..cin {
            let in_base = ic * h * win;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((oc * cin + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = in_base + iy as usize * win;
                        let out_row = out_base + oy * wo;
                        let (lo, hi) = conv_x_range(wo, win, stride, kx, pad);
                        for ox in lo..hi {
                            let ix = ox * stride + kx - pad;
                            dd[in_row + ix] += wv * dod[out_row + ox];
                        }
                    }
                }
            }
        }
    }
    din
}

pub(crate) fn conv2d_bwd_weight(
    x: &Tensor,
    dout: &Tensor,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _, k) = (w_shape[0], w_shape[1], w_shape[2]);
    let (ho, wo) = (dout.shape()[1], dout.shape()[2]);
    let mut dw = Tensor::zeros(w_shape);
    let (xd, dod) = (x.data(), dout.data());
    let dwd = dw.data_mut();
    for oc in 0..cout {
        let out_base = oc * ho * wo;
        for ic in 0..cin {
            let in_base = ic * h * win;
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = in_base + iy as usize * win;
                        let out_row = out_base + oy * wo;
                        let (lo, hi) = conv_x_range(wo, win, stride, kx, pad);
                        for ox in lo..hi {
                            let ix = ox * stride + kx - pad;
                            acc += dod[out_row + ox] * xd[in_row + ix];
                        }
                    }
                    dwd[((oc * cin + ic) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    dw
}

pub(crate) fn conv2d_bwd_bias(dout: &Tensor) -> Tensor {
    let (cout, ho, wo) = (dout.shape()[0], dout.shape()[1], dout.shape()[2]);
    let mut db = Tensor::zeros(&[cout]);
    let dod = dout.data();
    for oc in 0..cout {
        db.data_mut()[oc] = dod[oc * ho * wo..(oc + 1) * ho * wo].iter().sum();
    }
    db
}

pub(crate) fn group_norm_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert_eq!(c % groups, 0, "channels not divisible by groups");
    let cg = c / groups;
    let m = cg * h * w;
    let mut out = Tensor::zeros(x.shape());
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let od = out.data_mut();
    for g in 0..groups {
        let base = g * m;
        let slice = &xd[base..base + m];
        let mean: f64 = slice.iter().sum::<f64>() / m as f64;
        let var: f64 = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let ivar = 1.0 / (var + eps).sqrt();
        for cc in 0..cg {
            let ch = g * cg + cc;
            let (ga, be) = (gd[ch], bd[ch]);
            for p in 0..h * w {
                let i = base + cc * h * w + p;
                od[i] = ga * (xd[i] - mean) * ivar + be;
            }
        }
    }
    out
}

pub(crate) fn group_norm_bwd(
    x: &Tensor,
    gamma: &Tensor,
    dout: &Tensor,
    groups: usize,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cg = c / groups;
    let m = cg * h * w;
    let hw = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let (xd, gd, dod) = (x.data(), gamma.data(), dout.data());
    for g in 0..groups {
        let base = g * m;
        let slice = &xd[base..base + m];
        let mean: f64 = slice.iter().sum::<f64>() / m as f64;
        let var: f64 = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let ivar = 1.0 / (var + eps).sqrt();

        // Accumulate affine grads and the two backward reductions.
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xc = 0.0;
        for cc in 0..cg {
            let ch = g * cg + cc;
            let ga = gd[ch];
            let mut dg = 0.0;
            let mut db = 0.0;
            for p in 0..hw {
                let i = base + cc * hw + p;
                let xc = xd[i] - mean;
                dg += dod[i] * xc * ivar;
                db += dod[i];
                let dxhat = dod[i] * ga;
                sum_dxhat += dxhat;
                sum_dxhat_xc += dxhat * xc;
            }
            dgamma.data_mut()[ch] += dg;
            dbeta.data_mut()[ch] += db;
        }
        let dvar = sum_dxhat_xc * (-0.5) * ivar * ivar * ivar;
        let dmean = -sum_dxhat * ivar;
        let dxd = dx.data_mut();
        for cc in 0..cg {
            let ch = g * cg + cc;
            let ga = gd[ch];
            for p in 0..hw {
                let i = base + cc * hw + p;
                let xc = xd[i] - mean;
                let dxhat = dod[i] * ga;
                dxd[i] = dxhat * ivar + dvar * 2.0 * xc / m as f64 + dmean / m as f64;
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn upsample2_fwd(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                let v = xd[idx3(w, h, ch, y, x_)];
                for dy in 0..2 {
                    for dx in 0..2 {
                        od[idx3(2 * w, 2 * h, ch, 2 * y + dy, 2 * x_ + dx)] = v;
                    }
                }
            }
        }
    }
    out
}

/// General matrix product with optional transposes: `op(a) . op(b)`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k1, k2, "matmul inner dim mismatch");
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        for kk in 0..k1 {
            let av = if ta { ad[kk * ac + i] } else { ad[i * ac + kk] };
            if av == 0.0 {
                continue;
            }
            let orow = i * n;
            if tb {
                for j in 0..n {
                    od[orow + j] += av * bd[j * bc + kk];
                }
            } else {
                let brow = kk * bc;
                for j in 0..n {
                    od[orow + j] += av * bd[brow + j];
                }
            }
        }
    }
    out
}

pub(crate) fn transpose2(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            od[j * r + i] = xd[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_rows_fwd(x: &Tensor) -> Tensor {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for r in 0..rows {
        let base = r * cols;
        let row = &xd[base..base + cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (row[c] - max).exp();
            od[base + c] = e;
            sum += e;
        }
        for c in 0..cols {
            od[base + c] /= sum;
        }
    }
    out
}

pub(crate) fn mean_abs_channels_fwd(x: &Tensor) -> Tensor {
    let c = x.shape()[0];
    let spatial = x.len() / c;
    let mut out = Tensor::zeros(&[1, spatial]);
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        for p in 0..spatial {
            od[p] += xd[ch * spatial + p].abs();
        }
    }
    for v in od.iter_mut() {
        *v /= c as f64;
    }
    out
}

// ---------------------------------------------------------------------------
// Finite-difference checking (used by tests and the acceptance suite)
// ---------------------------------------------------------------------------

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst-case relative error between analytic and numeric gradients.
/// The denominator is floored so near-zero pairs compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
