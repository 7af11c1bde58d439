//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! A `Tape` owns every tensor it produces. Forward ops append nodes; a single
//! `backward` pass walks the tape in reverse and populates the gradients of
//! all `requires_grad` leaves reachable from the loss. Nodes are topologically
//! ordered by construction (an op can only reference earlier ids).
//!
//! A tape is confined to one thread; independent tapes are fully independent.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor living on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    Dense {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    Relu {
        input: TensorId,
    },
    /// 2x2 stride-2 max pooling; `argmax` stores, per output element, the flat
    /// input index the gradient routes to (first maximum in row-major order).
    MaxPool2 {
        input: TensorId,
        argmax: Vec<usize>,
    },
    Flatten {
        input: TensorId,
    },
    Mul {
        lhs: TensorId,
        rhs: TensorId,
    },
    Add {
        lhs: TensorId,
        rhs: TensorId,
    },
    Scale {
        input: TensorId,
        factor: S,
    },
    Sum {
        input: TensorId,
    },
    CrossEntropyMean {
        logits: TensorId,
        labels: Vec<u32>,
    },
}

struct Node<S: Scalar> {
    tensor: Tensor<S>,
    op: Op<S>,
}

/// Ordered record of executed operations, sufficient for reverse traversal.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Insert a leaf tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        id
    }

    /// Insert a leaf that never receives gradient.
    pub fn constant(&mut self, mut tensor: Tensor<S>) -> TensorId {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].tensor.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.tensor.reset_grad();
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, requires_grad: bool) -> Result<TensorId> {
        let mut tensor = Tensor::new(shape, data)?;
        tensor.requires_grad = requires_grad;
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        Ok(id)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad)
    }

    // ── Forward operations ─────────────────────────────────────────────

    /// 2-D cross-correlation: input `[N,C,H,W]`, kernel `[F,C,kH,kW]`,
    /// bias `[F]` -> `[N,F,H',W']` with `H' = (H + 2*padding - kH)/stride + 1`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-d input and kernel, got {ishape:?} and {kshape:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (f, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if c != kc {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {ishape:?} vs kernel {kshape:?}"
            )));
        }
        if bshape != [f] {
            return Err(Error::Dimension(format!(
                "conv2d bias shape {bshape:?} does not match {f} filters"
            )));
        }
        let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, padding)?;

        let mut out = vec![S::zero(); n * f * oh * ow];
        {
            let in_d = self.data(input);
            let k_d = self.data(kernel);
            let b_d = self.data(bias);
            for ni in 0..n {
                for fi in 0..f {
                    let out_base = (ni * f + fi) * oh * ow;
                    out[out_base..out_base + oh * ow].fill(b_d[fi]);
                    for ci in 0..c {
                        let in_base = (ni * c + ci) * h * w;
                        let k_base = (fi * c + ci) * kh * kw;
                        for khi in 0..kh {
                            for kwi in 0..kw {
                                let kv = k_d[k_base + khi * kw + kwi];
                                if kv == S::zero() {
                                    continue;
                                }
                                if stride == 1 {
                                    // contiguous row overlap, no inner bounds checks
                                    let Some((lo, len)) = row_overlap(ow, w, kwi, padding) else {
                                        continue;
                                    };
                                    let in_col = lo + kwi - padding;
                                    for ohi in 0..oh {
                                        let ih = (ohi + khi) as isize - padding as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        let in_row = in_base + ih as usize * w + in_col;
                                        let out_row = out_base + ohi * ow + lo;
                                        let in_slice = &in_d[in_row..in_row + len];
                                        let out_slice = &mut out[out_row..out_row + len];
                                        for (o, x) in out_slice.iter_mut().zip(in_slice) {
                                            *o += kv * *x;
                                        }
                                    }
                                } else {
                                    for ohi in 0..oh {
                                        let ih = (ohi * stride + khi) as isize - padding as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        let in_row = in_base + ih as usize * w;
                                        let out_row = out_base + ohi * ow;
                                        for owi in 0..ow {
                                            let iw = (owi * stride + kwi) as isize - padding as isize;
                                            if iw < 0 || iw >= w as isize {
                                                continue;
                                            }
                                            out[out_row + owi] += kv * in_d[in_row + iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs_grad(&[input, kernel, bias]);
        self.push(
            vec![n, f, oh, ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        )
    }

    /// Affine layer: input `[N,D]` x weight `[D,K]` + bias `[K]` -> `[N,K]`.
    pub fn dense(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 2 || wshape.len() != 2 {
            return Err(Error::Dimension(format!(
                "dense expects 2-d input and weight, got {ishape:?} and {wshape:?}"
            )));
        }
        let (n, d) = (ishape[0], ishape[1]);
        let (wd, k) = (wshape[0], wshape[1]);
        if d != wd {
            return Err(Error::Dimension(format!(
                "dense inner dimensions disagree: input {ishape:?} vs weight {wshape:?}"
            )));
        }
        if bshape != [k] {
            return Err(Error::Dimension(format!(
                "dense bias shape {bshape:?} does not match {k} outputs"
            )));
        }
        let mut out = vec![S::zero(); n * k];
        {
            let in_d = self.data(input);
            let w_d = self.data(weight);
            let b_d = self.data(bias);
            for ni in 0..n {
                let row = &mut out[ni * k..(ni + 1) * k];
                row.copy_from_slice(b_d);
                for di in 0..d {
                    let x = in_d[ni * d + di];
                    if x == S::zero() {
                        continue;
                    }
                    let w_row = &w_d[di * k..(di + 1) * k];
                    for (o, wv) in row.iter_mut().zip(w_row) {
                        *o += x * *wv;
                    }
                }
            }
        }
        let rg = self.needs_grad(&[input, weight, bias]);
        self.push(
            vec![n, k],
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    /// Elementwise `max(0, x)`; subgradient at 0 is 0.
    pub fn relu(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        let data = self
            .data(input)
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let rg = self.needs_grad(&[input]);
        self.push(shape, data, Op::Relu { input }, rg)
    }

    /// 2x2 stride-2 max pooling over `[N,C,H,W]` with even `H`, `W`. Ties
    /// route the gradient to the first maximal element in row-major order.
    pub fn maxpool2(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "maxpool2 expects 4-d input, got {shape:?}"
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "maxpool2 requires even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![S::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        {
            let in_d = self.data(input);
            for plane in 0..n * c {
                let in_base = plane * h * w;
                let out_base = plane * oh * ow;
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut best_idx = in_base + (2 * ohi) * w + 2 * owi;
                        let mut best = in_d[best_idx];
                        for dh in 0..2 {
                            for dw in 0..2 {
                                let idx = in_base + (2 * ohi + dh) * w + (2 * owi + dw);
                                if in_d[idx] > best {
                                    best = in_d[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[out_base + ohi * ow + owi] = best;
                        argmax[out_base + ohi * ow + owi] = best_idx;
                    }
                }
            }
        }
        let rg = self.needs_grad(&[input]);
        self.push(vec![n, c, oh, ow], out, Op::MaxPool2 { input, argmax }, rg)
    }

    /// Collapse `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.is_empty() {
            return Err(Error::Dimension("flatten on rank-0 tensor".into()));
        }
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let data = self.data(input).to_vec();
        let rg = self.needs_grad(&[input]);
        self.push(vec![n, rest], data, Op::Flatten { input }, rg)
    }

    /// Elementwise product of same-shape tensors (Hadamard).
    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let lshape = self.shape(lhs).to_vec();
        if lshape != self.shape(rhs) {
            return Err(Error::Dimension(format!(
                "mul shape mismatch: {:?} vs {:?}",
                lshape,
                self.shape(rhs)
            )));
        }
        let data = self
            .data(lhs)
            .iter()
            .zip(self.data(rhs))
            .map(|(&a, &b)| a * b)
            .collect();
        let rg = self.needs_grad(&[lhs, rhs]);
        self.push(lshape, data, Op::Mul { lhs, rhs }, rg)
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let lshape = self.shape(lhs).to_vec();
        if lshape != self.shape(rhs) {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                lshape,
                self.shape(rhs)
            )));
        }
        let data = self
            .data(lhs)
            .iter()
            .zip(self.data(rhs))
            .map(|(&a, &b)| a + b)
            .collect();
        let rg = self.needs_grad(&[lhs, rhs]);
        self.push(lshape, data, Op::Add { lhs, rhs }, rg)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, input: TensorId, factor: S) -> Result<TensorId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite(format!("scale factor {factor}")));
        }
        let shape = self.shape(input).to_vec();
        let data = self.data(input).iter().map(|&x| x * factor).collect();
        let rg = self.needs_grad(&[input]);
        self.push(shape, data, Op::Scale { input, factor }, rg)
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, input: TensorId) -> Result<TensorId> {
        let total = self
            .data(input)
            .iter()
            .fold(S::zero(), |acc, &x| acc + x);
        let rg = self.needs_grad(&[input]);
        self.push(vec![1], vec![total], Op::Sum { input }, rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max-subtraction. `logits` is `[N,K]`, labels are class indices.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, labels: &[u32]) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "cross_entropy expects 2-d logits, got {shape:?}"
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::Consistency(format!(
                "{} logit rows vs {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Index(format!("label {l} out of range for {k} classes")));
        }
        let mut total = S::zero();
        {
            let d = self.data(logits);
            for (ni, &label) in labels.iter().enumerate() {
                let row = &d[ni * k..(ni + 1) * k];
                let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
                let lse = row
                    .iter()
                    .fold(S::zero(), |acc, &x| acc + (x - max).exp())
                    .ln();
                total += lse - (row[label as usize] - max);
            }
        }
        let mean = total / S::from_f64(n as f64);
        let rg = self.needs_grad(&[logits]);
        self.push(
            vec![1],
            vec![mean],
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients of intermediate nodes are
    /// recomputed fresh; leaf gradients accumulate across calls until
    /// `zero_grads`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(v) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of leaf node {i}: {v}")));
                }
                self.nodes[i].tensor.accumulate_grad(&g);
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let (input, kernel, bias, stride, padding) =
                        (*input, *kernel, *bias, *stride, *padding);
                    let ishape = self.shape(input);
                    let kshape = self.shape(kernel);
                    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                    let (f, _, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
                    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, padding).expect("checked at forward");

                    let needs_in = self.nodes[input.0].tensor.requires_grad;
                    let needs_k = self.nodes[kernel.0].tensor.requires_grad;
                    let needs_b = self.nodes[bias.0].tensor.requires_grad;

                    let mut gin = vec![S::zero(); n * c * h * w];
                    let mut gk = vec![S::zero(); f * c * kh * kw];
                    let mut gb = vec![S::zero(); f];
                    {
                        let in_d = self.data(input);
                        let k_d = self.data(kernel);
                        for ni in 0..n {
                            for fi in 0..f {
                                let out_base = (ni * f + fi) * oh * ow;
                                if needs_b {
                                    for v in &g[out_base..out_base + oh * ow] {
                                        gb[fi] += *v;
                                    }
                                }
                                for ci in 0..c {
                                    let in_base = (ni * c + ci) * h * w;
                                    let k_base = (fi * c + ci) * kh * kw;
                                    for khi in 0..kh {
                                        for kwi in 0..kw {
                                            let kv = k_d[k_base + khi * kw + kwi];
                                            let mut k_acc = S::zero();
                                            if stride == 1 {
                                                let Some((lo, len)) = row_overlap(ow, w, kwi, padding) else {
                                                    continue;
                                                };
                                                let in_col = lo + kwi - padding;
                                                for ohi in 0..oh {
                                                    let ih = (ohi + khi) as isize - padding as isize;
                                                    if ih < 0 || ih >= h as isize {
                                                        continue;
                                                    }
                                                    let in_row = in_base + ih as usize * w + in_col;
                                                    let out_row = out_base + ohi * ow + lo;
                                                    let go_slice = &g[out_row..out_row + len];
                                                    if needs_k {
                                                        let in_slice = &in_d[in_row..in_row + len];
                                                        for (go, x) in go_slice.iter().zip(in_slice) {
                                                            k_acc += *go * *x;
                                                        }
                                                    }
                                                    if needs_in {
                                                        let gin_slice = &mut gin[in_row..in_row + len];
                                                        for (gi, go) in gin_slice.iter_mut().zip(go_slice) {
                                                            *gi += *go * kv;
                                                        }
                                                    }
                                                }
                                            } else {
                                                for ohi in 0..oh {
                                                    let ih = (ohi * stride + khi) as isize - padding as isize;
                                                    if ih < 0 || ih >= h as isize {
                                                        continue;
                                                    }
                                                    let in_row = in_base + ih as usize * w;
                                                    let out_row = out_base + ohi * ow;
                                                    for owi in 0..ow {
                                                        let iw = (owi * stride + kwi) as isize - padding as isize;
                                                        if iw < 0 || iw >= w as isize {
                                                            continue;
                                                        }
                                                        let go = g[out_row + owi];
                                                        if needs_k {
                                                            k_acc += go * in_d[in_row + iw as usize];
                                                        }
                                                        if needs_in {
                                                            gin[in_row + iw as usize] += go * kv;
                                                        }
                                                    }
                                                }
                                            }
                                            if needs_k {
                                                gk[k_base + khi * kw + kwi] += k_acc;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if needs_in {
                        accumulate(&mut grads, input, gin);
                    }
                    if needs_k {
                        accumulate(&mut grads, kernel, gk);
                    }
                    if needs_b {
                        accumulate(&mut grads, bias, gb);
                    }
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let ishape = self.shape(input);
                    let (n, d) = (ishape[0], ishape[1]);
                    let k = self.shape(weight)[1];

                    let needs_in = self.nodes[input.0].tensor.requires_grad;
                    let needs_w = self.nodes[weight.0].tensor.requires_grad;
                    let needs_b = self.nodes[bias.0].tensor.requires_grad;

                    let mut gin = vec![S::zero(); n * d];
                    let mut gw = vec![S::zero(); d * k];
                    let mut gb = vec![S::zero(); k];
                    {
                        let in_d = self.data(input);
                        let w_d = self.data(weight);
                        for ni in 0..n {
                            let go = &g[ni * k..(ni + 1) * k];
                            if needs_b {
                                for (b, v) in gb.iter_mut().zip(go) {
                                    *b += *v;
                                }
                            }
                            for di in 0..d {
                                let x = in_d[ni * d + di];
                                let w_row = &w_d[di * k..(di + 1) * k];
                                if needs_in {
                                    let mut acc = S::zero();
                                    for (wv, gv) in w_row.iter().zip(go) {
                                        acc += *wv * *gv;
                                    }
                                    gin[ni * d + di] = acc;
                                }
                                if needs_w {
                                    let gw_row = &mut gw[di * k..(di + 1) * k];
                                    for (t, gv) in gw_row.iter_mut().zip(go) {
                                        *t += x * *gv;
                                    }
                                }
                            }
                        }
                    }
                    if needs_in {
                        accumulate(&mut grads, input, gin);
                    }
                    if needs_w {
                        accumulate(&mut grads, weight, gw);
                    }
                    if needs_b {
                        accumulate(&mut grads, bias, gb);
                    }
                }
                Op::Relu { input } => {
                    let input = *input;
                    let dg: Vec<S> = self
                        .data(input)
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| if x > S::zero() { gv } else { S::zero() })
                        .collect();
                    accumulate(&mut grads, input, dg);
                }
                Op::MaxPool2 { input, argmax } => {
                    let input = *input;
                    let mut dg = vec![S::zero(); self.nodes[input.0].tensor.numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dg[src] += g[o];
                    }
                    accumulate(&mut grads, input, dg);
                }
                Op::Flatten { input } => {
                    let input = *input;
                    accumulate(&mut grads, input, g);
                }
                Op::Mul { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    if self.nodes[lhs.0].tensor.requires_grad {
                        let dl: Vec<S> = g.iter().zip(self.data(rhs)).map(|(&gv, &b)| gv * b).collect();
                        accumulate(&mut grads, lhs, dl);
                    }
                    if self.nodes[rhs.0].tensor.requires_grad {
                        let dr: Vec<S> = g.iter().zip(self.data(lhs)).map(|(&gv, &a)| gv * a).collect();
                        accumulate(&mut grads, rhs, dr);
                    }
                }
                Op::Add { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    if self.nodes[lhs.0].tensor.requires_grad {
                        accumulate(&mut grads, lhs, g.clone());
                    }
                    if self.nodes[rhs.0].tensor.requires_grad {
                        accumulate(&mut grads, rhs, g);
                    }
                }
                Op::Scale { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    let dg: Vec<S> = g.iter().map(|&gv| gv * factor).collect();
                    accumulate(&mut grads, input, dg);
                }
                Op::Sum { input } => {
                    let input = *input;
                    let dg = vec![g[0]; self.nodes[input.0].tensor.numel()];
                    accumulate(&mut grads, input, dg);
                }
                Op::CrossEntropyMean { logits, labels } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let shape = self.shape(logits);
                    let (n, k) = (shape[0], shape[1]);
                    let inv_n = S::one() / S::from_f64(n as f64);
                    let mut dg = vec![S::zero(); n * k];
                    {
                        let d = self.data(logits);
                        for (ni, &label) in labels.iter().enumerate() {
                            let row = &d[ni * k..(ni + 1) * k];
                            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
                            let sum: S = row
                                .iter()
                                .fold(S::zero(), |acc, &x| acc + (x - max).exp());
                            for ki in 0..k {
                                let p = (row[ki] - max).exp() / sum;
                                let target = if ki == label as usize { S::one() } else { S::zero() };
                                dg[ni * k + ki] = g[0] * (p - target) * inv_n;
                            }
                        }
                    }
                    accumulate(&mut grads, logits, dg);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], id: TensorId, delta: Vec<S>) {
    match &mut grads[id.0] {
        Some(buf) => {
            for (a, b) in buf.iter_mut().zip(&delta) {
                *a += *b;
            }
        }
        slot => *slot = Some(delta),
    }
}

/// For stride-1 rows: output columns `[lo, lo+len)` whose input column
/// `owi + kwi - padding` stays in bounds, or `None` when nothing overlaps.
fn row_overlap(ow: usize, w: usize, kwi: usize, padding: usize) -> Option<(usize, usize)> {
    let lo = padding.saturating_sub(kwi);
    let hi = ow.min((w + padding).saturating_sub(kwi));
    (hi > lo).then(|| (lo, hi - lo))
}

fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let span_h = h + 2 * padding;
    let span_w = w + 2 * padding;
    if span_h < kh || span_w < kw {
        return Err(Error::Dimension(format!(
            "kernel {kh}x{kw} larger than padded input {span_h}x{span_w}"
        )));
    }
    if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
        return Err(Error::Dimension(format!(
            "conv2d output size not integral: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )));
    }
    Ok(((span_h - kh) / stride + 1, (span_w - kw) / stride + 1))
}
