//! Reverse-mode automatic differentiation over an append-only operation tape.
//!
//! Every taped operation appends one node holding its op kind, input node
//! ids, and the saved output value. `backward` replays the tape strictly in
//! reverse append order (append order is a topological order by
//! construction) and accumulates gradients into leaf nodes. Leaf gradients
//! persist across `backward` calls; calling backward twice without fetching
//! sums the contributions.

use super::kernels as k;
use super::tensor::{NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f32),
    PowScalar(NodeId, f32),
    Exp(NodeId),
    Ln(NodeId),
    Clamp(NodeId, f32, f32),
    Relu(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        dims: k::ConvDims,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        training: bool,
        channels: usize,
        spatial: usize,
    },
    MaxPool2x2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    UpsampleNearest2x(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    ElemwiseMaxN {
        inputs: Vec<NodeId>,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(NodeId),
    SoftmaxChannels(NodeId),
    L2NormalizeRows {
        input: NodeId,
        norms: Vec<f32>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumPerChannel(NodeId),
    SumRows(NodeId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f32>,
    needs_grad: bool,
    /// Accumulated gradient; populated on leaves by `backward`.
    acc_grad: Option<Vec<f32>>,
}

/// Per-model-instance recording of one forward pass. Single-threaded; drop
/// or [`Tape::clear`] it after each step to free saved activations.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that records values but never tracks gradients (inference).
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f32>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad: needs_grad && self.grad_enabled,
            acc_grad: None,
        });
        id
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.node(id).value
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.node(id).value.len()
    }

    /// Copy a node's value out as a tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        let mut t = Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent");
        t.node_id = Some(id);
        t
    }

    /// Scalar value of a 1-element node.
    pub fn scalar_value(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.numel(id), 1);
        self.node(id).value[0]
    }

    /// Accumulated leaf gradient, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.node(id).acc_grad.as_deref()
    }

    /// Register a tensor as a differentiable leaf. Sets `node_id` on the
    /// tensor so its gradient can be written back after `backward`.
    pub fn leaf(&mut self, t: &mut Tensor) -> NodeId {
        let id = self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad);
        t.node_id = Some(id);
        id
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!("shape {shape:?} vs {} values", data.len())));
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    /// Accumulate the leaf gradient recorded for `t.node_id` into `t.grad`.
    pub fn write_back_grad(&self, t: &mut Tensor) {
        if let Some(id) = t.node_id {
            if let Some(g) = self.grad(id) {
                t.accumulate_grad(g);
            }
        }
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let v: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), v, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "sub")?;
        let v: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), v, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mul")?;
        let v: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), v, ng))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "div")?;
        let v: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x / y).collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Op::Div(a, b), self.nodes[a.0].shape.clone(), v, ng))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f32) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|&x| x + s).collect();
        let ng = self.node(a).needs_grad;
        self.push(Op::AddScalar(a), self.nodes[a.0].shape.clone(), v, ng)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f32) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.node(a).needs_grad;
        self.push(Op::MulScalar(a, s), self.nodes[a.0].shape.clone(), v, ng)
    }

    /// Elementwise x^p for non-negative inputs.
    pub fn pow_scalar(&mut self, a: NodeId, p: f32) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|&x| (x as f64).powf(p as f64) as f32).collect();
        let ng = self.node(a).needs_grad;
        self.push(Op::PowScalar(a, p), self.nodes[a.0].shape.clone(), v, ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|&x| (x as f64).exp() as f32).collect();
        let ng = self.node(a).needs_grad;
        self.push(Op::Exp(a), self.nodes[a.0].shape.clone(), v, ng)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|&x| (x as f64).ln() as f32).collect();
        let ng = self.node(a).needs_grad;
        self.push(Op::Ln(a), self.nodes[a.0].shape.clone(), v, ng)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f32, hi: f32) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|&x| x.clamp(lo, hi)).collect();
        let ng = self.node(a).needs_grad;
        self.push(Op::Clamp(a, lo, hi), self.nodes[a.0].shape.clone(), v, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f32> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.node(a).needs_grad;
        self.push(Op::Relu(a), self.nodes[a.0].shape.clone(), v, ng)
    }

    // ── structured ops ──────────────────────────────────────────────

    /// Cross-correlation of NCHW `input` with OIHW `weight`, odd kernel only.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.len() != 4 || wshape.len() != 4 {
            return Err(Error::Dim(format!("conv2d expects 4-d input/weight, got {ishape:?} and {wshape:?}")));
        }
        let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, wcin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if wcin != cin {
            return Err(Error::Dim(format!("conv2d channel mismatch: input has {cin}, weight expects {wcin}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::Dim(format!("conv2d bias shape {:?} vs cout {cout}", self.shape(b))));
            }
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < kh || span_w < kw {
            return Err(Error::Config(format!(
                "conv2d output extent not positive for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
            )));
        }
        let oh = (span_h - kh) / stride + 1;
        let ow = (span_w - kw) / stride + 1;
        let dims = k::ConvDims { n, cin, h, w, cout, kh, kw, stride, pad: padding, oh, ow };
        let mut out = vec![0.0f32; n * cout * oh * ow];
        let bias_val = bias.map(|b| self.value(b).to_vec());
        k::conv2d_forward(self.value(input), self.value(weight), bias_val.as_deref(), &dims, &mut out);
        let ng = self.node(input).needs_grad
            || self.node(weight).needs_grad
            || bias.map(|b| self.node(b).needs_grad).unwrap_or(false);
        Ok(self.push(Op::Conv2d { input, weight, bias, dims }, vec![n, cout, oh, ow], out, ng))
    }

    /// Affine map: input [B,Din] x weight [Dout,Din]^T (+ bias [Dout]).
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.len() != 2 || wshape.len() != 2 {
            return Err(Error::Dim(format!("linear expects 2-d input/weight, got {ishape:?} and {wshape:?}")));
        }
        let (b, din) = (ishape[0], ishape[1]);
        let (dout, wdin) = (wshape[0], wshape[1]);
        if din != wdin {
            return Err(Error::Dim(format!("linear inner dims disagree: {din} vs {wdin}")));
        }
        if let Some(bn) = bias {
            if self.shape(bn) != [dout] {
                return Err(Error::Dim(format!("linear bias shape {:?} vs dout {dout}", self.shape(bn))));
            }
        }
        let mut out = vec![0.0f32; b * dout];
        k::matmul_nt(self.value(input), b, din, self.value(weight), dout, &mut out);
        if let Some(bn) = bias {
            let bv = self.value(bn).to_vec();
            for r in 0..b {
                for (o, &bvj) in out[r * dout..(r + 1) * dout].iter_mut().zip(&bv) {
                    *o += bvj;
                }
            }
        }
        let ng = self.node(input).needs_grad
            || self.node(weight).needs_grad
            || bias.map(|bn| self.node(bn).needs_grad).unwrap_or(false);
        Ok(self.push(Op::Linear { input, weight, bias }, vec![b, dout], out, ng))
    }

    /// Batch normalization over the channel axis. `input` is [N,C,H,W] or
    /// [N,C]; `running` is a [2,C] tensor (row 0 mean, row 1 variance),
    /// updated in place in training mode with the unbiased batch variance.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &mut Tensor,
        training: bool,
        momentum: f32,
        eps: f32,
    ) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let (n, c, s) = match ishape.len() {
            2 => (ishape[0], ishape[1], 1),
            4 => (ishape[0], ishape[1], ishape[2] * ishape[3]),
            _ => return Err(Error::Dim(format!("batchnorm expects 2-d or 4-d input, got {ishape:?}"))),
        };
        if eps <= 0.0 {
            return Err(Error::Config("batchnorm eps must be positive".into()));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dim(format!(
                "batchnorm affine shapes {:?}/{:?} vs {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if running.shape() != [2, c] {
            return Err(Error::Dim(format!("batchnorm running stats shape {:?} vs [2,{c}]", running.shape())));
        }
        let m = n * s;
        if training && m < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batchnorm in training mode needs at least 2 values per channel, got {m}"
            )));
        }
        let (mean, var): (Vec<f64>, Vec<f64>) = if training {
            let (mean, var) = k::channel_stats(self.value(input), n, c, s);
            let rs = running.data_mut();
            for ch in 0..c {
                let unbiased = if m > 1 { var[ch] * m as f64 / (m as f64 - 1.0) } else { var[ch] };
                rs[ch] = (1.0 - momentum) * rs[ch] + momentum * mean[ch] as f32;
                rs[c + ch] = (1.0 - momentum) * rs[c + ch] + momentum * unbiased as f32;
            }
            (mean, var)
        } else {
            let rs = running.data();
            (
                rs[..c].iter().map(|&v| v as f64).collect(),
                rs[c..].iter().map(|&v| v as f64).collect(),
            )
        };
        let numel = n * c * s;
        let mut out = vec![0.0f32; numel];
        let mut xhat = vec![0.0f32; numel];
        let mut inv_std = vec![0.0f32; c];
        k::bn_apply(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            &mean,
            &var,
            n,
            c,
            s,
            eps,
            &mut out,
            &mut xhat,
            &mut inv_std,
        );
        let ng = self.node(input).needs_grad || self.node(gamma).needs_grad || self.node(beta).needs_grad;
        Ok(self.push(
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, training, channels: c, spatial: s },
            ishape,
            out,
            ng,
        ))
    }

    pub fn maxpool2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(Error::Dim(format!("maxpool2x2 expects 4-d input, got {ishape:?}")));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("maxpool2x2 needs even extents, got {h}x{w}")));
        }
        let mut out = vec![0.0f32; n * c * (h / 2) * (w / 2)];
        let mut argmax = vec![0u32; out.len()];
        k::maxpool2x2_forward(self.value(input), n, c, h, w, &mut out, &mut argmax);
        let ng = self.node(input).needs_grad;
        Ok(self.push(Op::MaxPool2x2 { input, argmax }, vec![n, c, h / 2, w / 2], out, ng))
    }

    pub fn upsample_nearest2x(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(Error::Dim(format!("upsample expects 4-d input, got {ishape:?}")));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0f32; n * c * oh * ow];
        let x = self.value(input);
        for bc in 0..n * c {
            let ibase = bc * h * w;
            let obase = bc * oh * ow;
            for y in 0..oh {
                for xw in 0..ow {
                    out[obase + y * ow + xw] = x[ibase + (y / 2) * w + xw / 2];
                }
            }
        }
        let ng = self.node(input).needs_grad;
        Ok(self.push(Op::UpsampleNearest2x(input), vec![n, c, oh, ow], out, ng))
    }

    /// Concatenate along `axis` (all other extents must agree).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Dim("concat of zero inputs".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Dim(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len() {
                return Err(Error::Dim(format!("concat rank mismatch: {first:?} vs {s:?}")));
            }
            for (d, (&a, &b)) in first.iter().zip(s).enumerate() {
                if d != axis && a != b {
                    return Err(Error::Dim(format!("concat extent mismatch at dim {d}: {first:?} vs {s:?}")));
                }
            }
            axis_total += s[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * axis_total * inner];
        let mut offset = 0usize;
        for &id in inputs {
            let extent = self.shape(id)[axis];
            let v = self.value(id);
            for o in 0..outer {
                let src = &v[o * extent * inner..(o + 1) * extent * inner];
                let dst_base = (o * axis_total + offset) * inner;
                out[dst_base..dst_base + extent * inner].copy_from_slice(src);
            }
            offset += extent;
        }
        let ng = inputs.iter().any(|&id| self.node(id).needs_grad);
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), axis }, oshape, out, ng))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        self.concat(inputs, 1)
    }

    /// Positionwise maximum over K same-shape inputs. Gradient routes to the
    /// argmax input; ties break to the lowest input index.
    pub fn elemwise_max_n(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::EmptyFusion);
        }
        let shape = self.shape(inputs[0]).to_vec();
        for &id in &inputs[1..] {
            if self.shape(id) != shape {
                return Err(Error::Dim(format!(
                    "elemwise_max_n shape mismatch: {:?} vs {:?}",
                    shape,
                    self.shape(id)
                )));
            }
        }
        let numel: usize = shape.iter().product();
        let mut out = self.value(inputs[0]).to_vec();
        let mut argmax = vec![0u32; numel];
        for (slot, &id) in inputs.iter().enumerate().skip(1) {
            let v = self.value(id);
            for i in 0..numel {
                if v[i] > out[i] {
                    out[i] = v[i];
                    argmax[i] = slot as u32;
                }
            }
        }
        let ng = inputs.iter().any(|&id| self.node(id).needs_grad);
        Ok(self.push(Op::ElemwiseMaxN { inputs: inputs.to_vec(), argmax }, shape, out, ng))
    }

    /// Spatial mean per (batch, channel): [B,C,H,W] -> [B,C].
    pub fn global_avgpool(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(Error::Dim(format!("global_avgpool expects 4-d input, got {ishape:?}")));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let s = h * w;
        let mut out = vec![0.0f32; n * c];
        let x = self.value(input);
        for bc in 0..n * c {
            let mut acc = 0.0f64;
            for &v in &x[bc * s..(bc + 1) * s] {
                acc += v as f64;
            }
            out[bc] = (acc / s as f64) as f32;
        }
        let ng = self.node(input).needs_grad;
        Ok(self.push(Op::GlobalAvgPool(input), vec![n, c], out, ng))
    }

    /// Per-pixel softmax over the channel axis of [B,C,H,W].
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(Error::Dim(format!("softmax_channels expects 4-d input, got {ishape:?}")));
        }
        let (n, c, s) = (ishape[0], ishape[1], ishape[2] * ishape[3]);
        if c < 2 {
            return Err(Error::Config(format!("softmax_channels needs at least 2 channels, got {c}")));
        }
        let mut out = vec![0.0f32; n * c * s];
        k::softmax_channels_forward(self.value(input), n, c, s, &mut out);
        let ng = self.node(input).needs_grad;
        Ok(self.push(Op::SoftmaxChannels(input), ishape, out, ng))
    }

    /// Row-wise L2 normalization of [rows, d]. Zero-norm rows are rejected.
    pub fn l2_normalize_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 2 {
            return Err(Error::Dim(format!("l2_normalize_rows expects 2-d input, got {ishape:?}")));
        }
        let (rows, d) = (ishape[0], ishape[1]);
        let mut out = vec![0.0f32; rows * d];
        let norms = k::l2_normalize_rows_forward(self.value(input), rows, d, &mut out);
        if let Some(r) = norms.iter().position(|&n| n < 1e-12) {
            return Err(Error::DegenerateProjection(format!("row {r} has zero norm")));
        }
        let ng = self.node(input).needs_grad;
        Ok(self.push(Op::L2NormalizeRows { input, norms }, ishape, out, ng))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let v = k::sum_all_f64(self.value(input)) as f32;
        let ng = self.node(input).needs_grad;
        self.push(Op::SumAll(input), vec![1], vec![v], ng)
    }

    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let n = self.numel(input);
        let v = (k::sum_all_f64(self.value(input)) / n as f64) as f32;
        let ng = self.node(input).needs_grad;
        self.push(Op::MeanAll(input), vec![1], vec![v], ng)
    }

    /// Sum over batch and spatial axes of [N,C,...]: result [C].
    pub fn sum_per_channel(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() < 2 {
            return Err(Error::Dim(format!("sum_per_channel expects rank >= 2, got {ishape:?}")));
        }
        let (n, c) = (ishape[0], ishape[1]);
        let s: usize = ishape[2..].iter().product();
        let x = self.value(input);
        let mut out = vec![0.0f32; c];
        for ch in 0..c {
            let mut acc = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * s;
                for &v in &x[base..base + s] {
                    acc += v as f64;
                }
            }
            out[ch] = acc as f32;
        }
        let ng = self.node(input).needs_grad;
        Ok(self.push(Op::SumPerChannel(input), vec![c], out, ng))
    }

    /// Row sums of [M,N]: result [M].
    pub fn sum_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 2 {
            return Err(Error::Dim(format!("sum_rows expects 2-d input, got {ishape:?}")));
        }
        let (m, n) = (ishape[0], ishape[1]);
        let x = self.value(input);
        let mut out = vec![0.0f32; m];
        for r in 0..m {
            let mut acc = 0.0f64;
            for &v in &x[r * n..(r + 1) * n] {
                acc += v as f64;
            }
            out[r] = acc as f32;
        }
        let ng = self.node(input).needs_grad;
        Ok(self.push(Op::SumRows(input), vec![m], out, ng))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate (+=) into leaf
    /// slots; repeated calls without fetching sum their contributions.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut scratch: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let g = match scratch[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut scratch);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                match &mut self.nodes[idx].acc_grad {
                    Some(acc) => {
                        for (a, &gi) in acc.iter_mut().zip(&g) {
                            *a += gi;
                        }
                    }
                    None => self.nodes[idx].acc_grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f32], scratch: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let add_to = |scratch: &mut [Option<Vec<f32>>], target: NodeId, contribution: Vec<f32>| {
            if !self.nodes[target.0].needs_grad {
                return;
            }
            match &mut scratch[target.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contribution) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(scratch, *a, g.to_vec());
                add_to(scratch, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                add_to(scratch, *a, g.to_vec());
                add_to(scratch, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                add_to(scratch, *a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect());
                add_to(scratch, *b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect());
            }
            Op::Div(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                add_to(scratch, *a, g.iter().zip(bv).map(|(&gi, &bi)| gi / bi).collect());
                add_to(
                    scratch,
                    *b,
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                        .collect(),
                );
            }
            Op::AddScalar(a) => add_to(scratch, *a, g.to_vec()),
            Op::MulScalar(a, s) => add_to(scratch, *a, g.iter().map(|&v| v * s).collect()),
            Op::PowScalar(a, p) => {
                // d(x^p)/dx = p * x^(p-1); for p == 0 the output is constant.
                if *p == 0.0 {
                    return;
                }
                let av = self.value(*a);
                add_to(
                    scratch,
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(&gi, &x)| gi * (*p as f64 * (x as f64).powf(*p as f64 - 1.0)) as f32)
                        .collect(),
                );
            }
            Op::Exp(a) => {
                let yv = &node.value;
                add_to(scratch, *a, g.iter().zip(yv).map(|(&gi, &y)| gi * y).collect());
            }
            Op::Ln(a) => {
                let av = self.value(*a);
                add_to(scratch, *a, g.iter().zip(av).map(|(&gi, &x)| gi / x).collect());
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                add_to(
                    scratch,
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(&gi, &x)| if x >= *lo && x <= *hi { gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                add_to(scratch, *a, g.iter().zip(av).map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 }).collect());
            }
            Op::Conv2d { input, weight, bias, dims } => {
                let need_x = self.nodes[input.0].needs_grad;
                let need_w = self.nodes[weight.0].needs_grad;
                let need_b = bias.map(|b| self.nodes[b.0].needs_grad).unwrap_or(false);
                let mut gx = if need_x { Some(vec![0.0f32; self.numel(*input)]) } else { None };
                let mut gw = if need_w { Some(vec![0.0f32; self.numel(*weight)]) } else { None };
                let mut gb = if need_b { Some(vec![0.0f32; dims.cout]) } else { None };
                k::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    dims,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    add_to(scratch, *input, gx);
                }
                if let Some(gw) = gw {
                    add_to(scratch, *weight, gw);
                }
                if let (Some(gb), Some(b)) = (gb, bias) {
                    add_to(scratch, *b, gb);
                }
            }
            Op::Linear { input, weight, bias } => {
                let ishape = self.shape(*input);
                let (b, din) = (ishape[0], ishape[1]);
                let dout = self.shape(*weight)[0];
                if self.nodes[input.0].needs_grad {
                    // g [B,Dout] @ W [Dout,Din]
                    let mut gx = vec![0.0f32; b * din];
                    k::matmul(g, b, dout, self.value(*weight), din, &mut gx);
                    add_to(scratch, *input, gx);
                }
                if self.nodes[weight.0].needs_grad {
                    // g^T [Dout,B] @ X [B,Din]
                    let mut gw = vec![0.0f32; dout * din];
                    k::matmul_tn(g, b, dout, self.value(*input), din, &mut gw);
                    add_to(scratch, *weight, gw);
                }
                if let Some(bn) = bias {
                    if self.nodes[bn.0].needs_grad {
                        let mut gb = vec![0.0f32; dout];
                        for r in 0..b {
                            for j in 0..dout {
                                gb[j] += g[r * dout + j];
                            }
                        }
                        add_to(scratch, *bn, gb);
                    }
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, training, channels, spatial } => {
                let n = self.shape(*input)[0];
                let need_x = self.nodes[input.0].needs_grad;
                let need_g = self.nodes[gamma.0].needs_grad;
                let need_b = self.nodes[beta.0].needs_grad;
                let mut gx = if need_x { Some(vec![0.0f32; self.numel(*input)]) } else { None };
                let mut gg = if need_g { Some(vec![0.0f32; *channels]) } else { None };
                let mut gb = if need_b { Some(vec![0.0f32; *channels]) } else { None };
                k::bn_backward(
                    g,
                    self.value(*gamma),
                    xhat,
                    inv_std,
                    n,
                    *channels,
                    *spatial,
                    *training,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    add_to(scratch, *input, gx);
                }
                if let Some(gg) = gg {
                    add_to(scratch, *gamma, gg);
                }
                if let Some(gb) = gb {
                    add_to(scratch, *beta, gb);
                }
            }
            Op::MaxPool2x2 { input, argmax } => {
                let mut gx = vec![0.0f32; self.numel(*input)];
                for (i, &src) in argmax.iter().enumerate() {
                    gx[src as usize] += g[i];
                }
                add_to(scratch, *input, gx);
            }
            Op::UpsampleNearest2x(input) => {
                let ishape = self.shape(*input);
                let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let (oh, ow) = (h * 2, w * 2);
                let mut gx = vec![0.0f32; n * c * h * w];
                for bc in 0..n * c {
                    let obase = bc * oh * ow;
                    let ibase = bc * h * w;
                    for y in 0..oh {
                        for x in 0..ow {
                            gx[ibase + (y / 2) * w + x / 2] += g[obase + y * ow + x];
                        }
                    }
                }
                add_to(scratch, *input, gx);
            }
            Op::Concat { inputs, axis } => {
                let oshape = &node.shape;
                let outer: usize = oshape[..*axis].iter().product();
                let inner: usize = oshape[*axis + 1..].iter().product();
                let axis_total = oshape[*axis];
                let mut offset = 0usize;
                for &id in inputs {
                    let extent = self.shape(id)[*axis];
                    if self.nodes[id.0].needs_grad {
                        let mut gi = vec![0.0f32; outer * extent * inner];
                        for o in 0..outer {
                            let src_base = (o * axis_total + offset) * inner;
                            gi[o * extent * inner..(o + 1) * extent * inner]
                                .copy_from_slice(&g[src_base..src_base + extent * inner]);
                        }
                        add_to(scratch, id, gi);
                    }
                    offset += extent;
                }
            }
            Op::ElemwiseMaxN { inputs, argmax } => {
                for (slot, &id) in inputs.iter().enumerate() {
                    if !self.nodes[id.0].needs_grad {
                        continue;
                    }
                    let mut gi = vec![0.0f32; g.len()];
                    for (i, &am) in argmax.iter().enumerate() {
                        if am as usize == slot {
                            gi[i] = g[i];
                        }
                    }
                    add_to(scratch, id, gi);
                }
            }
            Op::GlobalAvgPool(input) => {
                let ishape = self.shape(*input);
                let (n, c, s) = (ishape[0], ishape[1], ishape[2] * ishape[3]);
                let inv = 1.0 / s as f32;
                let mut gx = vec![0.0f32; n * c * s];
                for bc in 0..n * c {
                    let gv = g[bc] * inv;
                    gx[bc * s..(bc + 1) * s].iter_mut().for_each(|v| *v = gv);
                }
                add_to(scratch, *input, gx);
            }
            Op::SoftmaxChannels(input) => {
                let ishape = self.shape(*input);
                let (n, c, s) = (ishape[0], ishape[1], ishape[2] * ishape[3]);
                let mut gx = vec![0.0f32; n * c * s];
                k::softmax_channels_backward(&node.value, g, n, c, s, &mut gx);
                add_to(scratch, *input, gx);
            }
            Op::L2NormalizeRows { input, norms } => {
                let ishape = self.shape(*input);
                let (rows, d) = (ishape[0], ishape[1]);
                let mut gx = vec![0.0f32; rows * d];
                k::l2_normalize_rows_backward(&node.value, norms, g, rows, d, &mut gx);
                add_to(scratch, *input, gx);
            }
            Op::SumAll(input) => {
                add_to(scratch, *input, vec![g[0]; self.numel(*input)]);
            }
            Op::MeanAll(input) => {
                let n = self.numel(*input);
                add_to(scratch, *input, vec![g[0] / n as f32; n]);
            }
            Op::SumPerChannel(input) => {
                let ishape = self.shape(*input);
                let (n, c) = (ishape[0], ishape[1]);
                let s: usize = ishape[2..].iter().product();
                let mut gx = vec![0.0f32; n * c * s];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        gx[base..base + s].iter_mut().for_each(|v| *v = g[ch]);
                    }
                }
                add_to(scratch, *input, gx);
            }
            Op::SumRows(input) => {
                let ishape = self.shape(*input);
                let (m, n) = (ishape[0], ishape[1]);
                let mut gx = vec![0.0f32; m * n];
                for r in 0..m {
                    gx[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = g[r]);
                }
                add_to(scratch, *input, gx);
            }
        }
    }
}
