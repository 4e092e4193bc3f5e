//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] is a flat arena of nodes; builder methods compute values
//! eagerly and record enough context to run the backward sweep. Node indices
//! are already a topological order (inputs precede outputs), so backward is a
//! single reverse walk, deterministic by construction: accumulation order is
//! fixed by node index, never by hash iteration.
//!
//! Shape agreement is a programmer contract and panics at construction time.
//! Runtime failures ([`DiffError::NonScalarRoot`], [`DiffError::NonFiniteValue`])
//! are returned from [`Graph::backward`].

use std::rc::Rc;

use rand::Rng;

use crate::error::DiffError;
use crate::params::{GradBuffer, ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node in one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Saved forward context a backward rule may need (pool switches, im2col
/// buffers, sampling noise, custom-op scratch).
#[derive(Clone, Debug, Default)]
pub struct OpCtx<R: Real> {
    pub u32s: Vec<u32>,
    pub reals: Vec<R>,
}

impl<R: Real> OpCtx<R> {
    pub fn none() -> Self {
        Self { u32s: Vec::new(), reals: Vec::new() }
    }
}

/// Escape hatch for differentiable primitives defined outside this crate.
///
/// `forward` returns the output tensor plus whatever context `backward`
/// needs. `backward` is invoked once per input slot that requires gradient
/// and must *accumulate* into `grad_in`.
pub trait CustomOp<R: Real> {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<R>]) -> (Tensor<R>, OpCtx<R>);
    fn backward(
        &self,
        slot: usize,
        inputs: &[&Tensor<R>],
        output: &Tensor<R>,
        ctx: &OpCtx<R>,
        grad_out: &[R],
        grad_in: &mut [R],
    );
}

/// Added under the square root in `normalize` so the zero vector maps to
/// zero instead of NaN.
const NORM_EPS: f64 = 1e-12;

enum Op<R: Real> {
    Leaf,
    Param(ParamId),
    Add,
    Sub,
    Mul,
    AddScalar(R),
    MulScalar(R),
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    Slice { start: usize },
    Index(usize),
    Dot,
    Sum,
    Mean,
    Normalize { target: R },
    MatVec,
    Conv2d { pad: usize },
    BiasChan,
    MaxPool2,
    MeanPool2,
    Reshape,
    StSample { tau: R },
    Custom(Rc<dyn CustomOp<R>>),
}

impl<R: Real> Op<R> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::Slice { .. } => "slice",
            Op::Index(_) => "index",
            Op::Dot => "dot",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Normalize { .. } => "normalize",
            Op::MatVec => "matvec",
            Op::Conv2d { .. } => "conv2d",
            Op::BiasChan => "bias_chan",
            Op::MaxPool2 => "max_pool2",
            Op::MeanPool2 => "mean_pool2",
            Op::Reshape => "reshape",
            Op::StSample { .. } => "st_sample",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node<R: Real> {
    op: Op<R>,
    inputs: Vec<NodeId>,
    value: Tensor<R>,
    grad: Vec<R>,
    needs: bool,
    ctx: OpCtx<R>,
}

/// The tape. Build ops against it, call [`Graph::backward`] on a scalar
/// root, then read gradients off leaf/param nodes.
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<R>, inputs: Vec<NodeId>, value: Tensor<R>, ctx: OpCtx<R>) -> NodeId {
        let needs = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs),
        };
        self.nodes.push(Node { op, inputs, value, grad: Vec::new(), needs, ctx });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor<R> {
        &self.nodes[id.0].value
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        self.val(id)
    }

    /// Gradient of the last backward root w.r.t. this node. Empty slice if
    /// the node did not participate or backward has not run.
    pub fn grad(&self, id: NodeId) -> &[R] {
        &self.nodes[id.0].grad
    }

    /// Hard sample index recorded by a [`Graph::st_sample`] node.
    pub fn hard_index(&self, id: NodeId) -> usize {
        assert!(matches!(self.nodes[id.0].op, Op::StSample { .. }), "hard_index on non-sample node");
        self.nodes[id.0].ctx.u32s[0] as usize
    }

    // ---- leaves ------------------------------------------------------------

    /// Constant input; no gradient is tracked through it.
    pub fn input(&mut self, t: Tensor<R>) -> NodeId {
        self.push(Op::Leaf, vec![], t, OpCtx::none())
    }

    /// Input that participates in differentiation (for gradient checks).
    pub fn leaf_grad(&mut self, t: Tensor<R>) -> NodeId {
        let id = self.push(Op::Leaf, vec![], t, OpCtx::none());
        self.nodes[id.0].needs = true;
        id
    }

    /// Bind a parameter's current value into the graph. Prefer going through
    /// [`Binding`] so each parameter is bound at most once per graph.
    pub fn param(&mut self, ps: &ParamSet<R>, id: ParamId) -> NodeId {
        self.push(Op::Param(id), vec![], ps.get(id).clone(), OpCtx::none())
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) {
        assert_eq!(
            self.val(a).shape(),
            self.val(b).shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.val(a).shape(),
            self.val(b).shape()
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "add");
        let v: Vec<R> = self.val(a).iter().zip(self.val(b).iter()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), v);
        self.push(Op::Add, vec![a, b], t, OpCtx::none())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "sub");
        let v: Vec<R> = self.val(a).iter().zip(self.val(b).iter()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), v);
        self.push(Op::Sub, vec![a, b], t, OpCtx::none())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "mul");
        let v: Vec<R> = self.val(a).iter().zip(self.val(b).iter()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), v);
        self.push(Op::Mul, vec![a, b], t, OpCtx::none())
    }

    pub fn add_scalar(&mut self, a: NodeId, c: R) -> NodeId {
        let v: Vec<R> = self.val(a).iter().map(|&x| x + c).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), v);
        self.push(Op::AddScalar(c), vec![a], t, OpCtx::none())
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: R) -> NodeId {
        let v: Vec<R> = self.val(a).iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), v);
        self.push(Op::MulScalar(c), vec![a], t, OpCtx::none())
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v: Vec<R> = self.val(a).iter().map(|&x| x.max(R::ZERO)).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), v);
        self.push(Op::Relu, vec![a], t, OpCtx::none())
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v: Vec<R> = self.val(a).iter().map(|&x| x.tanh()).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), v);
        self.push(Op::Tanh, vec![a], t, OpCtx::none())
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v: Vec<R> = self.val(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), v);
        self.push(Op::Sigmoid, vec![a], t, OpCtx::none())
    }

    // ---- vector ops --------------------------------------------------------

    fn expect_rank1(&self, a: NodeId, op: &str) -> usize {
        let s = self.val(a).shape();
        assert_eq!(s.len(), 1, "{op}: expected rank-1 input, got shape {s:?}");
        s[0]
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let n = self.expect_rank1(a, "softmax");
        assert!(n > 0, "softmax: empty input");
        let x = self.val(a).data();
        let m = x.iter().fold(x[0], |acc, &v| acc.max(v));
        let e: Vec<R> = x.iter().map(|&v| (v - m).exp()).collect();
        let s: R = e.iter().copied().sum();
        let v: Vec<R> = e.iter().map(|&v| v / s).collect();
        let t = Tensor::new(vec![n], v);
        self.push(Op::Softmax, vec![a], t, OpCtx::none())
    }

    /// Contiguous sub-vector `[start, start+len)` of a rank-1 tensor.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let n = self.expect_rank1(a, "slice");
        assert!(start + len <= n, "slice [{start}, {}) out of bounds for length {n}", start + len);
        let v = self.val(a).data()[start..start + len].to_vec();
        self.push(Op::Slice { start }, vec![a], Tensor::from_vec(v), OpCtx::none())
    }

    /// Scalar element `a[i]` of a rank-1 tensor.
    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        let n = self.expect_rank1(a, "index");
        assert!(i < n, "index {i} out of bounds for length {n}");
        let v = self.val(a).data()[i];
        self.push(Op::Index(i), vec![a], Tensor::scalar(v), OpCtx::none())
    }

    /// Inner product of two equal-length rank-1 tensors; scalar output.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.expect_rank1(a, "dot");
        self.same_shape(a, b, "dot");
        let s = dot_lanes(self.val(a).data(), self.val(b).data());
        self.push(Op::Dot, vec![a, b], Tensor::scalar(s), OpCtx::none())
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: R = self.val(a).iter().copied().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s), OpCtx::none())
    }

    /// Mean of all elements; scalar output.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.val(a).len();
        assert!(n > 0, "mean: empty input");
        let s: R = self.val(a).iter().copied().sum();
        let m = s / R::from_f64(n as f64);
        self.push(Op::Mean, vec![a], Tensor::scalar(m), OpCtx::none())
    }

    /// Rescale a rank-1 tensor to Euclidean norm `target`.
    ///
    /// `y = target * a / sqrt(|a|^2 + eps)`; the epsilon keeps the zero
    /// vector at zero rather than NaN, at the cost of a slightly-short norm
    /// for inputs with |a| near `sqrt(eps)`.
    pub fn normalize(&mut self, a: NodeId, target: R) -> NodeId {
        self.expect_rank1(a, "normalize");
        let x = self.val(a).data();
        let ss: R = x.iter().map(|&v| v * v).sum();
        let r = R::ONE / (ss + R::from_f64(NORM_EPS)).sqrt();
        let v: Vec<R> = x.iter().map(|&v| v * target * r).collect();
        self.push(Op::Normalize { target }, vec![a], Tensor::from_vec(v), OpCtx::none())
    }

    /// `w [m,n] · x [n] -> [m]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let ws = self.val(w).shape();
        assert_eq!(ws.len(), 2, "matvec: weight must be rank 2, got {ws:?}");
        let (m, n) = (ws[0], ws[1]);
        let xn = self.expect_rank1(x, "matvec");
        assert_eq!(n, xn, "matvec: weight is [{m},{n}] but input has length {xn}");
        let wd = self.val(w).data();
        let xd = self.val(x).data();
        let mut out = vec![R::ZERO; m];
        for i in 0..m {
            out[i] = dot_lanes(&wd[i * n..][..n], xd);
        }
        self.push(Op::MatVec, vec![w, x], Tensor::from_vec(out), OpCtx::none())
    }

    // ---- image ops ---------------------------------------------------------

    /// 2-D convolution, stride 1, symmetric zero padding.
    /// `w [o,c,k,k] * x [c,h,w] -> [o, h+2p-k+1, w+2p-k+1]`.
    pub fn conv2d(&mut self, w: NodeId, x: NodeId, pad: usize) -> NodeId {
        let ws = self.val(w).shape().to_vec();
        let xs = self.val(x).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d: weight must be [o,c,k,k], got {ws:?}");
        assert_eq!(xs.len(), 3, "conv2d: input must be [c,h,w], got {xs:?}");
        let (o, c, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(kh, kw, "conv2d: kernel must be square, got {ws:?}");
        let k = kh;
        let (xc, h, wid) = (xs[0], xs[1], xs[2]);
        assert_eq!(c, xc, "conv2d: weight expects {c} channels, input has {xc}");
        assert!(h + 2 * pad >= k && wid + 2 * pad >= k, "conv2d: kernel larger than padded input");
        let oh = h + 2 * pad - k + 1;
        let ow = wid + 2 * pad - k + 1;
        let n = oh * ow;
        let rows = c * k * k;

        let mut cols = vec![R::ZERO; rows * n];
        im2col(self.val(x).data(), c, h, wid, k, pad, oh, ow, &mut cols);
        let mut out = vec![R::ZERO; o * n];
        mm_nn(o, rows, n, self.val(w).data(), &cols, &mut out);

        let t = Tensor::new(vec![o, oh, ow], out);
        self.push(Op::Conv2d { pad }, vec![w, x], t, OpCtx { u32s: Vec::new(), reals: cols })
    }

    /// Add a per-channel bias: `x [c,h,w] + b [c]`.
    pub fn bias_chan(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "bias_chan: input must be [c,h,w], got {xs:?}");
        let bn = self.expect_rank1(b, "bias_chan");
        assert_eq!(xs[0], bn, "bias_chan: {bn} biases for {} channels", xs[0]);
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let xd = self.val(x).data();
        let bd = self.val(b).data();
        let mut out = vec![R::ZERO; c * hw];
        for ch in 0..c {
            let bias = bd[ch];
            for (o, &v) in out[ch * hw..][..hw].iter_mut().zip(&xd[ch * hw..][..hw]) {
                *o = v + bias;
            }
        }
        self.push(Op::BiasChan, vec![x, b], Tensor::new(xs, out), OpCtx::none())
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "max_pool2: input must be [c,h,w], got {xs:?}");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: odd spatial dims {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.val(x).data();
        let mut out = vec![R::ZERO; c * oh * ow];
        let mut switches = vec![0u32; c * oh * ow];
        for ch in 0..c {
            let plane = &xd[ch * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = plane[(2 * oy) * w + 2 * ox];
                    let mut arg = 0u32;
                    for (s, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = plane[(2 * oy + dy) * w + 2 * ox + dx];
                        if v > best {
                            best = v;
                            arg = s as u32;
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = best;
                    switches[(ch * oh + oy) * ow + ox] = arg;
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out);
        self.push(Op::MaxPool2, vec![x], t, OpCtx { u32s: switches, reals: Vec::new() })
    }

    /// 2x2 mean pooling with stride 2; spatial dims must be even.
    pub fn mean_pool2(&mut self, x: NodeId) -> NodeId {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "mean_pool2: input must be [c,h,w], got {xs:?}");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "mean_pool2: odd spatial dims {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.val(x).data();
        let quarter = R::from_f64(0.25);
        let mut out = vec![R::ZERO; c * oh * ow];
        for ch in 0..c {
            let plane = &xd[ch * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let s = plane[(2 * oy) * w + 2 * ox]
                        + plane[(2 * oy) * w + 2 * ox + 1]
                        + plane[(2 * oy + 1) * w + 2 * ox]
                        + plane[(2 * oy + 1) * w + 2 * ox + 1];
                    out[(ch * oh + oy) * ow + ox] = s * quarter;
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out);
        self.push(Op::MeanPool2, vec![x], t, OpCtx::none())
    }

    /// View under a new shape with the same element count.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        assert_eq!(
            numel(&shape),
            self.val(a).len(),
            "reshape: {:?} -> {shape:?}",
            self.val(a).shape()
        );
        let t = Tensor::new(shape, self.val(a).data().to_vec());
        self.push(Op::Reshape, vec![a], t, OpCtx::none())
    }

    // ---- sampling ----------------------------------------------------------

    /// Straight-through categorical sample at temperature `tau`.
    ///
    /// Forward emits the hard one-hot `argmax(logits + g)` with Gumbel noise
    /// `g`; backward applies the gradient of the relaxed
    /// `softmax((logits + g)/tau)` instead, so sampling stays differentiable.
    pub fn st_sample(&mut self, logits: NodeId, tau: R, rng: &mut impl Rng) -> NodeId {
        let n = self.expect_rank1(logits, "st_sample");
        assert!(n > 0, "st_sample: empty logits");
        assert!(tau > R::ZERO, "st_sample: tau must be positive");
        let noise: Vec<R> = (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>().max(1e-12);
                R::from_f64(-(-u.ln()).ln())
            })
            .collect();
        let ld = self.val(logits).data();
        let mut best = 0usize;
        let mut bestv = ld[0] + noise[0];
        for i in 1..n {
            let v = ld[i] + noise[i];
            if v > bestv {
                bestv = v;
                best = i;
            }
        }
        let mut onehot = vec![R::ZERO; n];
        onehot[best] = R::ONE;
        let t = Tensor::from_vec(onehot);
        self.push(
            Op::StSample { tau },
            vec![logits],
            t,
            OpCtx { u32s: vec![best as u32], reals: noise },
        )
    }

    /// Apply a [`CustomOp`].
    pub fn custom(&mut self, op: Rc<dyn CustomOp<R>>, inputs: &[NodeId]) -> NodeId {
        let tensors: Vec<&Tensor<R>> = inputs.iter().map(|i| self.val(*i)).collect();
        let (value, ctx) = op.forward(&tensors);
        self.push(Op::Custom(op), inputs.to_vec(), value, ctx)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar root. Populates gradients on every
    /// participating node; constants and unused parameters keep zero/empty
    /// gradients.
    pub fn backward(&mut self, root: NodeId) -> Result<(), DiffError> {
        let rv = self.val(root);
        if rv.len() != 1 {
            return Err(DiffError::NonScalarRoot { shape: rv.shape().to_vec() });
        }
        if !rv.item().is_finite() {
            // Walk forward to name the first op that went non-finite.
            for node in &self.nodes[..=root.0] {
                if node.value.iter().any(|v| !v.is_finite()) {
                    return Err(DiffError::NonFiniteValue { op: node.op.name().to_string() });
                }
            }
            return Err(DiffError::NonFiniteValue { op: self.nodes[root.0].op.name().to_string() });
        }

        for node in &mut self.nodes {
            node.grad.clear();
        }
        let rlen = self.nodes[root.0].value.len();
        self.nodes[root.0].grad = vec![R::ZERO; rlen];
        self.nodes[root.0].grad[0] = R::ONE;

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs || self.nodes[id].grad.is_empty() {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    /// Ensure a node's grad buffer exists (zero-filled) and return it by take.
    fn take_grad(&mut self, id: usize) -> Vec<R> {
        if self.nodes[id].grad.is_empty() {
            let n = self.nodes[id].value.len();
            self.nodes[id].grad = vec![R::ZERO; n];
        }
        std::mem::take(&mut self.nodes[id].grad)
    }

    fn propagate(&mut self, id: usize) {
        let gout = std::mem::take(&mut self.nodes[id].grad);
        let inputs: Vec<NodeId> = self.nodes[id].inputs.clone();
        for slot in 0..inputs.len() {
            let inp = inputs[slot].0;
            if !self.nodes[inp].needs {
                continue;
            }
            let mut gin = self.take_grad(inp);
            self.accumulate_slot(id, slot, &gout, &mut gin);
            self.nodes[inp].grad = gin;
        }
        self.nodes[id].grad = gout;
    }

    /// Add d(root)/d(input[slot]) contributions of node `id` into `gin`.
    fn accumulate_slot(&self, id: usize, slot: usize, gout: &[R], gin: &mut [R]) {
        let node = &self.nodes[id];
        let in_val = |s: usize| self.nodes[node.inputs[s].0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves have no inputs"),
            Op::Add => {
                for (g, &go) in gin.iter_mut().zip(gout) {
                    *g += go;
                }
            }
            Op::Sub => {
                if slot == 0 {
                    for (g, &go) in gin.iter_mut().zip(gout) {
                        *g += go;
                    }
                } else {
                    for (g, &go) in gin.iter_mut().zip(gout) {
                        *g -= go;
                    }
                }
            }
            Op::Mul => {
                let other = in_val(1 - slot);
                for ((g, &go), &ov) in gin.iter_mut().zip(gout).zip(other) {
                    *g += go * ov;
                }
            }
            Op::AddScalar(_) => {
                for (g, &go) in gin.iter_mut().zip(gout) {
                    *g += go;
                }
            }
            Op::MulScalar(c) => {
                for (g, &go) in gin.iter_mut().zip(gout) {
                    *g += go * *c;
                }
            }
            Op::Relu => {
                for ((g, &go), &y) in gin.iter_mut().zip(gout).zip(node.value.iter()) {
                    if y > R::ZERO {
                        *g += go;
                    }
                }
            }
            Op::Tanh => {
                for ((g, &go), &y) in gin.iter_mut().zip(gout).zip(node.value.iter()) {
                    *g += go * (R::ONE - y * y);
                }
            }
            Op::Sigmoid => {
                for ((g, &go), &y) in gin.iter_mut().zip(gout).zip(node.value.iter()) {
                    *g += go * y * (R::ONE - y);
                }
            }
            Op::Softmax => {
                let y = node.value.data();
                let mut s = R::ZERO;
                for (&go, &yv) in gout.iter().zip(y) {
                    s += go * yv;
                }
                for ((g, &go), &yv) in gin.iter_mut().zip(gout).zip(y) {
                    *g += yv * (go - s);
                }
            }
            Op::Slice { start } => {
                for (g, &go) in gin[*start..*start + gout.len()].iter_mut().zip(gout) {
                    *g += go;
                }
            }
            Op::Index(i) => {
                gin[*i] += gout[0];
            }
            Op::Dot => {
                let other = in_val(1 - slot);
                let go = gout[0];
                for (g, &ov) in gin.iter_mut().zip(other) {
                    *g += go * ov;
                }
            }
            Op::Sum => {
                let go = gout[0];
                for g in gin.iter_mut() {
                    *g += go;
                }
            }
            Op::Mean => {
                let go = gout[0] / R::from_f64(gin.len() as f64);
                for g in gin.iter_mut() {
                    *g += go;
                }
            }
            Op::Normalize { target } => {
                // y = t*a*r with r = (|a|^2 + eps)^{-1/2}:
                // dL/da_j = t*r*g_j - t*r^3*a_j*(g.a)
                let a = in_val(0);
                let mut ss = R::ZERO;
                let mut ga = R::ZERO;
                for (&av, &go) in a.iter().zip(gout) {
                    ss += av * av;
                    ga += go * av;
                }
                let r = R::ONE / (ss + R::from_f64(NORM_EPS)).sqrt();
                let t = *target;
                let c = t * r * r * r * ga;
                for ((g, &go), &av) in gin.iter_mut().zip(gout).zip(a.iter()) {
                    *g += t * r * go - c * av;
                }
            }
            Op::MatVec => {
                let ws = self.nodes[node.inputs[0].0].value.shape();
                let (m, n) = (ws[0], ws[1]);
                if slot == 0 {
                    let x = in_val(1);
                    for i in 0..m {
                        let gi = gout[i];
                        if gi == R::ZERO {
                            continue;
                        }
                        for (g, &xv) in gin[i * n..][..n].iter_mut().zip(x) {
                            *g += gi * xv;
                        }
                    }
                } else {
                    let w = in_val(0);
                    for i in 0..m {
                        let gi = gout[i];
                        if gi == R::ZERO {
                            continue;
                        }
                        for (g, &wv) in gin.iter_mut().zip(&w[i * n..][..n]) {
                            *g += gi * wv;
                        }
                    }
                }
            }
            Op::Conv2d { pad } => {
                let ws = self.nodes[node.inputs[0].0].value.shape();
                let xs = self.nodes[node.inputs[1].0].value.shape();
                let (o, c, k) = (ws[0], ws[1], ws[2]);
                let (h, w) = (xs[1], xs[2]);
                let os = node.value.shape();
                let (oh, ow) = (os[1], os[2]);
                let n = oh * ow;
                let rows = c * k * k;
                let cols = &node.ctx.reals;
                if slot == 0 {
                    // dW[o, r] += sum_n gout[o, n] * cols[r, n]
                    mm_abt(o, rows, n, gout, cols, gin);
                } else {
                    // dcols = W^T * gout, then scatter back through im2col.
                    let wd = in_val(0);
                    let mut dcols = vec![R::ZERO; rows * n];
                    mm_atb(rows, n, o, wd, gout, &mut dcols);
                    col2im_add(&dcols, c, h, w, k, *pad, oh, ow, gin);
                }
            }
            Op::BiasChan => {
                let xs = self.nodes[node.inputs[0].0].value.shape();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                if slot == 0 {
                    for (g, &go) in gin.iter_mut().zip(gout) {
                        *g += go;
                    }
                } else {
                    for ch in 0..c {
                        let mut s = R::ZERO;
                        for &go in &gout[ch * hw..][..hw] {
                            s += go;
                        }
                        gin[ch] += s;
                    }
                }
            }
            Op::MaxPool2 => {
                let os = node.value.shape();
                let (c, oh, ow) = (os[0], os[1], os[2]);
                let (h, w) = (oh * 2, ow * 2);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let idx = (ch * oh + oy) * ow + ox;
                            let sw = node.ctx.u32s[idx] as usize;
                            let (dy, dx) = (sw / 2, sw % 2);
                            gin[ch * h * w + (2 * oy + dy) * w + 2 * ox + dx] += gout[idx];
                        }
                    }
                }
            }
            Op::MeanPool2 => {
                let os = node.value.shape();
                let (c, oh, ow) = (os[0], os[1], os[2]);
                let (h, w) = (oh * 2, ow * 2);
                let quarter = R::from_f64(0.25);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = gout[(ch * oh + oy) * ow + ox] * quarter;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                gin[ch * h * w + (2 * oy + dy) * w + 2 * ox + dx] += go;
                            }
                        }
                    }
                }
            }
            Op::Reshape => {
                for (g, &go) in gin.iter_mut().zip(gout) {
                    *g += go;
                }
            }
            Op::StSample { tau } => {
                // Straight-through: differentiate the relaxed sample
                // y = softmax((logits + g)/tau) in place of the hard one-hot.
                let logits = in_val(0);
                let noise = &node.ctx.reals;
                let n = logits.len();
                let mut z: Vec<R> = (0..n).map(|i| (logits[i] + noise[i]) / *tau).collect();
                let m = z.iter().fold(z[0], |acc, &v| acc.max(v));
                let mut s = R::ZERO;
                for v in z.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in z.iter_mut() {
                    *v = *v / s;
                }
                let mut dotp = R::ZERO;
                for (&go, &yv) in gout.iter().zip(&z) {
                    dotp += go * yv;
                }
                for ((g, &go), &yv) in gin.iter_mut().zip(gout).zip(&z) {
                    *g += yv * (go - dotp) / *tau;
                }
            }
            Op::Custom(op) => {
                let tensors: Vec<&Tensor<R>> = node.inputs.iter().map(|i| self.nodes[i.0].value_ref()).collect();
                op.backward(slot, &tensors, &node.value, &node.ctx, gout, gin);
            }
        }
    }

    /// Per-parameter gradients of the last backward, in slot order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[R])> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Param(pid) if !n.grad.is_empty() => Some((pid, n.grad.as_slice())),
            _ => None,
        })
    }
}

impl<R: Real> Node<R> {
    fn value_ref(&self) -> &Tensor<R> {
        &self.value
    }
}

/// Caches one graph node per bound parameter so a parameter used by several
/// layers contributes a single leaf (and a single gradient buffer).
pub struct Binding {
    slots: Vec<Option<NodeId>>,
}

impl Binding {
    pub fn new<R: Real>(ps: &ParamSet<R>) -> Self {
        Self { slots: vec![None; ps.len()] }
    }

    /// Node for a parameter, binding it on first use.
    pub fn node<R: Real>(&mut self, g: &mut Graph<R>, ps: &ParamSet<R>, id: ParamId) -> NodeId {
        match self.slots[id.index()] {
            Some(n) => n,
            None => {
                let n = g.param(ps, id);
                self.slots[id.index()] = Some(n);
                n
            }
        }
    }

    /// Fold this graph's parameter gradients into a [`GradBuffer`].
    pub fn accumulate_grads<R: Real>(&self, g: &Graph<R>, out: &mut GradBuffer<R>) {
        for (i, slot) in self.slots.iter().enumerate() {
            if let Some(n) = slot {
                let gr = g.grad(*n);
                if !gr.is_empty() {
                    out.accumulate(ParamId(i), gr);
                }
            }
        }
    }
}

fn stable_sigmoid<R: Real>(x: R) -> R {
    if x >= R::ZERO {
        R::ONE / (R::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::ONE + e)
    }
}

// ---- conv kernels ----------------------------------------------------------

/// Unfold `x [c,h,w]` into `cols [c*k*k, oh*ow]` for stride-1 convolution
/// with symmetric zero padding. `cols` must be zero-initialised.
fn im2col<R: Real>(
    x: &[R],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [R],
) {
    let n = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * n;
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad).saturating_sub(kx).min(ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ix_lo = ox_lo + kx - pad;
                    let len = ox_hi - ox_lo;
                    let src = &plane[iy as usize * w + ix_lo..][..len];
                    cols[row + oy * ow + ox_lo..][..len].copy_from_slice(src);
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col`]: fold `dcols` back into `dx [c,h,w]`.
fn col2im_add<R: Real>(
    dcols: &[R],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [R],
) {
    let n = oh * ow;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * n;
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad).saturating_sub(kx).min(ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ix_lo = ox_lo + kx - pad;
                    let len = ox_hi - ox_lo;
                    let src = &dcols[row + oy * ow + ox_lo..][..len];
                    for (d, &s) in plane[iy as usize * w + ix_lo..][..len].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c [m,n] += a [m,k] · b [k,n]`, all row-major.
fn mm_nn<R: Real>(m: usize, k: usize, n: usize, a: &[R], b: &[R], c: &mut [R]) {
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        let arow = &a[i * k..][..k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..][..n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// Inner product with eight independent accumulator lanes. A single serial
/// accumulator chains every add through one register and blocks
/// vectorization under strict float semantics; independent lanes let the
/// compiler keep the loop wide. The lane-wise order is fixed, so results
/// stay bit-reproducible run to run.
fn dot_lanes<R: Real>(a: &[R], b: &[R]) -> R {
    const LANES: usize = 8;
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [R::ZERO; LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let ao = &a[c * LANES..][..LANES];
        let bo = &b[c * LANES..][..LANES];
        for l in 0..LANES {
            acc[l] += ao[l] * bo[l];
        }
    }
    let mut s = R::ZERO;
    for &v in &acc {
        s += v;
    }
    for i in chunks * LANES..n {
        s += a[i] * b[i];
    }
    s
}

/// `c [m,n] += a [m,l] · b [n,l]^T` (row-dot-row form).
fn mm_abt<R: Real>(m: usize, n: usize, l: usize, a: &[R], b: &[R], c: &mut [R]) {
    for i in 0..m {
        let arow = &a[i * l..][..l];
        let crow = &mut c[i * n..][..n];
        for j in 0..n {
            let brow = &b[j * l..][..l];
            crow[j] += dot_lanes(arow, brow);
        }
    }
}

/// `c [m,n] += a [k,m]^T · b [k,n]` (axpy form over the shared leading dim).
fn mm_atb<R: Real>(m: usize, n: usize, k: usize, a: &[R], b: &[R], c: &mut [R]) {
    for kk in 0..k {
        let arow = &a[kk * m..][..m];
        let brow = &b[kk * n..][..n];
        for i in 0..m {
            let aik = arow[i];
            if aik == R::ZERO {
                continue;
            }
            let crow = &mut c[i * n..][..n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}
