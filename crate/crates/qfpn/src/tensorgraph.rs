//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Graphs are built eagerly: every operation computes its values immediately
//! and records a backward closure. [`backward`] walks the graph once in
//! reverse topological order, accumulating adjoints additively across
//! fan-out. The operator set is closed and minimal — exactly what the
//! segmentation model needs — with one deliberate broadcast case: `add` and
//! `mul` accept a rank-1 `[K]` operand against a `[B, K]` operand (used by
//! the gate's learnable scale/shift), and `broadcast_channelwise` spreads a
//! `[B, C]` map over space. There is no other broadcasting.
//!
//! Shape mismatches are programming errors and panic with a message naming
//! the offending operands. Everything is double precision.

use crate::qsim::{self, CircuitConfig, CircuitParams};
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::OnceLock;

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op_tag: &'static str,
    inputs: Vec<Node>,
    backward: Option<BackwardFn>,
}

/// One tensor in the differentiation graph. Cloning is cheap and shares the
/// underlying storage, so parameters keep their identity across steps.
#[derive(Clone)]
pub struct Node {
    inner: Rc<RefCell<Inner>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Number of worker threads batch-parallel forward kernels may use.
/// Controlled by `QFPN_THREADS`; defaults to 1 so runs are maximally boring.
pub fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("QFPN_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&t| t >= 1)
            .unwrap_or(1)
    })
}

impl Node {
    fn new(
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        op_tag: &'static str,
        inputs: Vec<Node>,
        backward: Option<BackwardFn>,
    ) -> Node {
        assert_eq!(
            numel(&shape),
            values.len(),
            "{op_tag}: shape {shape:?} does not match {} values",
            values.len()
        );
        let grad = vec![0.0; values.len()];
        Node {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                values,
                grad,
                requires_grad,
                op_tag,
                inputs,
                backward,
            })),
        }
    }

    /// A node that never receives gradients (targets, fixed inputs).
    pub fn constant(shape: Vec<usize>, values: Vec<f64>) -> Node {
        Node::new(shape, values, false, "constant", vec![], None)
    }

    /// A trainable leaf; gradients accumulate here across backward passes
    /// until [`Node::zero_grad`].
    pub fn leaf(shape: Vec<usize>, values: Vec<f64>) -> Node {
        Node::new(shape, values, true, "leaf", vec![], None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        inputs: Vec<Node>,
        op_tag: &'static str,
        backward: BackwardFn,
    ) -> Node {
        let requires_grad = inputs.iter().any(Node::requires_grad);
        let bw = if requires_grad { Some(backward) } else { None };
        Node::new(shape, values, requires_grad, op_tag, inputs, bw)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    pub fn grad(&self) -> Vec<f64> {
        self.inner.borrow().grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn op_tag(&self) -> &'static str {
        self.inner.borrow().op_tag
    }

    /// The single value of a scalar node.
    pub fn scalar(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.values.len(), 1, "{}: not a scalar", inner.op_tag);
        inner.values[0]
    }

    /// Overwrites the stored values in place (optimizer updates).
    pub fn set_values(&self, values: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.values.len(), values.len(), "set_values length mismatch");
        inner.values.copy_from_slice(values);
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Scales the stored gradient in place (global-norm clipping).
    pub fn scale_grad(&self, factor: f64) {
        self.inner.borrow_mut().grad.iter_mut().for_each(|g| *g *= factor);
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        debug_assert_eq!(inner.grad.len(), contrib.len());
        for (g, c) in inner.grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    fn ptr(&self) -> *const RefCell<Inner> {
        Rc::as_ptr(&self.inner)
    }
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Node")
            .field("op", &inner.op_tag)
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

/// Runs reverse-mode accumulation from a scalar loss. Every reachable node
/// that requires gradients receives d(loss)/d(node); fan-out sums. Each
/// node's backward closure fires exactly once and is dropped afterwards.
pub fn backward(loss: &Node) {
    {
        let mut inner = loss.inner.borrow_mut();
        assert_eq!(
            inner.values.len(),
            1,
            "backward: loss node '{}' has shape {:?}, expected a scalar",
            inner.op_tag,
            inner.shape
        );
        inner.grad[0] += 1.0;
    }
    let order = topo_order(loss);
    for node in order.iter().rev() {
        if !node.requires_grad() {
            continue;
        }
        let (grad, bw) = {
            let mut inner = node.inner.borrow_mut();
            (inner.grad.clone(), inner.backward.take())
        };
        if let Some(bw) = bw {
            bw(&grad);
        }
    }
}

fn topo_order(root: &Node) -> Vec<Node> {
    let mut visited: HashSet<*const RefCell<Inner>> = HashSet::new();
    let mut order = Vec::new();
    // (node, children already expanded)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.ptr()) {
            continue;
        }
        stack.push((node.clone(), true));
        let inputs = node.inner.borrow().inputs.clone();
        for input in inputs {
            if !visited.contains(&input.ptr()) {
                stack.push((input, false));
            }
        }
    }
    order
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

fn broadcast_kind(op: &str, a: &[usize], b: &[usize]) -> bool {
    // Returns true when b is a rank-1 vector broadcast across the rows of a.
    if a == b {
        false
    } else if b.len() == 1 && a.len() == 2 && a[1] == b[0] {
        true
    } else {
        panic!("{op}: incompatible shapes {a:?} and {b:?}");
    }
}

/// Elementwise sum. `rhs` may be a `[K]` vector against a `[B, K]` operand.
pub fn add(lhs: &Node, rhs: &Node) -> Node {
    let (sa, sb) = (lhs.shape(), rhs.shape());
    let row_broadcast = broadcast_kind("add", &sa, &sb);
    let av = lhs.values();
    let bv = rhs.values();
    let out: Vec<f64> = if row_broadcast {
        let k = sb[0];
        av.iter().enumerate().map(|(i, a)| a + bv[i % k]).collect()
    } else {
        av.iter().zip(&bv).map(|(a, b)| a + b).collect()
    };
    let (l, r) = (lhs.clone(), rhs.clone());
    Node::from_op(
        sa,
        out,
        vec![lhs.clone(), rhs.clone()],
        "add",
        Box::new(move |go| {
            l.accumulate_grad(go);
            if row_broadcast {
                let k = r.values().len();
                let mut rb = vec![0.0; k];
                for (i, g) in go.iter().enumerate() {
                    rb[i % k] += g;
                }
                r.accumulate_grad(&rb);
            } else {
                r.accumulate_grad(go);
            }
        }),
    )
}

/// Elementwise difference, same operand rules as [`add`].
pub fn sub(lhs: &Node, rhs: &Node) -> Node {
    add(lhs, &scalar_mul(rhs, -1.0))
}

/// Elementwise product. `rhs` may be a `[K]` vector against `[B, K]`.
pub fn mul(lhs: &Node, rhs: &Node) -> Node {
    let (sa, sb) = (lhs.shape(), rhs.shape());
    let row_broadcast = broadcast_kind("mul", &sa, &sb);
    let av = lhs.values();
    let bv = rhs.values();
    let out: Vec<f64> = if row_broadcast {
        let k = sb[0];
        av.iter().enumerate().map(|(i, a)| a * bv[i % k]).collect()
    } else {
        av.iter().zip(&bv).map(|(a, b)| a * b).collect()
    };
    let (l, r) = (lhs.clone(), rhs.clone());
    Node::from_op(
        sa,
        out,
        vec![lhs.clone(), rhs.clone()],
        "mul",
        Box::new(move |go| {
            let av = l.values();
            let bv = r.values();
            if row_broadcast {
                let k = bv.len();
                let da: Vec<f64> = go.iter().enumerate().map(|(i, g)| g * bv[i % k]).collect();
                let mut db = vec![0.0; k];
                for (i, g) in go.iter().enumerate() {
                    db[i % k] += g * av[i];
                }
                l.accumulate_grad(&da);
                r.accumulate_grad(&db);
            } else {
                let da: Vec<f64> = go.iter().zip(&bv).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = go.iter().zip(&av).map(|(g, a)| g * a).collect();
                l.accumulate_grad(&da);
                r.accumulate_grad(&db);
            }
        }),
    )
}

pub fn scalar_mul(x: &Node, c: f64) -> Node {
    let out = x.values().iter().map(|v| v * c).collect();
    let xin = x.clone();
    Node::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        "scalar_mul",
        Box::new(move |go| {
            let dx: Vec<f64> = go.iter().map(|g| g * c).collect();
            xin.accumulate_grad(&dx);
        }),
    )
}

fn unary(
    x: &Node,
    op_tag: &'static str,
    f: impl Fn(f64) -> f64,
    dfdy: impl Fn(f64, f64) -> f64 + 'static,
) -> Node {
    let xv = x.values();
    let out: Vec<f64> = xv.iter().map(|&v| f(v)).collect();
    let saved_in = xv;
    let saved_out = out.clone();
    let xin = x.clone();
    Node::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        op_tag,
        Box::new(move |go| {
            let dx: Vec<f64> = go
                .iter()
                .zip(saved_in.iter().zip(&saved_out))
                .map(|(g, (xi, yi))| g * dfdy(*xi, *yi))
                .collect();
            xin.accumulate_grad(&dx);
        }),
    )
}

pub fn tanh(x: &Node) -> Node {
    unary(x, "tanh", f64::tanh, |_, y| 1.0 - y * y)
}

pub fn sigmoid(x: &Node) -> Node {
    unary(x, "sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
}

pub fn relu(x: &Node) -> Node {
    unary(x, "relu", |v| v.max(0.0), |xi, _| if xi > 0.0 { 1.0 } else { 0.0 })
}

/// Numerically safe logistic function.
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean over every element, yielding a scalar. Reduction convenience for
/// losses, diagnostics, and gradient checks.
pub fn mean_all(x: &Node) -> Node {
    let xv = x.values();
    let n = xv.len() as f64;
    let total: f64 = xv.iter().sum();
    let xin = x.clone();
    Node::from_op(
        vec![1],
        vec![total / n],
        vec![x.clone()],
        "mean_all",
        Box::new(move |go| {
            let g = go[0] / n;
            let dx = vec![g; n as usize];
            xin.accumulate_grad(&dx);
        }),
    )
}

// ---------------------------------------------------------------------------
// Structural operations
// ---------------------------------------------------------------------------

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat(parts: &[&Node], axis: usize) -> Node {
    assert!(!parts.is_empty(), "concat: no operands");
    let first = parts[0].shape();
    assert!(axis < first.len(), "concat: axis {axis} out of rank {}", first.len());
    let mut axis_total = 0;
    for p in parts {
        let s = p.shape();
        assert_eq!(s.len(), first.len(), "concat: rank mismatch {s:?} vs {first:?}");
        for (d, (a, b)) in s.iter().zip(&first).enumerate() {
            if d != axis {
                assert_eq!(a, b, "concat: dim {d} mismatch {s:?} vs {first:?}");
            }
        }
        axis_total += s[axis];
    }
    let mut out_shape = first.clone();
    out_shape[axis] = axis_total;

    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out = vec![0.0; numel(&out_shape)];
    let mut offsets = Vec::with_capacity(parts.len());
    let mut offset = 0;
    for p in parts {
        let s = p.shape();
        let v = p.values();
        let span = s[axis] * inner;
        for o in 0..outer {
            let dst = o * axis_total * inner + offset * inner;
            let src = o * span;
            out[dst..dst + span].copy_from_slice(&v[src..src + span]);
        }
        offsets.push((offset, s[axis]));
        offset += s[axis];
    }

    let owned: Vec<Node> = parts.iter().map(|p| (*p).clone()).collect();
    let captured = owned.clone();
    Node::from_op(
        out_shape,
        out,
        owned,
        "concat",
        Box::new(move |go| {
            for (node, (off, len)) in captured.iter().zip(&offsets) {
                let span = len * inner;
                let mut dg = vec![0.0; outer * span];
                for o in 0..outer {
                    let src = o * axis_total * inner + off * inner;
                    dg[o * span..(o + 1) * span].copy_from_slice(&go[src..src + span]);
                }
                node.accumulate_grad(&dg);
            }
        }),
    )
}

/// Spatial mean per channel: `[B, C, H, W]` → `[B, C]`.
pub fn global_avg_pool(x: &Node) -> Node {
    let s = x.shape();
    assert_eq!(s.len(), 4, "global_avg_pool: expected [B,C,H,W], got {s:?}");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let area = h * w;
    let xv = x.values();
    let mut out = vec![0.0; b * c];
    for bc in 0..b * c {
        let base = bc * area;
        out[bc] = xv[base..base + area].iter().sum::<f64>() / area as f64;
    }
    let xin = x.clone();
    Node::from_op(
        vec![b, c],
        out,
        vec![x.clone()],
        "global_avg_pool",
        Box::new(move |go| {
            let mut dx = vec![0.0; b * c * area];
            for bc in 0..b * c {
                let g = go[bc] / area as f64;
                dx[bc * area..(bc + 1) * area].iter_mut().for_each(|v| *v = g);
            }
            xin.accumulate_grad(&dx);
        }),
    )
}

/// Spreads a `[B, C]` gate over space: `out[b,c,y,x] = g[b,c]`.
pub fn broadcast_channelwise(g: &Node, h: usize, w: usize) -> Node {
    let s = g.shape();
    assert_eq!(s.len(), 2, "broadcast_channelwise: expected [B,C], got {s:?}");
    let (b, c) = (s[0], s[1]);
    let area = h * w;
    let gv = g.values();
    let mut out = vec![0.0; b * c * area];
    for bc in 0..b * c {
        out[bc * area..(bc + 1) * area].iter_mut().for_each(|v| *v = gv[bc]);
    }
    let gin = g.clone();
    Node::from_op(
        vec![b, c, h, w],
        out,
        vec![g.clone()],
        "broadcast_channelwise",
        Box::new(move |go| {
            let mut dg = vec![0.0; b * c];
            for bc in 0..b * c {
                dg[bc] = go[bc * area..(bc + 1) * area].iter().sum();
            }
            gin.accumulate_grad(&dg);
        }),
    )
}

/// Nearest-neighbor 2x upsampling: `[B, C, H, W]` → `[B, C, 2H, 2W]`.
pub fn upsample_nearest2x(x: &Node) -> Node {
    let s = x.shape();
    assert_eq!(s.len(), 4, "upsample_nearest2x: expected [B,C,H,W], got {s:?}");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let xv = x.values();
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let src = bc * h * w;
        let dst = bc * oh * ow;
        for y in 0..oh {
            for xcol in 0..ow {
                out[dst + y * ow + xcol] = xv[src + (y / 2) * w + xcol / 2];
            }
        }
    }
    let xin = x.clone();
    Node::from_op(
        vec![b, c, oh, ow],
        out,
        vec![x.clone()],
        "upsample_nearest2x",
        Box::new(move |go| {
            let mut dx = vec![0.0; b * c * h * w];
            for bc in 0..b * c {
                let src = bc * oh * ow;
                let dst = bc * h * w;
                for y in 0..oh {
                    for xcol in 0..ow {
                        dx[dst + (y / 2) * w + xcol / 2] += go[src + y * ow + xcol];
                    }
                }
            }
            xin.accumulate_grad(&dx);
        }),
    )
}

/// 2x2 max pooling with stride 2; spatial dims must be even. Ties resolve to
/// the first element in scan order so gradients are deterministic.
pub fn maxpool2x(x: &Node) -> Node {
    let s = x.shape();
    assert_eq!(s.len(), 4, "maxpool2x: expected [B,C,H,W], got {s:?}");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2x: odd spatial dims {s:?}");
    let (oh, ow) = (h / 2, w / 2);
    let xv = x.values();
    let mut out = vec![0.0; b * c * oh * ow];
    let mut argmax = vec![0usize; b * c * oh * ow];
    for bc in 0..b * c {
        let src = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = src + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > best {
                            best = xv[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = bc * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    let xin = x.clone();
    let n_in = xv.len();
    Node::from_op(
        vec![b, c, oh, ow],
        out,
        vec![x.clone()],
        "maxpool2x",
        Box::new(move |go| {
            let mut dx = vec![0.0; n_in];
            for (g, &idx) in go.iter().zip(&argmax) {
                dx[idx] += g;
            }
            xin.accumulate_grad(&dx);
        }),
    )
}

/// Affine map `[B, In]` × `[Out, In]` (+ optional `[Out]` bias) → `[B, Out]`.
pub fn linear(x: &Node, weight: &Node, bias: Option<&Node>) -> Node {
    let sx = x.shape();
    let sw = weight.shape();
    assert_eq!(sx.len(), 2, "linear: input must be [B,In], got {sx:?}");
    assert_eq!(sw.len(), 2, "linear: weight must be [Out,In], got {sw:?}");
    assert_eq!(sx[1], sw[1], "linear: input {sx:?} vs weight {sw:?}");
    if let Some(bias) = bias {
        assert_eq!(bias.shape(), vec![sw[0]], "linear: bias shape mismatch");
    }
    let (b, n_in, n_out) = (sx[0], sx[1], sw[0]);
    let xv = x.values();
    let wv = weight.values();
    let bv = bias.map(Node::values);
    let mut out = vec![0.0; b * n_out];
    for row in 0..b {
        for o in 0..n_out {
            let mut acc = bv.as_ref().map_or(0.0, |bb| bb[o]);
            for i in 0..n_in {
                acc += xv[row * n_in + i] * wv[o * n_in + i];
            }
            out[row * n_out + o] = acc;
        }
    }
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(bias) = bias {
        inputs.push(bias.clone());
    }
    let xin = x.clone();
    let win = weight.clone();
    let bin = bias.cloned();
    Node::from_op(
        vec![b, n_out],
        out,
        inputs,
        "linear",
        Box::new(move |go| {
            let xv = xin.values();
            let wv = win.values();
            let mut dx = vec![0.0; b * n_in];
            let mut dw = vec![0.0; n_out * n_in];
            for row in 0..b {
                for o in 0..n_out {
                    let g = go[row * n_out + o];
                    for i in 0..n_in {
                        dx[row * n_in + i] += g * wv[o * n_in + i];
                        dw[o * n_in + i] += g * xv[row * n_in + i];
                    }
                }
            }
            xin.accumulate_grad(&dx);
            win.accumulate_grad(&dw);
            if let Some(bin) = &bin {
                let mut db = vec![0.0; n_out];
                for row in 0..b {
                    for o in 0..n_out {
                        db[o] += go[row * n_out + o];
                    }
                }
                bin.accumulate_grad(&db);
            }
        }),
    )
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> ConvDims {
    assert_eq!(input.len(), 4, "conv2d: input must be [B,Cin,H,W], got {input:?}");
    assert_eq!(weight.len(), 4, "conv2d: weight must be [Cout,Cin,k,k], got {weight:?}");
    assert_eq!(weight[2], weight[3], "conv2d: kernel must be square, got {weight:?}");
    let k = weight[2];
    assert!(k % 2 == 1, "conv2d: kernel size {k} must be odd");
    assert_eq!(
        input[1], weight[1],
        "conv2d: input channels {input:?} vs weight {weight:?}"
    );
    assert!(stride >= 1, "conv2d: stride must be >= 1");
    let span_h = input[2] + 2 * padding - k;
    let span_w = input[3] + 2 * padding - k;
    assert!(
        span_h % stride == 0 && span_w % stride == 0,
        "conv2d: non-integral output for input {input:?}, kernel {k}, stride {stride}, padding {padding}"
    );
    ConvDims {
        b: input[0],
        cin: input[1],
        h: input[2],
        w: input[3],
        cout: weight[0],
        k,
        stride,
        padding,
        oh: span_h / stride + 1,
        ow: span_w / stride + 1,
    }
}

fn conv_forward_sample(d: &ConvDims, xv: &[f64], wv: &[f64], bv: &[f64], out: &mut [f64]) {
    // xv is one sample [Cin,H,W]; out is one sample [Cout,OH,OW].
    for co in 0..d.cout {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let mut acc = bv[co];
                for ci in 0..d.cin {
                    let wbase = (co * d.cin + ci) * d.k * d.k;
                    let xbase = ci * d.h * d.w;
                    for ky in 0..d.k {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.k {
                            let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc += xv[xbase + iy as usize * d.w + ix as usize]
                                * wv[wbase + ky * d.k + kx];
                        }
                    }
                }
                out[(co * d.oh + oy) * d.ow + ox] = acc;
            }
        }
    }
}

/// 2D cross-correlation with square odd kernels. Output spatial size must be
/// exactly (H + 2·padding − k)/stride + 1; anything non-integral panics.
pub fn conv2d(input: &Node, weight: &Node, bias: &Node, stride: usize, padding: usize) -> Node {
    let d = conv_dims(&input.shape(), &weight.shape(), stride, padding);
    assert_eq!(bias.shape(), vec![d.cout], "conv2d: bias shape mismatch");

    let xv = input.values();
    let wv = weight.values();
    let bv = bias.values();
    let in_sample = d.cin * d.h * d.w;
    let out_sample = d.cout * d.oh * d.ow;
    let mut out = vec![0.0; d.b * out_sample];

    let threads = kernel_threads().min(d.b.max(1));
    if threads > 1 {
        std::thread::scope(|scope| {
            let mut rem: &mut [f64] = &mut out;
            let per = d.b.div_ceil(threads);
            let mut start = 0;
            while start < d.b {
                let take = per.min(d.b - start);
                let (head, tail) = rem.split_at_mut(take * out_sample);
                rem = tail;
                let (xv, wv, bv, d) = (&xv, &wv, &bv, &d);
                scope.spawn(move || {
                    for (j, sample_out) in head.chunks_mut(out_sample).enumerate() {
                        let sb = start + j;
                        conv_forward_sample(
                            d,
                            &xv[sb * in_sample..(sb + 1) * in_sample],
                            wv,
                            bv,
                            sample_out,
                        );
                    }
                });
                start += take;
            }
        });
    } else {
        for sb in 0..d.b {
            conv_forward_sample(
                &d,
                &xv[sb * in_sample..(sb + 1) * in_sample],
                &wv,
                &bv,
                &mut out[sb * out_sample..(sb + 1) * out_sample],
            );
        }
    }

    let xin = input.clone();
    let win = weight.clone();
    let bin = bias.clone();
    Node::from_op(
        vec![d.b, d.cout, d.oh, d.ow],
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        "conv2d",
        Box::new(move |go| {
            let xv = xin.values();
            let wv = win.values();
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; wv.len()];
            let mut db = vec![0.0; d.cout];
            for sb in 0..d.b {
                for co in 0..d.cout {
                    for oy in 0..d.oh {
                        for ox in 0..d.ow {
                            let g = go[((sb * d.cout + co) * d.oh + oy) * d.ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            db[co] += g;
                            for ci in 0..d.cin {
                                let wbase = (co * d.cin + ci) * d.k * d.k;
                                let xbase = (sb * d.cin + ci) * d.h * d.w;
                                for ky in 0..d.k {
                                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                                    if iy < 0 || iy >= d.h as isize {
                                        continue;
                                    }
                                    for kx in 0..d.k {
                                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                        if ix < 0 || ix >= d.w as isize {
                                            continue;
                                        }
                                        let xi = xbase + iy as usize * d.w + ix as usize;
                                        let wi = wbase + ky * d.k + kx;
                                        dx[xi] += g * wv[wi];
                                        dw[wi] += g * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            xin.accumulate_grad(&dx);
            win.accumulate_grad(&dw);
            bin.accumulate_grad(&db);
        }),
    )
}

// ---------------------------------------------------------------------------
// Quantum bridge
// ---------------------------------------------------------------------------

/// Runs each row of `x` through the statevector circuit; the sole bridge
/// between the graph and the simulator. Forward delegates to
/// [`qsim::run_circuit`], backward to [`qsim::circuit_gradients`], sending
/// angle adjoints to `angles` (summed over the batch) and input adjoints to
/// `x`.
pub fn quantum_node(x: &Node, angles: &Node, config: &CircuitConfig) -> Node {
    let sx = x.shape();
    let n = config.n_qubits;
    assert_eq!(sx.len(), 2, "quantum_node: input must be [B,n], got {sx:?}");
    assert_eq!(sx[1], n, "quantum_node: inner dimension {sx:?} vs {n} qubits");
    let na = angles.values().len();
    assert_eq!(na, config.n_angles(), "quantum_node: angle count {na} vs 3nL");
    let b = sx[0];

    let params = CircuitParams::new(config.clone(), angles.values());
    let xv = x.values();
    let mut out = vec![0.0; b * n];
    for row in 0..b {
        let exp = qsim::run_circuit(&xv[row * n..(row + 1) * n], &params)
            .expect("quantum_node: validated dimensions");
        out[row * n..(row + 1) * n].copy_from_slice(&exp);
    }

    let xin = x.clone();
    let ain = angles.clone();
    let cfg = config.clone();
    Node::from_op(
        vec![b, n],
        out,
        vec![x.clone(), angles.clone()],
        "quantum_node",
        Box::new(move |go| {
            let params = CircuitParams::new(cfg.clone(), ain.values());
            let xv = xin.values();
            let mut dx = vec![0.0; b * n];
            let mut da = vec![0.0; params.angles.len()];
            for row in 0..b {
                let (row_da, row_dx) = qsim::circuit_gradients(
                    &xv[row * n..(row + 1) * n],
                    &params,
                    &go[row * n..(row + 1) * n],
                )
                .expect("quantum_node: validated dimensions");
                dx[row * n..(row + 1) * n].copy_from_slice(&row_dx);
                for (acc, d) in da.iter_mut().zip(&row_da) {
                    *acc += d;
                }
            }
            xin.accumulate_grad(&dx);
            ain.accumulate_grad(&da);
        }),
    )
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Quantum,
}

/// A named trainable leaf. `decay` opts the tensor out of weight decay
/// (circuit angles and the gate scale/shift never decay toward zero).
#[derive(Clone)]
pub struct Parameter {
    pub node: Node,
    pub name: String,
    pub group: ParamGroup,
    pub decay: bool,
}

impl Parameter {
    pub fn new(node: Node, name: impl Into<String>, group: ParamGroup) -> Self {
        Parameter {
            node,
            name: name.into(),
            group,
            decay: true,
        }
    }

    pub fn no_decay(mut self) -> Self {
        self.decay = false;
        self
    }

    pub fn numel(&self) -> usize {
        self.node.values().len()
    }
}

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.name)
            .field("shape", &self.node.shape())
            .field("group", &self.group)
            .finish()
    }
}
