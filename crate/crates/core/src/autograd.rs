//! Reverse-mode automatic differentiation over `f64` buffers.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so walking them backwards is a valid reverse
//! topological order. Matrices are row-major `[rows, cols]`; feature maps are
//! stored channel-major as `[channels, height * width]`.

use std::sync::Arc;

use crate::distributions::{kl_terms, kl_terms_grad};
use crate::losses::{bce_grad, bce_values, dice_grad, dice_values};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddRow { a: Var, row: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, g: ConvGeom, cols: Vec<f64> },
    ConvT2x2 { x: Var, w: Var, b: Var, c_in: usize, c_out: usize, h: usize, w_: usize },
    Transpose(Var),
    ConcatRows(Var, Var),
    SliceRows { a: Var, start: usize },
    MeanRows(Var),
    MeanCols(Var),
    Reshape(Var),
    Bce { p: Var, target: Vec<f64> },
    Dice { p: Var, target: Vec<f64>, eps: f64, grad_scale: f64 },
    Kl { mq: Var, lq: Var, mp: Var, lp: Var },
}

struct Node {
    value: Arc<Vec<f64>>,
    shape: [usize; 2],
    op: Op,
    needs_grad: bool,
}

/// Recording of a single forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    /// Multiplier applied to the Dice gradient. Anything other than 1.0
    /// produces a deliberately wrong gradient; used as a negative control.
    dice_grad_scale: f64,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), dice_grad_scale: 1.0 }
    }

    #[doc(hidden)]
    pub fn set_dice_grad_scale(&mut self, scale: f64) {
        self.dice_grad_scale = scale;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, shape: [usize; 2], op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape[0] * shape[1]);
        self.nodes.push(Node { value: Arc::new(value), shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, data: Vec<f64>, shape: [usize; 2]) -> Var {
        self.push(data, shape, Op::Leaf, false)
    }

    /// Leaf sharing storage with `t`, viewed as `shape`. Gradients are
    /// tracked when `trainable` is set.
    pub fn leaf(&mut self, t: &Tensor, shape: [usize; 2], trainable: bool) -> Var {
        assert_eq!(t.numel(), shape[0] * shape[1], "leaf shape does not match tensor");
        self.nodes.push(Node { value: t.shared(), shape, op: Op::Leaf, needs_grad: trainable });
        Var(self.nodes.len() - 1)
    }

    /// `op(a) @ op(b)`; `ta`/`tb` transpose the stored operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let [ar, ac] = self.shape(a);
        let [br, bc] = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), ta, self.value(b), tb, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, [m, n], Op::MatMul { a, b, ta, tb, m, k, n }, ng)
    }

    /// Affine map `x @ w + bias` with `w` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let y = self.matmul(x, w, false, false);
        self.add_row(y, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a);
        self.push(out, shape, Op::Add(a, b), ng)
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let [m, n] = self.shape(a);
        assert_eq!(self.value(row).len(), n, "row broadcast width mismatch");
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_exact_mut(n) {
            for (o, v) in chunk.iter_mut().zip(r) {
                *o += v;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, [m, n], Op::AddRow { a, row }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a);
        self.push(out, shape, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(a);
        let shape = self.shape(a);
        self.push(out, shape, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a);
        self.push(out, shape, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| crate::losses::sigmoid(x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a);
        self.push(out, shape, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let ng = self.ng(a);
        let shape = self.shape(a);
        self.push(out, shape, Op::Exp(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let [m, n] = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.ng(a);
        self.push(out, [m, n], Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `n`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let [m, n] = self.shape(a);
        let x = self.value(a);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let xh = (row[j] - mean) * r;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(out, [m, n], Op::LayerNorm { a, gamma, beta, xhat, rstd }, ng)
    }

    /// 2-D convolution of `x` (`[c_in, h*w]`) with `w` (`[c_out, c_in*k*k]`)
    /// and bias `b` (`[1, c_out]`), zero padding.
    pub(crate) fn conv2d(&mut self, x: Var, w: Var, b: Var, g: ConvGeom) -> Var {
        assert_eq!(self.shape(x), [g.c_in, g.h * g.w], "conv input shape");
        assert_eq!(self.shape(w), [g.c_out, g.c_in * g.k * g.k], "conv weight shape");
        let (ho, wo) = (g.out_h(), g.out_w());
        let cols = im2col(self.value(x), &g);
        let kk = g.c_in * g.k * g.k;
        let mut out = vec![0.0; g.c_out * ho * wo];
        gemm(g.c_out, kk, ho * wo, self.value(w), false, &cols, false, &mut out, false);
        let bias = self.value(b);
        for (co, chunk) in out.chunks_exact_mut(ho * wo).enumerate() {
            for v in chunk {
                *v += bias[co];
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let cols = if self.ng(w) { cols } else { Vec::new() };
        self.push(out, [g.c_out, ho * wo], Op::Conv2d { x, w, b, g, cols }, ng)
    }

    /// Transposed convolution with 2x2 kernel and stride 2. `x` is
    /// `[c_in, h*w]`, `w` is `[c_in, c_out*4]`, output `[c_out, 4*h*w]`.
    pub(crate) fn conv_t2x2(&mut self, x: Var, w: Var, b: Var, h: usize, w_: usize) -> Var {
        let [c_in, hw] = self.shape(x);
        assert_eq!(hw, h * w_, "transposed conv spatial size");
        let [wr, wc] = self.shape(w);
        assert_eq!(wr, c_in, "transposed conv weight rows");
        let c_out = wc / 4;
        // y[(co, a, b), p] = sum_ci w[ci, (co, a, b)] x[ci, p]
        let mut y = vec![0.0; c_out * 4 * hw];
        gemm(c_out * 4, c_in, hw, self.value(w), true, self.value(x), false, &mut y, false);
        let bias = self.value(b);
        let (oh, ow) = (2 * h, 2 * w_);
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &y[(co * 4 + a * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..w_ {
                            out[co * oh * ow + (2 * i + a) * ow + 2 * j + bb] = src[i * w_ + j] + bias[co];
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, [c_out, oh * ow], Op::ConvT2x2 { x, w, b, c_in, c_out, h, w_ }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let [m, n] = self.shape(a);
        let out = transpose(self.value(a), m, n);
        let ng = self.ng(a);
        self.push(out, [n, m], Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let [ma, n] = self.shape(a);
        let [mb, nb] = self.shape(b);
        assert_eq!(n, nb, "concat width mismatch");
        let mut out = Vec::with_capacity((ma + mb) * n);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, [ma + mb, n], Op::ConcatRows(a, b), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let [m, n] = self.shape(a);
        assert!(start + len <= m, "row slice out of range");
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        self.push(out, [len, n], Op::SliceRows { a, start }, ng)
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let [m, n] = self.shape(a);
        let mut out = vec![0.0; n];
        for row in self.value(a).chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.ng(a);
        self.push(out, [1, n], Op::MeanRows(a), ng)
    }

    /// Mean over columns: `[m, n] -> [1, m]`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let [m, n] = self.shape(a);
        let out = self.value(a).chunks_exact(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let ng = self.ng(a);
        self.push(out, [1, m], Op::MeanCols(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: [usize; 2]) -> Var {
        assert_eq!(self.value(a).len(), shape[0] * shape[1], "reshape size mismatch");
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        self.push(out, shape, Op::Reshape(a), ng)
    }

    /// Mean binary cross-entropy of probabilities `p` against a constant target.
    pub fn bce(&mut self, p: Var, target: Vec<f64>) -> Var {
        assert_eq!(self.value(p).len(), target.len(), "bce size mismatch");
        let v = bce_values(&target, self.value(p));
        let ng = self.ng(p);
        self.push(vec![v], [1, 1], Op::Bce { p, target }, ng)
    }

    /// Soft Dice loss of probabilities `p` against a constant target.
    pub fn dice(&mut self, p: Var, target: Vec<f64>, eps: f64) -> Var {
        assert_eq!(self.value(p).len(), target.len(), "dice size mismatch");
        let v = dice_values(&target, self.value(p), eps);
        let ng = self.ng(p);
        let grad_scale = self.dice_grad_scale;
        self.push(vec![v], [1, 1], Op::Dice { p, target, eps, grad_scale }, ng)
    }

    /// Closed-form diagonal Gaussian KL divergence.
    pub fn kl(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
        let v = kl_terms(self.value(mq), self.value(lq), self.value(mp), self.value(lp));
        let ng = self.ng(mq) || self.ng(lq) || self.ng(mp) || self.ng(lp);
        self.push(vec![v], [1, 1], Op::Kl { mq, lq, mp, lp }, ng)
    }

    /// Back-propagates from the scalar `root`. Returns the gradient of every
    /// node that requires one (indexed by [`Var`]), `None` elsewhere.
    pub fn backward(&self, root: Var) -> Gradients {
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n_nodes).map(|_| None).collect();
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! acc {
            ($v:expr) => {
                slot(&self.nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                let av = self.value(a);
                let bv = self.value(b);
                if let Some(ga) = acc!(a) {
                    if ta {
                        // A stored [k, m]: dA = op(B) dC^T
                        gemm(k, n, m, bv, tb, g, true, ga, true);
                    } else {
                        gemm(m, n, k, g, false, bv, !tb, ga, true);
                    }
                }
                if let Some(gb) = acc!(b) {
                    if tb {
                        // B stored [n, k]: dB = dC^T op(A)
                        gemm(n, m, k, g, true, av, ta, gb, true);
                    } else {
                        gemm(k, m, n, av, !ta, g, false, gb, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(ga) = acc!(v) {
                        add_into(ga, g);
                    }
                }
            }
            &Op::AddRow { a, row } => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
                let n = node.shape[1];
                if let Some(gr) = acc!(row) {
                    for chunk in g.chunks_exact(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                if let Some(ga) = acc!(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = acc!(b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = acc!(a) {
                    for (o, v) in ga.iter_mut().zip(g) {
                        *o += s * v;
                    }
                }
            }
            &Op::Gelu(a) => {
                let x = self.value(a);
                if let Some(ga) = acc!(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(x[i]);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let y = &node.value;
                if let Some(ga) = acc!(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            &Op::Exp(a) => {
                let y = &node.value;
                if let Some(ga) = acc!(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                let n = node.shape[1];
                let y = &node.value;
                if let Some(ga) = acc!(a) {
                    for ((gr, yr), out) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, xhat, rstd } => {
                let [m, n] = node.shape;
                let gv = self.value(*gamma);
                if let Some(gg) = acc!(*gamma) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(gb) = acc!(*beta) {
                    for chunk in g.chunks_exact(n) {
                        add_into(gb, chunk);
                    }
                }
                if let Some(ga) = acc!(*a) {
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let xr = &xhat[i * n..(i + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            dxhat[j] = g[i * n + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xr[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            ga[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, g: geom, cols } => {
                let hw_out = geom.out_h() * geom.out_w();
                let kk = geom.c_in * geom.k * geom.k;
                if let Some(gb) = acc!(*b) {
                    for (co, chunk) in g.chunks_exact(hw_out).enumerate() {
                        gb[co] += chunk.iter().sum::<f64>();
                    }
                }
                if let Some(gw) = acc!(*w) {
                    gemm(geom.c_out, hw_out, kk, g, false, cols, true, gw, true);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0; kk * hw_out];
                    gemm(kk, geom.c_out, hw_out, self.value(*w), true, g, false, &mut dcols, false);
                    if let Some(gx) = acc!(*x) {
                        col2im_add(&dcols, geom, gx);
                    }
                }
            }
            &Op::ConvT2x2 { x, w, b, c_in, c_out, h, w_ } => {
                let hw = h * w_;
                let (oh, ow) = (2 * h, 2 * w_);
                if let Some(gb) = acc!(b) {
                    for (co, chunk) in g.chunks_exact(oh * ow).enumerate() {
                        gb[co] += chunk.iter().sum::<f64>();
                    }
                }
                // gather dY[(co, a, b), p]
                let mut dy = vec![0.0; c_out * 4 * hw];
                for co in 0..c_out {
                    for a in 0..2 {
                        for bb in 0..2 {
                            let dst = &mut dy[(co * 4 + a * 2 + bb) * hw..][..hw];
                            for i in 0..h {
                                for j in 0..w_ {
                                    dst[i * w_ + j] = g[co * oh * ow + (2 * i + a) * ow + 2 * j + bb];
                                }
                            }
                        }
                    }
                }
                let xv = self.value(x);
                let wv = self.value(w);
                if let Some(gw) = acc!(w) {
                    gemm(c_in, hw, c_out * 4, xv, false, &dy, true, gw, true);
                }
                if let Some(gx) = acc!(x) {
                    gemm(c_in, c_out * 4, hw, wv, false, &dy, false, gx, true);
                }
            }
            &Op::Transpose(a) => {
                let [m, n] = node.shape;
                if let Some(ga) = acc!(a) {
                    // node is [m, n], parent is [n, m]
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            &Op::ConcatRows(a, b) => {
                let split = self.nodes[a.0].value.len();
                if let Some(ga) = acc!(a) {
                    add_into(ga, &g[..split]);
                }
                if let Some(gb) = acc!(b) {
                    add_into(gb, &g[split..]);
                }
            }
            &Op::SliceRows { a, start } => {
                let n = node.shape[1];
                if let Some(ga) = acc!(a) {
                    add_into(&mut ga[start * n..start * n + g.len()], g);
                }
            }
            &Op::MeanRows(a) => {
                let [m, n] = self.shape(a);
                if let Some(ga) = acc!(a) {
                    for chunk in ga.chunks_exact_mut(n) {
                        for (o, v) in chunk.iter_mut().zip(g) {
                            *o += v / m as f64;
                        }
                    }
                }
            }
            &Op::MeanCols(a) => {
                let [_, n] = self.shape(a);
                if let Some(ga) = acc!(a) {
                    for (chunk, gv) in ga.chunks_exact_mut(n).zip(g) {
                        for o in chunk {
                            *o += gv / n as f64;
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
            }
            Op::Bce { p, target } => {
                let pv = self.value(*p);
                if let Some(gp) = acc!(*p) {
                    bce_grad(target, pv, g[0], gp);
                }
            }
            Op::Dice { p, target, eps, grad_scale } => {
                let pv = self.value(*p);
                if let Some(gp) = acc!(*p) {
                    dice_grad(target, pv, *eps, g[0] * grad_scale, gp);
                }
            }
            &Op::Kl { mq, lq, mp, lp } => {
                let d = self.nodes[mq.0].value.len();
                let mut parts = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
                {
                    let [a, b, c, e] = &mut parts;
                    kl_terms_grad(
                        self.value(mq),
                        self.value(lq),
                        self.value(mp),
                        self.value(lp),
                        g[0],
                        [a, b, c, e],
                    );
                }
                for (v, part) in [mq, lq, mp, lp].into_iter().zip(&parts) {
                    if let Some(gv) = acc!(v) {
                        add_into(gv, part);
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn transpose(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut cols = vec![0.0; g.c_in * g.k * g.k * ho * wo];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut cols[((c * g.k + ki) * g.k + kj) * ho * wo..][..ho * wo];
                for oi in 0..ho {
                    let yi = (oi * g.stride + ki) as isize - g.pad as isize;
                    if yi < 0 || yi >= g.h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let xj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if xj < 0 || xj >= g.w as isize {
                            continue;
                        }
                        row[oi * wo + oj] = x[c * g.h * g.w + yi as usize * g.w + xj as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &cols[((c * g.k + ki) * g.k + kj) * ho * wo..][..ho * wo];
                for oi in 0..ho {
                    let yi = (oi * g.stride + ki) as isize - g.pad as isize;
                    if yi < 0 || yi >= g.h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let xj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if xj < 0 || xj >= g.w as isize {
                            continue;
                        }
                        dx[c * g.h * g.w + yi as usize * g.w + xj as usize] += row[oi * wo + oj];
                    }
                }
            }
        }
    }
}
