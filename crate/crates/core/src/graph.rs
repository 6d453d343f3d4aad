//! Tape-based reverse-mode differentiation over [`Tensor`].
//!
//! Every operation appends a node to the [`Graph`]; nodes are stored in
//! creation order, which is already a topological order, so the backward
//! pass is a single reverse sweep. A graph built with [`Graph::inference`]
//! records values only and never keeps backward state.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    broadcast_shape, broadcast_strides, contiguous_strides, for_each_strided, gemm, reduce_to,
    Real, Tensor,
};

pub type NodeId = usize;

enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, S),
    Silu(NodeId),
    Relu(NodeId),
    Sqr(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Narrow {
        x: NodeId,
        dim: usize,
        start: usize,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Softmax(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        cols: Vec<S>,
    },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Blend {
        a: NodeId,
        b: NodeId,
        mask: NodeId,
    },
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S: Real> {
    nodes: RefCell<Vec<Node<S>>>,
    recording: bool,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Real> {
    graph: &'g Graph<S>,
    id: NodeId,
}

impl<S: Real> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of the leaves that required them.
pub struct Gradients<S> {
    leaves: HashMap<NodeId, Tensor<S>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, var: &Var<'_, S>) -> Option<&Tensor<S>> {
        self.leaves.get(&var.id)
    }

    pub fn take(&mut self, var: &Var<'_, S>) -> Option<Tensor<S>> {
        self.leaves.remove(&var.id)
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A graph that never records backward state.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(Rc::new(value), false)
    }

    /// A leaf that gradients flow into (when the graph records).
    pub fn param(&self, value: Rc<Tensor<S>>) -> Var<'_, S> {
        self.leaf(value, true)
    }

    pub fn leaf(&self, value: Rc<Tensor<S>>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, parents: &[NodeId]) -> bool {
        if !self.recording {
            return false;
        }
        let nodes = self.nodes.borrow();
        parents.iter().any(|&p| nodes[p].requires_grad)
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: &Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(Error::Structural(format!(
                "backward from non-scalar of shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=root.id).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if !nodes[root.id].requires_grad {
            return Ok(Gradients { leaves });
        }
        grads[root.id] = Some(Tensor::ones(root_value.shape().to_vec()));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                leaves.insert(id, g);
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads)?;
        }
        Ok(Gradients { leaves })
    }
}

fn accumulate<S: Real>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    id: NodeId,
    g: Tensor<S>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<S: Real>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) -> Result<()> {
    let val = |id: NodeId| -> &Tensor<S> { &nodes[id].value };
    let wants = |id: NodeId| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            if wants(a) {
                accumulate(nodes, grads, a, reduce_to(g, val(a).shape()));
            }
            if wants(b) {
                accumulate(nodes, grads, b, reduce_to(g, val(b).shape()));
            }
        }
        &Op::Sub(a, b) => {
            if wants(a) {
                accumulate(nodes, grads, a, reduce_to(g, val(a).shape()));
            }
            if wants(b) {
                accumulate(nodes, grads, b, reduce_to(g, val(b).shape()).map(|v| -v));
            }
        }
        &Op::Mul(a, b) => {
            if wants(a) {
                let prod = mul_broadcast_into(g, val(b));
                accumulate(nodes, grads, a, reduce_to(&prod, val(a).shape()));
            }
            if wants(b) {
                let prod = mul_broadcast_into(g, val(a));
                accumulate(nodes, grads, b, reduce_to(&prod, val(b).shape()));
            }
        }
        &Op::Affine(a, mul) => accumulate(nodes, grads, a, g.map(|v| v * mul)),
        &Op::Silu(a) => {
            let d = val(a).zip_map(g, |x, gv| {
                let s = S::one() / (S::one() + (-x).exp());
                gv * s * (S::one() + x * (S::one() - s))
            })?;
            accumulate(nodes, grads, a, d);
        }
        &Op::Relu(a) => {
            let d = val(a).zip_map(g, |x, gv| if x > S::zero() { gv } else { S::zero() })?;
            accumulate(nodes, grads, a, d);
        }
        &Op::Sqr(a) => {
            let two = S::lit(2.0);
            let d = val(a).zip_map(g, |x, gv| two * x * gv)?;
            accumulate(nodes, grads, a, d);
        }
        &Op::SumAll(a) => {
            accumulate(nodes, grads, a, Tensor::full(val(a).shape().to_vec(), g.item()));
        }
        &Op::MeanAll(a) => {
            let n = S::lit(val(a).numel() as f64);
            accumulate(nodes, grads, a, Tensor::full(val(a).shape().to_vec(), g.item() / n));
        }
        &Op::Reshape(a) => {
            accumulate(nodes, grads, a, g.clone().reshape(val(a).shape().to_vec())?);
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (d, &p) in perm.iter().enumerate() {
                inv[p] = d;
            }
            accumulate(nodes, grads, *a, permute_tensor(g, &inv));
        }
        Op::Concat(ids, dim) => {
            let mut start = 0;
            for &id in ids {
                let len = val(id).shape()[*dim];
                if wants(id) {
                    accumulate(nodes, grads, id, narrow_tensor(g, *dim, start, len));
                }
                start += len;
            }
        }
        &Op::Narrow { x, dim, start } => {
            let shape = val(x).shape();
            let mut full = Tensor::zeros(shape.to_vec());
            let inner: usize = shape[dim + 1..].iter().product();
            let outer: usize = shape[..dim].iter().product();
            let len = g.shape()[dim];
            let (src_block, dst_block) = (len * inner, shape[dim] * inner);
            let gd = g.data();
            let fd = full.data_mut();
            for o in 0..outer {
                fd[o * dst_block + start * inner..][..src_block]
                    .copy_from_slice(&gd[o * src_block..][..src_block]);
            }
            accumulate(nodes, grads, x, full);
        }
        &Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(a), val(b));
            let dims = MatMulDims::new(av.shape(), bv.shape(), ta, tb)?;
            let MatMulDims { batch, m, k, n, .. } = dims;
            let gd = g.data();
            if wants(a) {
                let mut da = Tensor::zeros(av.shape().to_vec());
                for i in 0..batch {
                    let gi = &gd[i * m * n..][..m * n];
                    let bi = &bv.data()[i * dims.b_stride..][..k * n];
                    let dai = &mut da.data_mut()[i * m * k..][..m * k];
                    if ta {
                        gemm(k, n, m, bi, tb, gi, true, dai, false);
                    } else {
                        gemm(m, n, k, gi, false, bi, !tb, dai, false);
                    }
                }
                accumulate(nodes, grads, a, da);
            }
            if wants(b) {
                let mut db = Tensor::zeros(bv.shape().to_vec());
                for i in 0..batch {
                    let gi = &gd[i * m * n..][..m * n];
                    let ai = &av.data()[i * m * k..][..m * k];
                    let dbi = &mut db.data_mut()[i * dims.b_stride..][..k * n];
                    let acc = dims.b_stride == 0 && i > 0;
                    if tb {
                        gemm(n, m, k, gi, true, ai, ta, dbi, acc);
                    } else {
                        gemm(k, m, n, ai, !ta, gi, false, dbi, acc);
                    }
                }
                accumulate(nodes, grads, b, db);
            }
        }
        &Op::Softmax(a) => {
            let y = &node.value;
            let cols = *y.shape().last().unwrap_or(&1);
            let mut d = Tensor::zeros(y.shape().to_vec());
            for ((yr, gr), dr) in y
                .data()
                .chunks(cols)
                .zip(g.data().chunks(cols))
                .zip(d.data_mut().chunks_mut(cols))
            {
                let dot: S = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            accumulate(nodes, grads, a, d);
        }
        Op::Conv2d { x, w, bias, cols } => {
            let (b, c, h, wd) = val(*x).dims4()?;
            let wv = val(*w);
            let (o, _, k, _) = wv.dims4()?;
            let hw = h * wd;
            let ncol = b * hw;
            let ckk = c * k * k;
            let mut g_mat = vec![S::zero(); o * ncol];
            for n in 0..b {
                for oc in 0..o {
                    g_mat[oc * ncol + n * hw..][..hw]
                        .copy_from_slice(&g.data()[(n * o + oc) * hw..][..hw]);
                }
            }
            if let Some(bias) = *bias {
                if wants(bias) {
                    let db: Vec<S> = g_mat.chunks(ncol).map(|r| r.iter().copied().sum()).collect();
                    accumulate(nodes, grads, bias, Tensor::new([o], db)?);
                }
            }
            if wants(*w) {
                let mut dw = vec![S::zero(); o * ckk];
                gemm(o, ncol, ckk, &g_mat, false, cols, true, &mut dw, false);
                accumulate(nodes, grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
            }
            if wants(*x) {
                let mut dcols = vec![S::zero(); ckk * ncol];
                gemm(ckk, o, ncol, wv.data(), true, &g_mat, false, &mut dcols, false);
                let dx = col2im(&dcols, b, c, h, wd, k);
                accumulate(nodes, grads, *x, Tensor::new([b, c, h, wd], dx)?);
            }
        }
        &Op::AvgPool2(a) => {
            let (b, c, h, w) = val(a).dims4()?;
            let (oh, ow) = (h / 2, w / 2);
            let quarter = S::lit(0.25);
            let mut d = Tensor::zeros([b, c, h, w]);
            let dd = d.data_mut();
            for p in 0..b * c {
                for y in 0..oh {
                    for x in 0..ow {
                        let gv = g.data()[(p * oh + y) * ow + x] * quarter;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            dd[(p * h + 2 * y + dy) * w + 2 * x + dx] = gv;
                        }
                    }
                }
            }
            accumulate(nodes, grads, a, d);
        }
        &Op::Upsample2(a) => {
            let (b, c, h, w) = val(a).dims4()?;
            let (oh, ow) = (h * 2, w * 2);
            let mut d = Tensor::zeros([b, c, h, w]);
            let dd = d.data_mut();
            for p in 0..b * c {
                for y in 0..oh {
                    for x in 0..ow {
                        dd[(p * h + y / 2) * w + x / 2] += g.data()[(p * oh + y) * ow + x];
                    }
                }
            }
            accumulate(nodes, grads, a, d);
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let shape = xv.shape();
            let (b, c) = (shape[0], shape[1]);
            let spatial = xv.numel() / (b * c);
            let cpg = c / groups;
            let gam = val(*gamma).data();
            let mut dx = vec![S::zero(); xv.numel()];
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            let count = S::lit((cpg * spatial) as f64);
            for n in 0..b {
                for gi in 0..*groups {
                    let (mu, rs) = (mean[n * groups + gi], rstd[n * groups + gi]);
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for ch in gi * cpg..(gi + 1) * cpg {
                        let base = (n * c + ch) * spatial;
                        for i in base..base + spatial {
                            let xhat = (xv.data()[i] - mu) * rs;
                            let gv = g.data()[i];
                            dgamma[ch] += gv * xhat;
                            dbeta[ch] += gv;
                            let dxhat = gv * gam[ch];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                    }
                    for ch in gi * cpg..(gi + 1) * cpg {
                        let base = (n * c + ch) * spatial;
                        for i in base..base + spatial {
                            let xhat = (xv.data()[i] - mu) * rs;
                            let dxhat = g.data()[i] * gam[ch];
                            dx[i] = rs / count * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                }
            }
            if wants(*x) {
                accumulate(nodes, grads, *x, Tensor::new(shape.to_vec(), dx)?);
            }
            if wants(*gamma) {
                accumulate(nodes, grads, *gamma, Tensor::new([c], dgamma)?);
            }
            if wants(*beta) {
                accumulate(nodes, grads, *beta, Tensor::new([c], dbeta)?);
            }
        }
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let dim = tv.shape()[1];
            let mut d = Tensor::zeros(tv.shape().to_vec());
            let dd = d.data_mut();
            for (row, &id) in ids.iter().enumerate() {
                for j in 0..dim {
                    dd[id * dim + j] += g.data()[row * dim + j];
                }
            }
            accumulate(nodes, grads, *table, d);
        }
        &Op::Blend { a, b, mask } => {
            let mv = val(mask);
            let strides = broadcast_strides(mv.shape(), g.shape());
            let mut da = vec![S::zero(); g.numel()];
            let mut db = vec![S::zero(); g.numel()];
            let (md, gd) = (mv.data(), g.data());
            for_each_strided(g.shape(), &strides, &strides, |o, mi, _| {
                let m = md[mi];
                da[o] = gd[o] * m;
                db[o] = gd[o] * (S::one() - m);
            });
            if wants(a) {
                accumulate(nodes, grads, a, Tensor::new(g.shape().to_vec(), da)?);
            }
            if wants(b) {
                accumulate(nodes, grads, b, Tensor::new(g.shape().to_vec(), db)?);
            }
        }
    }
    Ok(())
}

/// `g ⊙ other` where `other` broadcasts into `g`'s shape.
fn mul_broadcast_into<S: Real>(g: &Tensor<S>, other: &Tensor<S>) -> Tensor<S> {
    let so = broadcast_strides(other.shape(), g.shape());
    let mut out = Tensor::zeros(g.shape().to_vec());
    let (gd, od) = (g.data(), other.data());
    let dst = out.data_mut();
    for_each_strided(g.shape(), &so, &so, |o, i, _| dst[o] = gd[o] * od[i]);
    out
}

fn permute_tensor<S: Real>(t: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let strides = contiguous_strides(t.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Tensor::zeros(out_shape.clone());
    let sd = t.data();
    let dst = out.data_mut();
    for_each_strided(&out_shape, &src, &src, |o, i, _| dst[o] = sd[i]);
    out
}

fn narrow_tensor<S: Real>(t: &Tensor<S>, dim: usize, start: usize, len: usize) -> Tensor<S> {
    let shape = t.shape();
    let inner: usize = shape[dim + 1..].iter().product();
    let outer: usize = shape[..dim].iter().product();
    let (src_block, dst_block) = (shape[dim] * inner, len * inner);
    let mut out_shape = shape.to_vec();
    out_shape[dim] = len;
    let mut data = Vec::with_capacity(outer * dst_block);
    for o in 0..outer {
        data.extend_from_slice(&t.data()[o * src_block + start * inner..][..dst_block]);
    }
    Tensor::new(out_shape, data).expect("narrow shape")
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// Elements between consecutive `b` matrices; 0 when `b` is shared.
    b_stride: usize,
    out_shape: Vec<usize>,
}

impl MatMulDims {
    fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        let mat = |s: &[usize], t: bool| if t { (s[1], s[0]) } else { (s[0], s[1]) };
        let dims = match (a.len(), b.len()) {
            (2, 2) => {
                let (m, k) = mat(a, ta);
                let (k2, n) = mat(b, tb);
                (1, m, k, k2, n, k2 * n, vec![m, n])
            }
            (3, 3) if a[0] == b[0] => {
                let (m, k) = mat(&a[1..], ta);
                let (k2, n) = mat(&b[1..], tb);
                (a[0], m, k, k2, n, k2 * n, vec![a[0], m, n])
            }
            // [B, M, K] · [K, N] with a shared right-hand side.
            (3, 2) if !ta => {
                let (k2, n) = mat(b, tb);
                (1, a[0] * a[1], a[2], k2, n, 0, vec![a[0], a[1], n])
            }
            _ => return Err(shape_err("matmul", a, b)),
        };
        let (batch, m, k, k2, n, b_stride, out_shape) = dims;
        if k != k2 {
            return Err(shape_err("matmul inner dim", a, b));
        }
        Ok(Self {
            batch,
            m,
            k,
            n,
            b_stride: if batch == 1 { 0 } else { b_stride },
            out_shape,
        })
    }
}

fn im2col<S: Real>(x: &[S], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = k / 2;
    let hw = h * w;
    let ncol = b * hw;
    let mut cols = vec![S::zero(); c * k * k * ncol];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for n in 0..b {
                    let src = &x[(n * c + ci) * hw..][..hw];
                    let dst = &mut cols[row * ncol + n * hw..][..hw];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let sy = sy - pad;
                        let sx0 = x0 + kx - pad;
                        dst[y * w + x0..y * w + x1]
                            .copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Real>(cols: &[S], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = k / 2;
    let hw = h * w;
    let ncol = b * hw;
    let mut x = vec![S::zero(); b * c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for n in 0..b {
                    let src = &cols[row * ncol + n * hw..][..hw];
                    let dst = &mut x[(n * c + ci) * hw..][..hw];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let sy = sy - pad;
                        let sx0 = x0 + kx - pad;
                        for (d, &s) in dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)]
                            .iter_mut()
                            .zip(&src[y * w + x0..y * w + x1])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'g, S: Real> Var<'g, S> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'g, S> {
        self.graph.leaf(self.value(), false)
    }

    fn unary(&self, value: Tensor<S>, op: impl FnOnce() -> Op<S>) -> Var<'g, S> {
        let rg = self.graph.needs(&[self.id]);
        self.graph.push(value, if rg { op() } else { Op::Leaf }, rg)
    }

    fn broadcast_binary(
        &self,
        other: &Var<'g, S>,
        f: impl Fn(S, S) -> S,
        op: impl FnOnce(NodeId, NodeId) -> Op<S>,
    ) -> Result<Var<'g, S>> {
        let (a, b) = (self.value(), other.value());
        let value = if a.shape() == b.shape() {
            a.zip_map(&b, f)?
        } else {
            let out = broadcast_shape(a.shape(), b.shape())?;
            let sa = broadcast_strides(a.shape(), &out);
            let sb = broadcast_strides(b.shape(), &out);
            let mut t = Tensor::zeros(out.clone());
            let (ad, bd) = (a.data(), b.data());
            let dst = t.data_mut();
            for_each_strided(&out, &sa, &sb, |o, i, j| dst[o] = f(ad[i], bd[j]));
            t
        };
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(value, op(self.id, other.id), rg))
    }

    pub fn add(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        self.broadcast_binary(other, |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        self.broadcast_binary(other, |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        self.broadcast_binary(other, |a, b| a * b, Op::Mul)
    }

    /// `mul * x + add`
    pub fn affine(&self, mul: f64, add: f64) -> Var<'g, S> {
        let (m, a) = (S::lit(mul), S::lit(add));
        let value = self.value().map(|v| v * m + a);
        self.unary(value, || Op::Affine(self.id, m))
    }

    pub fn scale(&self, s: f64) -> Var<'g, S> {
        self.affine(s, 0.0)
    }

    pub fn silu(&self) -> Var<'g, S> {
        let value = self.value().map(|x| x / (S::one() + (-x).exp()));
        self.unary(value, || Op::Silu(self.id))
    }

    pub fn relu(&self) -> Var<'g, S> {
        let value = self.value().map(|x| x.max(S::zero()));
        self.unary(value, || Op::Relu(self.id))
    }

    pub fn sqr(&self) -> Var<'g, S> {
        let value = self.value().map(|x| x * x);
        self.unary(value, || Op::Sqr(self.id))
    }

    pub fn sum_all(&self) -> Var<'g, S> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(value, || Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var<'g, S> {
        let v = self.value();
        let value = Tensor::scalar(v.sum() / S::lit(v.numel() as f64));
        self.unary(value, || Op::MeanAll(self.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, S>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(value, || Op::Reshape(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g, S>> {
        let v = self.value();
        let mut seen = vec![false; v.rank()];
        if perm.len() != v.rank() || perm.iter().any(|&p| p >= v.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Structural(format!(
                "invalid permutation {perm:?} for shape {:?}",
                v.shape()
            )));
        }
        let value = permute_tensor(&v, perm);
        Ok(self.unary(value, || Op::Permute(self.id, perm.to_vec())))
    }

    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Var<'g, S>> {
        let v = self.value();
        if dim >= v.rank() || start + len > v.shape()[dim] {
            return Err(Error::Index(format!(
                "narrow dim {dim} [{start}, {}) of {:?}",
                start + len,
                v.shape()
            )));
        }
        let value = narrow_tensor(&v, dim, start, len);
        Ok(self.unary(value, || Op::Narrow {
            x: self.id,
            dim,
            start,
        }))
    }

    /// Batched or plain matrix product with optional transposes of either side.
    pub fn matmul_t(&self, other: &Var<'g, S>, ta: bool, tb: bool) -> Result<Var<'g, S>> {
        let (av, bv) = (self.value(), other.value());
        let dims = MatMulDims::new(av.shape(), bv.shape(), ta, tb)?;
        let MatMulDims { batch, m, k, n, .. } = dims;
        let mut out = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..][..m * k],
                ta,
                &bv.data()[i * dims.b_stride..][..k * n],
                tb,
                &mut out[i * m * n..][..m * n],
                false,
            );
        }
        let value = Tensor::new(dims.out_shape, out)?;
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            rg,
        ))
    }

    pub fn matmul(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        self.matmul_t(other, false, false)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g, S> {
        let v = self.value();
        let cols = *v.shape().last().unwrap_or(&1);
        let mut out = (*v).clone();
        for row in out.data_mut().chunks_mut(cols) {
            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let mut sum = S::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        self.unary(out, || Op::Softmax(self.id))
    }

    /// Stride-1 "same" convolution with an odd square kernel `[O, C, k, k]`.
    pub fn conv2d(&self, weight: &Var<'g, S>, bias: Option<&Var<'g, S>>) -> Result<Var<'g, S>> {
        let xv = self.value();
        let wv = weight.value();
        let (b, c, h, w) = xv.dims4()?;
        let (o, wc, k, k2) = wv.dims4()?;
        if wc != c || k != k2 || k % 2 == 0 {
            return Err(shape_err("conv2d", xv.shape(), wv.shape()));
        }
        let hw = h * w;
        let ncol = b * hw;
        let ckk = c * k * k;
        let cols = im2col(xv.data(), b, c, h, w, k);
        let mut tmp = vec![S::zero(); o * ncol];
        gemm(o, ckk, ncol, wv.data(), false, &cols, false, &mut tmp, false);
        let bias_v = match bias {
            Some(bv) => {
                let bv = bv.value();
                if bv.shape() != [o] {
                    return Err(shape_err("conv2d bias", bv.shape(), &[o]));
                }
                Some(bv)
            }
            None => None,
        };
        let mut out = vec![S::zero(); b * o * hw];
        for n in 0..b {
            for oc in 0..o {
                let bias_val = bias_v.as_ref().map_or(S::zero(), |bv| bv.data()[oc]);
                let dst = &mut out[(n * o + oc) * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(&tmp[oc * ncol + n * hw..][..hw]) {
                    *d = s + bias_val;
                }
            }
        }
        let value = Tensor::new([b, o, h, w], out)?;
        let mut parents = vec![self.id, weight.id];
        if let Some(bv) = bias {
            parents.push(bv.id);
        }
        let rg = self.graph.needs(&parents);
        let op = if rg {
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                cols,
            }
        } else {
            Op::Leaf
        };
        Ok(self.graph.push(value, op, rg))
    }

    pub fn avg_pool2(&self) -> Result<Var<'g, S>> {
        let v = self.value();
        let (b, c, h, w) = v.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Structural(format!("avg_pool2 on odd size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = S::lit(0.25);
        let src = v.data();
        let value = Tensor::from_fn([b, c, oh, ow], |i| {
            let p = i / (oh * ow);
            let (y, x) = ((i / ow) % oh, i % ow);
            let at = |dy: usize, dx: usize| src[(p * h + 2 * y + dy) * w + 2 * x + dx];
            (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter
        });
        Ok(self.unary(value, || Op::AvgPool2(self.id)))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Result<Var<'g, S>> {
        let v = self.value();
        let (b, c, h, w) = v.dims4()?;
        let (oh, ow) = (h * 2, w * 2);
        let src = v.data();
        let value = Tensor::from_fn([b, c, oh, ow], |i| {
            let p = i / (oh * ow);
            let (y, x) = ((i / ow) % oh, i % ow);
            src[(p * h + y / 2) * w + x / 2]
        });
        Ok(self.unary(value, || Op::Upsample2(self.id)))
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Var<'g, S>,
        beta: &Var<'g, S>,
        eps: f64,
    ) -> Result<Var<'g, S>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if shape.len() < 2 || !shape[1].is_multiple_of(groups) {
            return Err(Error::Structural(format!(
                "group_norm with {groups} groups on shape {shape:?}"
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err("group_norm affine", gv.shape(), &[c]));
        }
        let spatial = xv.numel() / (b * c);
        let cpg = c / groups;
        let count = S::lit((cpg * spatial) as f64);
        let eps = S::lit(eps);
        let mut mean = Vec::with_capacity(b * groups);
        let mut rstd = Vec::with_capacity(b * groups);
        let mut out = vec![S::zero(); xv.numel()];
        for n in 0..b {
            for gi in 0..groups {
                let range = (n * c + gi * cpg) * spatial..(n * c + (gi + 1) * cpg) * spatial;
                let chunk = &xv.data()[range.clone()];
                let mu = chunk.iter().copied().sum::<S>() / count;
                let var = chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / count;
                let rs = S::one() / (var + eps).sqrt();
                mean.push(mu);
                rstd.push(rs);
                for (j, i) in range.enumerate() {
                    let ch = gi * cpg + j / spatial;
                    out[i] = (xv.data()[i] - mu) * rs * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.graph.needs(&[self.id, gamma.id, beta.id]);
        let op = Op::GroupNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            groups,
            mean,
            rstd,
        };
        Ok(self.graph.push(value, op, rg))
    }

    /// Row lookup into a `[V, D]` table; result is `[ids.len(), D]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'g, S>> {
        let tv = self.value();
        if tv.rank() != 2 {
            return Err(Error::Structural(format!("embedding table of shape {:?}", tv.shape())));
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} with vocabulary {vocab}")));
            }
            data.extend_from_slice(&tv.data()[id * dim..][..dim]);
        }
        let value = Tensor::new([ids.len(), dim], data)?;
        Ok(self.unary(value, || Op::Embedding {
            table: self.id,
            ids: ids.to_vec(),
        }))
    }

    /// Mask-weighted blend `m·self + (1-m)·other`, returning `self` exactly
    /// where `m == 1` and `other` exactly where `m == 0` or the inputs agree.
    /// The mask broadcasts into the operands and carries no gradient.
    pub fn blend(&self, other: &Var<'g, S>, mask: &Var<'g, S>) -> Result<Var<'g, S>> {
        let (av, bv, mv) = (self.value(), other.value(), mask.value());
        if av.shape() != bv.shape() {
            return Err(shape_err("blend", av.shape(), bv.shape()));
        }
        let out_shape = broadcast_shape(av.shape(), mv.shape())?;
        if out_shape != av.shape() {
            return Err(shape_err("blend mask", av.shape(), mv.shape()));
        }
        let strides = broadcast_strides(mv.shape(), av.shape());
        let mut out = vec![S::zero(); av.numel()];
        let (ad, bd, md) = (av.data(), bv.data(), mv.data());
        for_each_strided(av.shape(), &strides, &strides, |o, mi, _| {
            let m = md[mi];
            out[o] = if m == S::one() {
                ad[o]
            } else {
                bd[o] + m * (ad[o] - bd[o])
            };
        });
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(
            value,
            Op::Blend {
                a: self.id,
                b: other.id,
                mask: mask.id,
            },
            rg,
        ))
    }
}

/// Concatenate along `dim`.
pub fn concat<'g, S: Real>(vars: &[Var<'g, S>], dim: usize) -> Result<Var<'g, S>> {
    let first = vars
        .first()
        .ok_or_else(|| Error::Structural("concat of zero tensors".into()))?;
    let graph = first.graph;
    let values: Vec<Rc<Tensor<S>>> = vars.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    if dim >= base.len() {
        return Err(Error::Index(format!("concat dim {dim} for rank {}", base.len())));
    }
    let mut total = 0;
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s.iter().enumerate().any(|(d, &x)| d != dim && x != base[d]) {
            return Err(shape_err("concat", &base, s));
        }
        total += s[dim];
    }
    let inner: usize = base[dim + 1..].iter().product();
    let outer: usize = base[..dim].iter().product();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let block = v.shape()[dim] * inner;
            data.extend_from_slice(&v.data()[o * block..][..block]);
        }
    }
    let mut shape = base;
    shape[dim] = total;
    let value = Tensor::new(shape, data)?;
    let ids: Vec<NodeId> = vars.iter().map(|v| v.id).collect();
    let rg = graph.needs(&ids);
    Ok(graph.push(value, Op::Concat(ids, dim), rg))
}
