use std::rc::Rc;

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{NseError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    /// Columns of the output are rows `ids[j]` of an embedding table.
    Embed {
        param: ParamId,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    MulConst(Var, Rc<[f64]>),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    NegLog {
        x: Var,
        eps: f64,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Column {
        m: Var,
        col: usize,
    },
    StackColumns(Vec<Var>),
    ScaleColumns(Var, Var),
    Outer(Var, Var),
    Sum(Var),
    Dot(Var, Var),
    /// Entries where `keep[i]` is false are replaced by a constant.
    FillMasked {
        x: Var,
        keep: Rc<[bool]>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of a forward computation. Nodes are appended in evaluation
/// order, so walking indices backwards is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(NseError::InvalidInput(msg()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// Looks up rows of a `[vocab, dim]` table; output is `[dim, ids.len()]`.
    pub fn embed(&mut self, store: &ParamStore, id: ParamId, ids: &[usize]) -> Result<Var> {
        let table = store.get(id);
        check(table.shape().len() == 2, || "embedding table must be 2-D".into())?;
        check(!ids.is_empty(), || "empty token sequence".into())?;
        let (vocab, dim) = (table.rows(), table.cols());
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(NseError::invalid(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let len = ids.len();
        let mut out = vec![0.0; dim * len];
        for (j, &t) in ids.iter().enumerate() {
            for (d, &x) in table.row(t).iter().enumerate() {
                out[d * len + j] = x;
            }
        }
        let value = Tensor::from_parts(vec![dim, len], out);
        Ok(self.push(
            value,
            Op::Embed {
                param: id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], || {
            format!("matmul shape mismatch {sa:?} x {sb:?}")
        })?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = da[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `A x` for `A: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(a), self.shape(x));
        check(sa.len() == 2 && sx.len() == 1 && sa[1] == sx[0], || {
            format!("matvec shape mismatch {sa:?} x {sx:?}")
        })?;
        let (m, n) = (sa[0], sa[1]);
        let (da, dx) = (self.data(a), self.data(x));
        let out = (0..m)
            .map(|i| da[i * n..(i + 1) * n].iter().zip(dx).map(|(p, q)| p * q).sum())
            .collect();
        Ok(self.push(Tensor::vector(out), Op::MatVec(a, x)))
    }

    /// `xᵀ A` for `x: [m]`, `A: [m, n]`.
    pub fn vecmat(&mut self, x: Var, a: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x), self.shape(a));
        check(sa.len() == 2 && sx.len() == 1 && sa[0] == sx[0], || {
            format!("vecmat shape mismatch {sx:?} x {sa:?}")
        })?;
        let (m, n) = (sa[0], sa[1]);
        let (da, dx) = (self.data(a), self.data(x));
        let mut out = vec![0.0; n];
        for i in 0..m {
            let xi = dx[i];
            for (o, &v) in out.iter_mut().zip(&da[i * n..(i + 1) * n]) {
                *o += xi * v;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::VecMat(x, a)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa == sb, || format!("{name} shape mismatch {sa:?} vs {sb:?}"))?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = sa.to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), op))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.map(x, |v| 1.0 - v, Op::OneMinus(x))
    }

    /// Elementwise product with a constant (no gradient flows to the constant).
    pub fn mul_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        check(self.data(x).len() == c.len(), || {
            format!("mul_const length mismatch {} vs {}", self.data(x).len(), c.len())
        })?;
        let out = self.data(x).iter().zip(c).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulConst(x, c.into())))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// Max-stabilized softmax over a vector. Positions with `mask[i] == false`
    /// get probability exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xs = self.data(x);
        check(self.shape(x).len() == 1, || "softmax expects a vector".into())?;
        if let Some(m) = mask {
            check(m.len() == xs.len(), || {
                format!("softmax mask length {} vs {}", m.len(), xs.len())
            })?;
            check(m.iter().any(|&b| b), || "softmax over an all-masked input".into())?;
        }
        let live = |i: usize| mask.is_none_or(|m| m[i]);
        let max = xs
            .iter()
            .enumerate()
            .filter(|&(i, _)| live(i))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, &v)| if live(i) { (v - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= z);
        Ok(self.push(Tensor::vector(out), Op::Softmax(x)))
    }

    /// `-ln(x + eps)` on a scalar.
    pub fn neg_log(&mut self, x: Var, eps: f64) -> Result<Var> {
        check(self.value(x).is_scalar(), || "neg_log expects a scalar".into())?;
        let v = self.data(x)[0];
        Ok(self.push(Tensor::scalar(-(v + eps).ln()), Op::NegLog { x, eps }))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), || "concat of nothing".into())?;
        let mut out = Vec::new();
        for &p in parts {
            check(self.shape(p).len() == 1, || "concat expects vectors".into())?;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(Tensor::vector(out), Op::Concat(parts.to_vec())))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.data(x).len();
        check(self.shape(x).len() == 1 && len > 0 && start + len <= n, || {
            format!("slice [{start}, {}) out of range for length {n}", start + len)
        })?;
        let out = self.data(x)[start..start + len].to_vec();
        Ok(self.push(Tensor::vector(out), Op::Slice { x, start }))
    }

    pub fn column(&mut self, m: Var, col: usize) -> Result<Var> {
        let s = self.shape(m);
        check(s.len() == 2 && col < s[1], || format!("column {col} of {s:?}"))?;
        let out = self.value(m).column(col);
        Ok(self.push(Tensor::vector(out), Op::Column { m, col }))
    }

    /// Builds a `[rows, cols.len()]` matrix from equal-length column vectors.
    pub fn stack_columns(&mut self, cols: &[Var]) -> Result<Var> {
        check(!cols.is_empty(), || "stack of no columns".into())?;
        let rows = self.data(cols[0]).len();
        for &c in cols {
            check(self.shape(c).len() == 1 && self.data(c).len() == rows, || {
                "stack_columns expects equal-length vectors".into()
            })?;
        }
        let n = cols.len();
        let mut out = vec![0.0; rows * n];
        for (j, &c) in cols.iter().enumerate() {
            for (i, &v) in self.data(c).iter().enumerate() {
                out[i * n + j] = v;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows, n], out), Op::StackColumns(cols.to_vec())))
    }

    /// Multiplies column `j` of `m: [r, c]` by `v[j]`.
    pub fn scale_columns(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        check(sm.len() == 2 && sv.len() == 1 && sm[1] == sv[0], || {
            format!("scale_columns shape mismatch {sm:?} by {sv:?}")
        })?;
        let c = sm[1];
        let dv = self.data(v);
        let out = self.data(m).iter().enumerate().map(|(i, &x)| x * dv[i % c]).collect();
        let shape = sm.to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::ScaleColumns(m, v)))
    }

    /// `a bᵀ` for vectors `a: [r]`, `b: [c]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        check(self.shape(a).len() == 1 && self.shape(b).len() == 1, || {
            "outer expects vectors".into()
        })?;
        let (da, db) = (self.data(a), self.data(b));
        let out = da.iter().flat_map(|&x| db.iter().map(move |&y| x * y)).collect();
        let shape = vec![da.len(), db.len()];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Outer(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        check(self.data(a).len() == self.data(b).len(), || "dot length mismatch".into())?;
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    /// Replaces entries with `keep[i] == false` by `fill`; they carry no gradient.
    pub fn fill_masked(&mut self, x: Var, keep: &[bool], fill: f64) -> Result<Var> {
        check(self.data(x).len() == keep.len(), || "fill_masked length mismatch".into())?;
        let out = self
            .data(x)
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { fill })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::FillMasked { x, keep: keep.into() }))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        check(self.value(loss).is_scalar(), || {
            format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))
        })?;
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            if self.grads.len() <= i {
                self.grads.resize_with(self.nodes.len(), || None);
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        fn acc_in<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf | Op::Param(_) | Op::Embed { .. } => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                let ga = acc_in(nodes, adj, *a);
                for r in 0..m {
                    for p in 0..k {
                        ga[r * k + p] += (0..n).map(|c| g[r * n + c] * vb[p * n + c]).sum::<f64>();
                    }
                }
                let gb = acc_in(nodes, adj, *b);
                for r in 0..m {
                    for p in 0..k {
                        let x = va[r * k + p];
                        for c in 0..n {
                            gb[p * n + c] += x * g[r * n + c];
                        }
                    }
                }
            }
            Op::MatVec(a, x) => {
                let n = nodes[a.0].value.shape()[1];
                let (va, vx) = (val(*a), val(*x));
                let ga = acc_in(nodes, adj, *a);
                for (r, &gr) in g.iter().enumerate() {
                    for (dst, &xv) in ga[r * n..(r + 1) * n].iter_mut().zip(vx) {
                        *dst += gr * xv;
                    }
                }
                let gx = acc_in(nodes, adj, *x);
                for (r, &gr) in g.iter().enumerate() {
                    for (dst, &av) in gx.iter_mut().zip(&va[r * n..(r + 1) * n]) {
                        *dst += gr * av;
                    }
                }
            }
            Op::VecMat(x, a) => {
                let n = nodes[a.0].value.shape()[1];
                let (va, vx) = (val(*a), val(*x));
                let gx = acc_in(nodes, adj, *x);
                for (r, dst) in gx.iter_mut().enumerate() {
                    *dst += va[r * n..(r + 1) * n].iter().zip(g).map(|(p, q)| p * q).sum::<f64>();
                }
                let ga = acc_in(nodes, adj, *a);
                for (r, &xr) in vx.iter().enumerate() {
                    for (dst, &gc) in ga[r * n..(r + 1) * n].iter_mut().zip(g) {
                        *dst += xr * gc;
                    }
                }
            }
            Op::Add(a, b) => {
                acc_in(nodes, adj, *a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                acc_in(nodes, adj, *b).iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::Sub(a, b) => {
                acc_in(nodes, adj, *a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                acc_in(nodes, adj, *b).iter_mut().zip(g).for_each(|(d, x)| *d -= x);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc_in(nodes, adj, *a).iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (x, y))| *d += x * y);
                acc_in(nodes, adj, *b).iter_mut().zip(g.iter().zip(va)).for_each(|(d, (x, y))| *d += x * y);
            }
            Op::Scale(x, f) => {
                acc_in(nodes, adj, *x).iter_mut().zip(g).for_each(|(d, v)| *d += f * v);
            }
            Op::OneMinus(x) => {
                acc_in(nodes, adj, *x).iter_mut().zip(g).for_each(|(d, v)| *d -= v);
            }
            Op::MulConst(x, c) => {
                acc_in(nodes, adj, *x).iter_mut().zip(g.iter().zip(c.iter())).for_each(|(d, (v, k))| *d += v * k);
            }
            Op::Sigmoid(x) => {
                acc_in(nodes, adj, *x)
                    .iter_mut()
                    .zip(g.iter().zip(out))
                    .for_each(|(d, (v, y))| *d += v * y * (1.0 - y));
            }
            Op::Tanh(x) => {
                acc_in(nodes, adj, *x)
                    .iter_mut()
                    .zip(g.iter().zip(out))
                    .for_each(|(d, (v, y))| *d += v * (1.0 - y * y));
            }
            Op::Softmax(x) => {
                let inner: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                acc_in(nodes, adj, *x)
                    .iter_mut()
                    .zip(g.iter().zip(out))
                    .for_each(|(d, (v, y))| *d += y * (v - inner));
            }
            Op::NegLog { x, eps } => {
                let v = val(*x)[0];
                acc_in(nodes, adj, *x)[0] -= g[0] / (v + eps);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    acc_in(nodes, adj, *p).iter_mut().zip(&g[off..off + n]).for_each(|(d, v)| *d += v);
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let gx = acc_in(nodes, adj, *x);
                gx[*start..*start + g.len()].iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::Column { m, col } => {
                let cols = nodes[m.0].value.shape()[1];
                let gm = acc_in(nodes, adj, *m);
                for (r, v) in g.iter().enumerate() {
                    gm[r * cols + col] += v;
                }
            }
            Op::StackColumns(cols) => {
                let n = cols.len();
                for (j, c) in cols.iter().enumerate() {
                    let gc = acc_in(nodes, adj, *c);
                    for (r, d) in gc.iter_mut().enumerate() {
                        *d += g[r * n + j];
                    }
                }
            }
            Op::ScaleColumns(m, v) => {
                let c = nodes[v.0].value.len();
                let (vm, vv) = (val(*m), val(*v));
                let gm = acc_in(nodes, adj, *m);
                for (idx, d) in gm.iter_mut().enumerate() {
                    *d += g[idx] * vv[idx % c];
                }
                let gv = acc_in(nodes, adj, *v);
                for (idx, (&gi, &mi)) in g.iter().zip(vm).enumerate() {
                    gv[idx % c] += gi * mi;
                }
            }
            Op::Outer(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let c = vb.len();
                let ga = acc_in(nodes, adj, *a);
                for (r, d) in ga.iter_mut().enumerate() {
                    *d += g[r * c..(r + 1) * c].iter().zip(vb).map(|(p, q)| p * q).sum::<f64>();
                }
                let gb = acc_in(nodes, adj, *b);
                for (r, &ar) in va.iter().enumerate() {
                    for (d, &gv) in gb.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d += ar * gv;
                    }
                }
            }
            Op::Sum(x) => {
                acc_in(nodes, adj, *x).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Dot(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc_in(nodes, adj, *a).iter_mut().zip(vb).for_each(|(d, y)| *d += g[0] * y);
                acc_in(nodes, adj, *b).iter_mut().zip(va).for_each(|(d, y)| *d += g[0] * y);
            }
            Op::FillMasked { x, keep } => {
                acc_in(nodes, adj, *x)
                    .iter_mut()
                    .zip(g.iter().zip(keep.iter()))
                    .for_each(|(d, (v, &k))| {
                        if k {
                            *d += v
                        }
                    });
            }
        }
    }

    /// Adds the accumulated gradients of every parameter node into `grads`.
    pub fn collect_param_grads(&self, grads: &mut Gradients) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            let Some(g) = g else { continue };
            match &node.op {
                Op::Param(id) => grads.add_dense(*id, g),
                Op::Embed { param, ids } => {
                    let len = ids.len();
                    let dim = node.value.rows();
                    let mut row = vec![0.0; dim];
                    for (j, &t) in ids.iter().enumerate() {
                        for (d, r) in row.iter_mut().enumerate() {
                            *r = g[d * len + j];
                        }
                        grads.add_row(*param, t, &row);
                    }
                }
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, seeded_rng, uniform_tensor};

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut t = Tape::new();
        let i2 = t.leaf(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = t.leaf(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.leaf(mat(&[vec![1.0, 2.0]]));
        let b = t.leaf(mat(&[vec![3.0], vec![4.0]]));
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab).shape(), &[1, 1]);
        assert_eq!(t.value(ab).item(), 11.0);

        let z = t.leaf(Tensor::zeros(&[2, 2]));
        let zm = t.matmul(z, m).unwrap();
        assert!(t.value(zm).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(NseError::InvalidInput(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let s = t.softmax(x, None).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);

        let x = t.leaf(Tensor::vector(vec![1000.0; 3]));
        let s = t.softmax(x, None).unwrap();
        for &v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = t.leaf(Tensor::vector(vec![0.0; 3]));
        let s = t.softmax(x, Some(&[true, true, false])).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5, 0.0]);

        assert!(t.softmax(x, Some(&[false, false, false])).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 800.0, -800.0, 3.7, -3.7]));
        let s = t.sigmoid(x);
        let v = t.value(s).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] <= 1.0 && v[1] > 0.999_999 && v[1].is_finite());
        assert!(v[2] >= 0.0 && v[2].is_finite());
        assert!((v[3] + v[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_sum_and_product() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.leaf(Tensor::scalar(-5.0));
        let p = t.mul(x, y).unwrap();
        t.backward(p).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), -5.0);
        assert_eq!(t.grad(y).unwrap().item(), 3.0);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![2.0, 1.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[8.0, 4.0]);
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn grad_shape_matches_value_shape() {
        let mut t = Tape::new();
        let m = t.leaf(Tensor::zeros(&[3, 2]));
        let v = t.leaf(Tensor::vector(vec![1.0, 1.0]));
        let y = t.matvec(m, v).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(m).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn embed_gathers_columns_and_scatters_rows() {
        let mut store = ParamStore::new();
        let table = store.add("emb", mat(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let mut t = Tape::new();
        let e = t.embed(&store, table, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(e).shape(), &[2, 3]);
        assert_eq!(t.value(e).column(0), vec![5.0, 6.0]);
        assert_eq!(t.value(e).column(1), vec![1.0, 2.0]);
        let s = t.sum(e);
        t.backward(s).unwrap();
        let mut grads = Gradients::for_store(&store);
        t.collect_param_grads(&mut grads);
        assert_eq!(grads.dense(table, 6), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(t.embed(&store, table, &[3]).is_err());
        assert!(t.embed(&store, table, &[]).is_err());
    }

    /// Every primitive, checked through a scalar reduction against finite
    /// differences at 100 random points.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let w = Tensor::from_rows(&[vec![0.3, -0.2, 0.5], vec![0.1, 0.4, -0.6]]).unwrap();
        let cases: Vec<(&str, Vec<usize>, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
            ("matmul", vec![3, 2], Box::new({
                let w = w.clone();
                move |t: &mut Tape, x| {
                    let wv = t.leaf(w.clone());
                    let p = t.matmul(x, wv)?;
                    let q = t.matmul(wv, x)?;
                    let a = t.sum(p);
                    let b = t.mul(q, q)?;
                    let b = t.sum(b);
                    let ab = t.mul(a, a)?;
                    t.add(ab, b)
                }
            })),
            ("matvec", vec![2, 3], Box::new(|t: &mut Tape, x| {
                let v = t.leaf(Tensor::vector(vec![0.7, -0.3, 0.2]));
                let y = t.matvec(x, v)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            })),
            ("vecmat", vec![2], Box::new({
                let w = w.clone();
                move |t: &mut Tape, x| {
                    let wv = t.leaf(w.clone());
                    let y = t.vecmat(x, wv)?;
                    let y = t.tanh(y);
                    Ok(t.sum(y))
                }
            })),
            ("sub_one_minus_scale", vec![4], Box::new(|t: &mut Tape, x| {
                let a = t.one_minus(x);
                let b = t.scale(x, 1.7);
                let c = t.sub(a, b)?;
                let c2 = t.mul(c, c)?;
                Ok(t.sum(c2))
            })),
            ("sigmoid", vec![5], Box::new(|t: &mut Tape, x| {
                let s = t.sigmoid(x);
                let c = t.mul_const(s, &[1.0, -2.0, 0.5, 3.0, 1.5])?;
                Ok(t.sum(c))
            })),
            ("softmax_masked", vec![4], Box::new(|t: &mut Tape, x| {
                let s = t.softmax(x, Some(&[true, false, true, true]))?;
                let c = t.mul_const(s, &[1.0, 5.0, -2.0, 0.3])?;
                Ok(t.sum(c))
            })),
            ("neg_log_softmax", vec![4], Box::new(|t: &mut Tape, x| {
                let s = t.softmax(x, None)?;
                let p = t.slice(s, 1, 1)?;
                let p = t.sum(p);
                t.neg_log(p, 1e-12)
            })),
            ("concat_slice_column_stack", vec![2, 3], Box::new(|t: &mut Tape, x| {
                let c0 = t.column(x, 0)?;
                let c2 = t.column(x, 2)?;
                let cat = t.concat(&[c2, c0, c2])?;
                let s = t.slice(cat, 1, 4)?;
                let st = t.stack_columns(&[c0, c2])?;
                let a = t.tanh(st);
                let a = t.sum(a);
                let b = t.mul(s, s)?;
                let b = t.sum(b);
                t.add(a, b)
            })),
            ("scale_columns_outer", vec![3], Box::new({
                let w = w.clone();
                move |t: &mut Tape, x| {
                    let m = t.leaf(w.clone());
                    let sc = t.scale_columns(m, x)?;
                    let o = t.outer(x, x)?;
                    let o = t.tanh(o);
                    let sq = t.mul(sc, sc)?;
                    let a = t.sum(sq);
                    let b = t.sum(o);
                    t.add(a, b)
                }
            })),
            ("dot_fill_masked", vec![3], Box::new(|t: &mut Tape, x| {
                let f = t.fill_masked(x, &[true, false, true], 1.0)?;
                let d = t.dot(f, x)?;
                let s = t.sigmoid(d);
                Ok(t.sum(s))
            })),
        ];
        let mut rng = seeded_rng(11);
        for (name, shape, f) in &cases {
            let mut worst: f64 = 0.0;
            for trial in 0..100 {
                let x = uniform_tensor(shape, -1.5, 1.5, &mut rng);
                let report = grad_check(name, |t, v| f(t, v), &x, 1e-5, usize::MAX, trial).unwrap();
                worst = worst.max(report.max_rel_error);
            }
            assert!(worst < 1e-4, "{name}: max relative error {worst:e}");
        }
    }

    #[test]
    fn repeated_passes_are_bit_identical() {
        let run = || {
            let mut rng = seeded_rng(5);
            let x = uniform_tensor(&[3, 4], -1.0, 1.0, &mut rng);
            let mut t = Tape::new();
            let v = t.leaf(x);
            let c = t.column(v, 1).unwrap();
            let s = t.softmax(c, None).unwrap();
            let w = t_const(&mut t);
            let m = t.matvec(v, w).unwrap();
            let d = t.dot(s, m).unwrap();
            t.backward(d).unwrap();
            (t.value(d).item().to_bits(), t.grad(v).unwrap())
        };
        fn t_const(t: &mut Tape) -> Var {
            t.leaf(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]))
        }
        assert_eq!(run(), run());
    }
}
