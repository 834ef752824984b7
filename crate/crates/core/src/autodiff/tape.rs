use std::collections::BTreeMap;
use std::sync::Arc;

use super::exact::ExactSum;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Sum(Var),
    SumLast(Var),
    SegmentSum(Var),
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    SliceLast(Var, usize),
    Reshape(Var),
    Softmax(Var),
    NormLast(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Transpose(..) => "transpose",
            Op::Silu(..) => "silu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::SumLast(..) => "sum_last",
            Op::SegmentSum(..) => "segment_sum",
            Op::Gather(..) => "gather",
            Op::Concat(..) => "concat",
            Op::SliceLast(..) => "slice_last",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::NormLast(..) => "norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    // Segment ids for SegmentSum, kept out of `Op` so the enum stays small.
    aux: Option<Arc<[usize]>>,
}

/// Single-writer record of primitive operations.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// the backward pass walks the node list in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(&'static str, usize)>,
}

/// Gradients of a scalar output with respect to every `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

/// Evaluates `expr` on a fresh tape and differentiates its scalar result.
pub fn forward_backward<F>(expr: F) -> Result<(Tensor, Gradients)>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = expr(&mut tape)?;
    let grads = tape.backward(out)?;
    Ok((tape.value(out).clone(), grads))
}

// ---------------------------------------------------------------------------
// Broadcasting

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_offset, a_offset, b_offset)` for every output element.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for k in 0..inner {
            f(o + k, oa + k * ia, ob + k * ib);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Dense kernels. Every output element accumulates over the inner index in
// ascending order, independent of its row position.

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
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

fn transpose_last2(data: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let (r, c) = (shape[rank - 2], shape[rank - 1]);
    let batch: usize = shape[..rank - 2].iter().product();
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = data[base + i * c + j];
            }
        }
    }
    let mut s = shape.to_vec();
    s.swap(rank - 2, rank - 1);
    (out, s)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First primitive that produced a non-finite value, if any.
    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some((op, node)) => Err(Error::NumericFault {
                op,
                node,
                context: String::new(),
            }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_full(value, op, needs_grad, None)
    }

    fn push_full(
        &mut self,
        value: Tensor,
        op: Op,
        needs_grad: bool,
        aux: Option<Arc<[usize]>>,
    ) -> Var {
        let id = self.nodes.len();
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some((op.name(), id));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux,
        });
        Var(id)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // -- leaves -------------------------------------------------------------

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // -- elementwise --------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let value = if sa == sb {
            let data = self
                .data(a)
                .iter()
                .zip(self.data(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts(sa, data)
        } else {
            let out = broadcast_shape(&sa, &sb).unwrap_or_else(|| {
                panic!("{}: shapes {sa:?} and {sb:?} do not broadcast", op.name())
            });
            let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            let mut data = vec![0.0; out.iter().product()];
            let (da, db) = (self.data(a), self.data(b));
            for_each_broadcast(&out, &ta, &tb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            Tensor::from_parts(out, data)
        };
        let g = self.ng(a) || self.ng(b);
        self.push(value, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let v = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        let g = self.ng(x);
        self.push(v, Op::Scale(x, c), g)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let v = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect());
        let g = self.ng(x);
        self.push(v, Op::Offset(x), g)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[x.0].value;
        let v = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let g = self.ng(x);
        self.push(v, op, g)
    }

    /// x * sigmoid(x)
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    // -- linear algebra -----------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Tape::matmul`], but each inner product is correctly rounded so
    /// the result is independent of the order of the inner index. Use when
    /// the inner index runs over set members (molecules, atoms).
    pub fn matmul_exact(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, exact: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (self.data(a), self.data(b));
        if exact {
            let mut acc = ExactSum::new();
            for i in 0..m {
                for j in 0..n {
                    acc.clear();
                    for p in 0..k {
                        acc.add(da[i * k + p] * db[p * n + j]);
                    }
                    out[i * n + j] = acc.value();
                }
            }
        } else {
            matmul_kernel(da, db, m, k, n, &mut out);
        }
        let g = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), g)
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "bmm: incompatible shapes {sa:?} x {sb:?}"
        );
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for bi in 0..bs {
            matmul_kernel(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let g = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(vec![bs, m, n], out), Op::BatchMatMul(a, b), g)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        assert!(t.rank() >= 2, "transpose needs rank >= 2");
        let (data, shape) = transpose_last2(t.data(), t.shape());
        let g = self.ng(x);
        self.push(Tensor::from_parts(shape, data), Op::Transpose(x), g)
    }

    // -- reductions ---------------------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = ExactSum::new();
        for &v in self.data(x) {
            acc.add(v);
        }
        let g = self.ng(x);
        self.push(Tensor::scalar(acc.value()), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let n = *t.shape().last().expect("sum_last on rank-0");
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let mut acc = ExactSum::new();
        let data = t
            .data()
            .chunks(n.max(1))
            .map(|c| {
                acc.clear();
                c.iter().for_each(|&v| acc.add(v));
                acc.value()
            })
            .collect();
        let g = self.ng(x);
        self.push(Tensor::from_parts(shape, data), Op::SumLast(x), g)
    }

    /// Sums rows (first-axis slices) into `segments` buckets: row `r` is added
    /// to bucket `ids[r]`. Each output element is correctly rounded.
    pub fn segment_sum(&mut self, x: Var, ids: Arc<[usize]>, segments: usize) -> Var {
        let t = &self.nodes[x.0].value;
        assert_eq!(ids.len(), t.rows(), "segment_sum: one id per row required");
        let width = t.row_len();
        let mut counts = vec![0usize; segments + 1];
        for &s in ids.iter() {
            assert!(s < segments, "segment id {s} out of range {segments}");
            counts[s + 1] += 1;
        }
        for s in 0..segments {
            counts[s + 1] += counts[s];
        }
        let mut order = vec![0usize; ids.len()];
        let mut fill = counts.clone();
        for (r, &s) in ids.iter().enumerate() {
            order[fill[s]] = r;
            fill[s] += 1;
        }
        let data = t.data();
        let mut out = vec![0.0; segments * width];
        let mut acc = ExactSum::new();
        for s in 0..segments {
            let rows = &order[counts[s]..counts[s + 1]];
            let dst = &mut out[s * width..(s + 1) * width];
            match rows {
                [] => {}
                [r] => dst.copy_from_slice(&data[r * width..(r + 1) * width]),
                // A single addition is correctly rounded and commutative.
                [r0, r1] => {
                    for c in 0..width {
                        dst[c] = data[r0 * width + c] + data[r1 * width + c];
                    }
                }
                _ => {
                    for (c, d) in dst.iter_mut().enumerate() {
                        acc.clear();
                        for &r in rows {
                            acc.add(data[r * width + c]);
                        }
                        *d = acc.value();
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        if shape.is_empty() {
            shape.push(segments);
        } else {
            shape[0] = segments;
        }
        let g = self.ng(x);
        self.push_full(
            Tensor::from_parts(shape, out),
            Op::SegmentSum(x),
            g,
            Some(ids),
        )
    }

    // -- indexing and layout ------------------------------------------------

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>) -> Var {
        let t = &self.nodes[x.0].value;
        let width = t.row_len();
        let rows = t.rows();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &r in idx.iter() {
            assert!(r < rows, "gather index {r} out of range {rows}");
            out.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let g = self.ng(x);
        self.push(Tensor::from_parts(shape, out), Op::Gather(x, idx), g)
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let lead = {
            let s = self.shape(xs[0]);
            s[..s.len() - 1].to_vec()
        };
        let outer: usize = lead.iter().product();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat: leading shapes differ");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; outer * total];
        let mut col = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let d = self.data(v);
            for r in 0..outer {
                out[r * total + col..r * total + col + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        let g = xs.iter().any(|&v| self.ng(v));
        self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec()), g)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[x.0].value;
        let w = *t.shape().last().unwrap();
        assert!(start + len <= w, "slice_last out of range");
        let outer = t.numel() / w.max(1);
        let mut out = Vec::with_capacity(outer * len);
        for r in 0..outer {
            out.extend_from_slice(&t.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let g = self.ng(x);
        self.push(Tensor::from_parts(shape, out), Op::SliceLast(x, start), g)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = &self.nodes[x.0].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            t.numel(),
            "reshape {:?} -> {shape:?}",
            t.shape()
        );
        let v = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        let g = self.ng(x);
        self.push(v, Op::Reshape(x), g)
    }

    // -- normalisation ------------------------------------------------------

    /// Softmax over the last axis. Where `mask` is given (one flag per
    /// last-axis position) masked positions receive probability exactly 0.
    pub fn softmax_last(&mut self, x: Var, mask: Option<Arc<[bool]>>) -> Var {
        let t = &self.nodes[x.0].value;
        let n = *t.shape().last().unwrap();
        if let Some(m) = &mask {
            assert_eq!(m.len(), n, "softmax mask length");
        }
        let keep = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
        let mut out = vec![0.0; t.numel()];
        let mut acc = ExactSum::new();
        for (row, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            let mx = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            acc.clear();
            for j in (0..n).filter(|&j| keep(j)) {
                dst[j] = (row[j] - mx).exp();
                acc.add(dst[j]);
            }
            let z = acc.value();
            for j in (0..n).filter(|&j| keep(j)) {
                dst[j] /= z;
            }
        }
        let shape = t.shape().to_vec();
        let g = self.ng(x);
        self.push_full(Tensor::from_parts(shape, out), Op::Softmax(x), g, None)
    }

    /// Euclidean norm over the last axis (kept with size 1). The gradient at
    /// a zero vector is taken as zero.
    pub fn norm_last(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let n = *t.shape().last().unwrap();
        let data = t
            .data()
            .chunks(n)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let g = self.ng(x);
        self.push(Tensor::from_parts(shape, data), Op::NormLast(x), g)
    }

    // -- backward -----------------------------------------------------------

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        self.check()?;
        let seed = &self.nodes[out.0].value;
        if seed.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        let mut result = Gradients::default();

        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                result
                    .grads
                    .insert(Var(id), Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(result)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.bcast_back(node, *a, *b, g, grads, |gv, _, _| (gv, sign * gv));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.bcast_back(node, *a, *b, g, grads, |gv, ia, ib| (gv * db[ib], gv * da[ia]));
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.bcast_back(node, *a, *b, g, grads, |gv, ia, ib| {
                    let q = gv / db[ib];
                    (q, -q * da[ia] / db[ib])
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |gx| {
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += c * gv;
                }
            }),
            Op::Offset(x) | Op::Reshape(x) => self.acc(grads, *x, |gx| {
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += gv;
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| matmul_nt_acc(g, db, m, n, k, ga));
                self.acc(grads, *b, |gb| matmul_tn_acc(da, g, m, k, n, gb));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..bs {
                        matmul_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &db[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..bs {
                        matmul_tn_acc(
                            &da[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let (gt, _) = transpose_last2(g, node.value.shape());
                self.acc(grads, *x, |gx| {
                    for (o, v) in gx.iter_mut().zip(&gt) {
                        *o += v;
                    }
                });
            }
            Op::Silu(x) => {
                let dx = self.data(*x);
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        let s = sigmoid(dx[i]);
                        gx[i] += g[i] * s * (1.0 + dx[i] * (1.0 - s));
                    }
                });
            }
            Op::Tanh(x) => self.acc(grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(x) => self.acc(grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Sqrt(x) => self.acc(grads, *x, |gx| {
                for i in 0..gx.len() {
                    if y[i] > 0.0 {
                        gx[i] += g[i] * 0.5 / y[i];
                    }
                }
            }),
            Op::Sum(x) => self.acc(grads, *x, |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::SumLast(x) => {
                let n = *self.shape(*x).last().unwrap();
                self.acc(grads, *x, |gx| {
                    for (r, chunk) in gx.chunks_mut(n).enumerate() {
                        for o in chunk {
                            *o += g[r];
                        }
                    }
                });
            }
            Op::SegmentSum(x) => {
                let ids = node.aux.as_ref().unwrap();
                let w = self.value(*x).row_len();
                self.acc(grads, *x, |gx| {
                    for (r, &s) in ids.iter().enumerate() {
                        for c in 0..w {
                            gx[r * w + c] += g[s * w + c];
                        }
                    }
                });
            }
            Op::Gather(x, idx) => {
                let w = self.value(*x).row_len();
                self.acc(grads, *x, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..w {
                            gx[src * w + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let total = *node.value.shape().last().unwrap();
                let outer = node.value.numel() / total.max(1);
                let mut col = 0;
                for &v in xs {
                    let w = *self.shape(v).last().unwrap();
                    self.acc(grads, v, |gv| {
                        for r in 0..outer {
                            for c in 0..w {
                                gv[r * w + c] += g[r * total + col + c];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::SliceLast(x, start) => {
                let w = *self.shape(*x).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let outer = node.value.numel() / len.max(1);
                self.acc(grads, *x, |gx| {
                    for r in 0..outer {
                        for c in 0..len {
                            gx[r * w + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |gx| {
                    for ((yr, gr), or) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            or[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::NormLast(x) => {
                let dx = self.data(*x);
                let n = *self.shape(*x).last().unwrap();
                self.acc(grads, *x, |gx| {
                    for (r, chunk) in gx.chunks_mut(n).enumerate() {
                        if y[r] > 0.0 {
                            for (c, o) in chunk.iter_mut().enumerate() {
                                *o += g[r] * dx[r * n + c] / y[r];
                            }
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn bcast_back(
        &self,
        node: &Node,
        a: Var,
        b: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        f: impl Fn(f64, usize, usize) -> (f64, f64),
    ) {
        let out = node.value.shape();
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (ta, tb) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
        let (na, nb) = (self.ng(a), self.ng(b));
        let mut ga = na.then(|| vec![0.0; self.value(a).numel()]);
        let mut gb = nb.then(|| vec![0.0; self.value(b).numel()]);
        for_each_broadcast(out, &ta, &tb, |o, ia, ib| {
            let (x, y) = f(g[o], ia, ib);
            if let Some(ga) = ga.as_mut() {
                ga[ia] += x;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += y;
            }
        });
        if let Some(ga) = ga {
            self.acc(grads, a, |s| s.iter_mut().zip(&ga).for_each(|(o, v)| *o += v));
        }
        if let Some(gb) = gb {
            self.acc(grads, b, |s| s.iter_mut().zip(&gb).for_each(|(o, v)| *o += v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[1, 3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 3, 2], &[3, 1]), Some(vec![4, 3, 2]));
        assert_eq!(broadcast_shape(&[4, 3], &[2]), None);
    }

    #[test]
    fn product_rule() {
        let (v, g) = forward_backward(|t| {
            let x = t.param(Tensor::scalar(2.0));
            let y = t.param(Tensor::scalar(5.0));
            Ok(t.mul(x, y))
        })
        .unwrap();
        assert_eq!(v.data(), &[10.0]);
        let grads: Vec<f64> = g.iter().map(|(_, t)| t.data()[0]).collect();
        assert_eq!(grads, vec![5.0, 2.0]);
    }

    #[test]
    fn norm_gradient_is_unit_vector() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![3.0, 4.0, 0.0]));
        let n = t.norm_last(x);
        assert_eq!(t.value(n).data(), &[5.0]);
        let g = t.backward(n).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.6, 0.8, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.5));
        let c = t.constant(Tensor::scalar(4.0));
        let y = t.mul(x, c);
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_finite_values_are_reported_with_the_primitive() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.param(Tensor::scalar(0.0));
        let q = t.div(x, y);
        match t.backward(q) {
            Err(Error::NumericFault { op, .. }) => assert_eq!(op, "div"),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let mask: Arc<[bool]> = vec![true, false, true].into();
        let s = t.softmax_last(x, Some(mask));
        let d = t.value(s).data();
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn segment_sum_groups_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let s = t.segment_sum(x, vec![1, 0, 1, 1].into(), 3);
        assert_eq!(t.value(s).data(), &[3., 4., 13., 16., 0., 0.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }
}
