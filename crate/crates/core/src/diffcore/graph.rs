//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the tape once in reverse, which is a reverse topological order
//! because inputs always precede the nodes that consume them.

use super::tensor::{Tensor, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { x: Var, row: Var },
    RepeatRows { x: Var, times: usize },
    GroupMean { x: Var, group: usize },
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSumExp(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    LayerNorm { x: Var, eps: f64 },
    SplitHeads { x: Var, batch: usize, tokens: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, tokens: usize, heads: usize },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    NormalizeRows(Var),
    Cosine(Var, Var),
    Pick { x: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add(a, b) | Sub(a, b) | Mul(a, b) | Cosine(a, b) => vec![*a, *b],
            AddRow { x, row } => vec![*x, *row],
            Scale(x, _)
            | RepeatRows { x, .. }
            | GroupMean { x, .. }
            | Tanh(x)
            | Gelu(x)
            | Exp(x)
            | Log(x)
            | Softmax(x)
            | LogSumExp(x)
            | CrossEntropy { logits: x, .. }
            | LayerNorm { x, .. }
            | SplitHeads { x, .. }
            | MergeHeads { x, .. }
            | GatherRows { x, .. }
            | Reshape(x)
            | Transpose(x)
            | NormalizeRows(x)
            | Pick { x, .. }
            | Sum(x)
            | Mean(x) => vec![*x],
            ConcatRows(parts) => parts.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A recorded computation. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// `c (+)= op(a)·op(b)` for row-major buffers; `op` transposes when the flag is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe exactly the buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Logical matmul dimensions `(batch, m, k, n)`.
fn matmul_dims(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<(usize, usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
        return Err(Error::shape("matmul", format!("unsupported operand ranks {sa:?} x {sb:?}")));
    }
    let batch = if sa.len() == 3 {
        if sa[0] != sb[0] {
            return Err(Error::shape("matmul", format!("batch mismatch {sa:?} x {sb:?}")));
        }
        sa[0]
    } else {
        1
    };
    let r = sa.len();
    let (m, ka) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
    let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions disagree: {sa:?}{} x {sb:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" }),
        ));
    }
    Ok((batch, m, ka, n))
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - m).exp();
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
    out
}

fn lead_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn eval_op<'a>(op: &Op, val: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    use Op::*;
    let out = match op {
        Leaf => unreachable!("leaves are not evaluated"),
        MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, m, k, n) = matmul_dims(av, bv, *ta, *tb)?;
            let mut c = vec![0.0; batch * m * n];
            for g in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av.data()[g * m * k..(g + 1) * m * k],
                    *ta,
                    &bv.data()[g * k * n..(g + 1) * k * n],
                    *tb,
                    &mut c[g * m * n..(g + 1) * m * n],
                    false,
                );
            }
            let shape = if av.rank() == 3 { vec![batch, m, n] } else { vec![m, n] };
            Tensor::new(shape, c)?
        }
        Add(a, b) | Sub(a, b) | Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if av.shape() != bv.shape() {
                return Err(Error::shape("elementwise", format!("{:?} vs {:?}", av.shape(), bv.shape())));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Add(..) => |x, y| x + y,
                Sub(..) => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        }
        Scale(a, c) => {
            let av = val(*a);
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())?
        }
        AddRow { x, row } => {
            let (xv, rv) = (val(*x), val(*row));
            let d = xv.last_dim();
            if rv.len() != d {
                return Err(Error::shape("add_row", format!("row of {} vs last dim {d}", rv.len())));
            }
            let mut data = xv.data().to_vec();
            for chunk in data.chunks_mut(d) {
                for (o, r) in chunk.iter_mut().zip(rv.data()) {
                    *o += r;
                }
            }
            Tensor::new(xv.shape().to_vec(), data)?
        }
        RepeatRows { x, times } => {
            let xv = val(*x);
            let d = xv.last_dim();
            let mut data = Vec::with_capacity(xv.len() * times);
            for row in xv.data().chunks(d) {
                for _ in 0..*times {
                    data.extend_from_slice(row);
                }
            }
            Tensor::new(vec![xv.rows() * times, d], data)?
        }
        GroupMean { x, group } => {
            let xv = val(*x);
            let d = xv.last_dim();
            if !xv.rows().is_multiple_of(*group) {
                return Err(Error::shape("group_mean", format!("{} rows not divisible by {group}", xv.rows())));
            }
            let n = xv.rows() / group;
            let mut data = vec![0.0; n * d];
            for (r, row) in xv.data().chunks(d).enumerate() {
                let o = &mut data[(r / group) * d..(r / group + 1) * d];
                for (oi, xi) in o.iter_mut().zip(row) {
                    *oi += xi;
                }
            }
            let inv = 1.0 / *group as f64;
            data.iter_mut().for_each(|v| *v *= inv);
            Tensor::new(vec![n, d], data)?
        }
        Tanh(a) | Gelu(a) | Exp(a) => {
            let av = val(*a);
            let f: fn(f64) -> f64 = match op {
                Tanh(_) => f64::tanh,
                Gelu(_) => gelu,
                _ => f64::exp,
            };
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())?
        }
        Log(a) => {
            let av = val(*a);
            if av.data().iter().any(|&x| x <= 0.0) {
                return Err(Error::Domain("log of a non-positive value".into()));
            }
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x.ln()).collect())?
        }
        Softmax(a) => {
            let av = val(*a);
            Tensor::new(av.shape().to_vec(), softmax_rows(av.data(), av.last_dim()))?
        }
        LogSumExp(a) => {
            let av = val(*a);
            let d = av.last_dim();
            let data = av
                .data()
                .chunks(d)
                .map(|row| {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
                })
                .collect();
            Tensor::new(lead_shape(av.shape()), data)?
        }
        CrossEntropy { logits, targets } => {
            let lv = val(*logits);
            let d = lv.last_dim();
            if targets.len() != lv.rows() {
                return Err(Error::shape("cross_entropy", format!("{} targets for {} rows", targets.len(), lv.rows())));
            }
            let mut data = Vec::with_capacity(targets.len());
            for (row, &t) in lv.data().chunks(d).zip(targets) {
                if t >= d {
                    return Err(Error::Domain(format!("target {t} outside {d} classes")));
                }
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
                // (m - x_t) first: equal logits give exactly ln(d).
                data.push((m - row[t]) + s.ln());
            }
            Tensor::new(vec![targets.len()], data)?
        }
        LayerNorm { x, eps } => {
            let xv = val(*x);
            let d = xv.last_dim();
            let mut data = Vec::with_capacity(xv.len());
            for row in xv.data().chunks(d) {
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let r = 1.0 / (var + eps).sqrt();
                data.extend(row.iter().map(|v| (v - mu) * r));
            }
            Tensor::new(xv.shape().to_vec(), data)?
        }
        SplitHeads { x, batch, tokens, heads } => {
            let xv = val(*x);
            let d = xv.last_dim();
            if xv.rows() != batch * tokens || !d.is_multiple_of(*heads) {
                return Err(Error::shape("split_heads", format!("{:?} for {batch}x{tokens} tokens, {heads} heads", xv.shape())));
            }
            let dk = d / heads;
            let mut data = vec![0.0; xv.len()];
            for b in 0..*batch {
                for t in 0..*tokens {
                    let src = &xv.data()[(b * tokens + t) * d..(b * tokens + t + 1) * d];
                    for h in 0..*heads {
                        let dst = ((b * heads + h) * tokens + t) * dk;
                        data[dst..dst + dk].copy_from_slice(&src[h * dk..(h + 1) * dk]);
                    }
                }
            }
            Tensor::new(vec![batch * heads, *tokens, dk], data)?
        }
        MergeHeads { x, batch, tokens, heads } => {
            let xv = val(*x);
            let dk = xv.last_dim();
            if xv.len() != batch * heads * tokens * dk {
                return Err(Error::shape("merge_heads", format!("{:?}", xv.shape())));
            }
            let d = dk * heads;
            let mut data = vec![0.0; xv.len()];
            for b in 0..*batch {
                for h in 0..*heads {
                    for t in 0..*tokens {
                        let src = ((b * heads + h) * tokens + t) * dk;
                        let dst = (b * tokens + t) * d + h * dk;
                        data[dst..dst + dk].copy_from_slice(&xv.data()[src..src + dk]);
                    }
                }
            }
            Tensor::new(vec![batch * tokens, d], data)?
        }
        GatherRows { x, index } => {
            let xv = val(*x);
            let d = xv.last_dim();
            let rows = xv.rows();
            if index.is_empty() {
                return Err(Error::shape("gather_rows", "empty index"));
            }
            let mut data = Vec::with_capacity(index.len() * d);
            for &i in index {
                if i >= rows {
                    return Err(Error::Domain(format!("row {i} out of range for {rows} rows")));
                }
                data.extend_from_slice(xv.row(i));
            }
            Tensor::new(vec![index.len(), d], data)?
        }
        ConcatRows(parts) => {
            let d = val(parts[0]).last_dim();
            let mut data = Vec::new();
            for p in parts {
                let pv = val(*p);
                if pv.last_dim() != d {
                    return Err(Error::shape("concat_rows", format!("width {} vs {d}", pv.last_dim())));
                }
                data.extend_from_slice(pv.data());
            }
            let rows = data.len() / d;
            Tensor::new(vec![rows, d], data)?
        }
        Reshape(_) | Transpose(_) => unreachable!("shape ops are evaluated by their builders"),
        NormalizeRows(a) => {
            let av = val(*a);
            let d = av.last_dim();
            let mut data = Vec::with_capacity(av.len());
            for row in av.data().chunks(d) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < NORM_EPS {
                    return Err(Error::Domain("cannot normalise a zero-norm row".into()));
                }
                data.extend(row.iter().map(|v| v / n));
            }
            Tensor::new(av.shape().to_vec(), data)?
        }
        Cosine(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if av.len() != bv.len() {
                return Err(Error::shape("cosine_similarity", format!("lengths {} vs {}", av.len(), bv.len())));
            }
            match super::tensor::cosine(av.data(), bv.data()) {
                Some(c) => Tensor::scalar(c),
                None => return Err(Error::Domain("cosine similarity of a zero-norm vector".into())),
            }
        }
        Pick { x, index } => {
            let xv = val(*x);
            let mut data = Vec::with_capacity(index.len());
            for &i in index {
                data.push(*xv.data().get(i).ok_or_else(|| Error::Domain(format!("element {i} out of range")))?);
            }
            Tensor::new(vec![index.len()], data)?
        }
        Sum(a) => Tensor::scalar(pairwise_sum(val(*a).data())),
        Mean(a) => {
            let av = val(*a);
            Tensor::scalar(pairwise_sum(av.data()) / av.len() as f64)
        }
    };
    Ok(out)
}

/// Recursive halving keeps `n` equal values summing to exactly `n * x` when `n` is a power of two.
pub(crate) fn pairwise_sum(x: &[f64]) -> f64 {
    match x.len() {
        0 => 0.0,
        1 => x[0],
        n => pairwise_sum(&x[..n / 2]) + pairwise_sum(&x[n / 2..]),
    }
}

fn transpose2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("transpose", format!("expected a matrix, got {s:?}")));
    }
    let (r, c) = (s[0], s[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` output w.r.t. `v`, if `v` requires grad.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = {
            let nodes = &self.nodes;
            eval_op(&op, &|v: Var| &nodes[v.0].value)?
        };
        self.push_with(op, value)
    }

    fn push_with(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul { a, b, ta: false, tb: false })
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul { a, b, ta: false, tb: true })
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    /// Adds a `[d]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow { x, row })
    }

    /// `[n, d] -> [n*times, d]`, each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        self.push(Op::RepeatRows { x, times })
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        self.push(Op::GroupMean { x, group })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }

    pub fn logsumexp_lastdim(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSumExp(a))
    }

    /// Per-row `-log softmax(logits)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.push(Op::CrossEntropy { logits, targets })
    }

    /// Normalises the last dimension to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, eps })
    }

    pub fn split_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        self.push(Op::SplitHeads { x, batch, tokens, heads })
    }

    pub fn merge_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        self.push(Op::MergeHeads { x, batch, tokens, heads })
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows { x, index })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no parts"));
        }
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push_with(Op::Reshape(x), value)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = transpose2(self.value(x))?;
        self.push_with(Op::Transpose(x), value)
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::NormalizeRows(x))
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Cosine(a, b))
    }

    /// Gathers individual elements by flat index into a vector.
    pub fn pick(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        self.push(Op::Pick { x, index })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    /// Recomputes every node from the leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Reshape(x) => out[x.0].clone().reshape(node.value.shape().to_vec())?,
                Op::Transpose(x) => transpose2(&out[x.0])?,
                op => eval_op(op, &|v: Var| &out[v.0])?,
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Reverse sweep from a scalar `output`. Afterwards every node that
    /// requires grad holds `d output / d node`; unreachable ones hold zeros.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Tensor::new(node.value.shape().to_vec(), data).expect("gradient matches value shape")
                })
            })
            .collect();
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k, n) = matmul_dims(av, bv, *ta, *tb).expect("validated in forward");
                if needs(*a) {
                    acc(*a, &mut |ga| {
                        for bi in 0..batch {
                            let gc = &g[bi * m * n..(bi + 1) * m * n];
                            let bb = &bv.data()[bi * k * n..(bi + 1) * k * n];
                            let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                            if *ta {
                                gemm(k, n, m, bb, *tb, gc, true, dst, true);
                            } else {
                                gemm(m, n, k, gc, false, bb, !*tb, dst, true);
                            }
                        }
                    });
                }
                if needs(*b) {
                    acc(*b, &mut |gb| {
                        for bi in 0..batch {
                            let gc = &g[bi * m * n..(bi + 1) * m * n];
                            let aa = &av.data()[bi * m * k..(bi + 1) * m * k];
                            let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                            if *tb {
                                gemm(n, m, k, gc, true, aa, *ta, dst, true);
                            } else {
                                gemm(k, m, n, aa, !*ta, gc, false, dst, true);
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av.data()) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddRow { x, row } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                let d = val(*row).len();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(d) {
                        gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::RepeatRows { x, times } => {
                let d = val(*x).last_dim();
                acc(*x, &mut |gx| {
                    for (r, chunk) in g.chunks(d).enumerate() {
                        let dst = &mut gx[(r / times) * d..(r / times + 1) * d];
                        dst.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::GroupMean { x, group } => {
                let d = val(*x).last_dim();
                let inv = 1.0 / *group as f64;
                acc(*x, &mut |gx| {
                    for (r, chunk) in gx.chunks_mut(d).enumerate() {
                        let src = &g[(r / group) * d..(r / group + 1) * d];
                        chunk.iter_mut().zip(src).for_each(|(a, b)| *a += b * inv);
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gi * (1.0 - y * y);
                }
            }),
            Op::Gelu(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gi), xi) in ga.iter_mut().zip(g).zip(av.data()) {
                        *x += gi * gelu_grad(*xi);
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gi * y;
                }
            }),
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gi), xi) in ga.iter_mut().zip(g).zip(av.data()) {
                        *x += gi / xi;
                    }
                });
            }
            Op::Softmax(a) => {
                let d = out.last_dim();
                acc(*a, &mut |ga| {
                    for ((gx, gy), y) in ga.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                        let s: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                        for ((x, gi), yi) in gx.iter_mut().zip(gy).zip(y) {
                            *x += yi * (gi - s);
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let av = val(*a);
                let d = av.last_dim();
                let p = softmax_rows(av.data(), d);
                acc(*a, &mut |ga| {
                    for (r, (gx, pr)) in ga.chunks_mut(d).zip(p.chunks(d)).enumerate() {
                        for (x, pi) in gx.iter_mut().zip(pr) {
                            *x += g[r] * pi;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = val(*logits);
                let d = lv.last_dim();
                let p = softmax_rows(lv.data(), d);
                acc(*logits, &mut |gl| {
                    for (r, (gx, pr)) in gl.chunks_mut(d).zip(p.chunks(d)).enumerate() {
                        for (j, (x, pi)) in gx.iter_mut().zip(pr).enumerate() {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            *x += g[r] * (pi - onehot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, eps } => {
                let xv = val(*x);
                let d = xv.last_dim();
                acc(*x, &mut |gx| {
                    for ((dst, row), (gy, y)) in gx
                        .chunks_mut(d)
                        .zip(xv.data().chunks(d))
                        .zip(g.chunks(d).zip(out.data().chunks(d)))
                    {
                        let mu = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                        let r = 1.0 / (var + eps).sqrt();
                        let mg = gy.iter().sum::<f64>() / d as f64;
                        let mgy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, gi), yi) in dst.iter_mut().zip(gy).zip(y) {
                            *o += r * (gi - mg - yi * mgy);
                        }
                    }
                });
            }
            Op::SplitHeads { x, batch, tokens, heads } => {
                let d = val(*x).last_dim();
                let dk = d / heads;
                acc(*x, &mut |gx| {
                    for b in 0..*batch {
                        for t in 0..*tokens {
                            for h in 0..*heads {
                                let src = ((b * heads + h) * tokens + t) * dk;
                                let dst = (b * tokens + t) * d + h * dk;
                                for j in 0..dk {
                                    gx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, batch, tokens, heads } => {
                let dk = val(*x).last_dim();
                let d = dk * heads;
                acc(*x, &mut |gx| {
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for t in 0..*tokens {
                                let dst = ((b * heads + h) * tokens + t) * dk;
                                let src = (b * tokens + t) * d + h * dk;
                                for j in 0..dk {
                                    gx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let d = val(*x).last_dim();
                acc(*x, &mut |gx| {
                    for (r, &src) in index.iter().enumerate() {
                        let dst = &mut gx[src * d..(src + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    let src = &g[offset..offset + n];
                    acc(*p, &mut |gp| gp.iter_mut().zip(src).for_each(|(a, b)| *a += b));
                    offset += n;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::Transpose(x) => {
                let s = val(*x).shape();
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let av = val(*a);
                let d = av.last_dim();
                acc(*a, &mut |ga| {
                    for ((dst, row), (gy, y)) in ga
                        .chunks_mut(d)
                        .zip(av.data().chunks(d))
                        .zip(g.chunks(d).zip(out.data().chunks(d)))
                    {
                        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let proj: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                        for ((o, gi), yi) in dst.iter_mut().zip(gy).zip(y) {
                            *o += (gi - yi * proj) / n;
                        }
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let c = out.item();
                let go = g[0];
                acc(*a, &mut |ga| {
                    for ((o, ai), bi) in ga.iter_mut().zip(av).zip(bv) {
                        *o += go * (bi / (na * nb) - c * ai / (na * na));
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, bi), ai) in gb.iter_mut().zip(bv).zip(av) {
                        *o += go * (ai / (na * nb) - c * bi / (nb * nb));
                    }
                });
            }
            Op::Pick { x, index } => acc(*x, &mut |gx| {
                for (r, &src) in index.iter().enumerate() {
                    gx[src] += g[r];
                }
            }),
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let inv = g[0] / val(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += inv));
            }
        }
    }
}
