//! Tape-based reverse-mode differentiation. Operations append nodes that
//! record their inputs; `backward` walks the tape in reverse and accumulates
//! adjoints. Node evaluation order is the insertion order, so repeated runs
//! over identical inputs are bit-identical.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{numel, NumError, Tensor};
use crate::fmath;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    /// Copies a value, cutting the gradient path to its source.
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Matmul(Var, Var),
    Transpose(Var),
    ConcatFlat(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    MeanPoolRows(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    CausalSoftmaxRows(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    /// x * ln(x) elementwise with f(0) = 0.
    XLnX(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Embedding { table: Var, ids: Vec<usize> },
    AddRowVec(Var, Var),
    CrossEntropy { logits: Var, target: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    inner: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, or `None` when no path
    /// reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.inner.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient as a dense tensor, zero-filled when no path reached `v`.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Recording of a computation. All operations validate shapes up front and
/// return `Err` rather than panic on user-reachable misuse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced on tape");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    /// Re-enters `v`'s value as a constant: forward-identical, no gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Detach)
    }

    fn binary_shapes(
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
    ) -> Result<Vec<usize>, NumError> {
        if a.shape() == b.shape() {
            Ok(a.shape().to_vec())
        } else if a.is_scalar() {
            Ok(b.shape().to_vec())
        } else if b.is_scalar() {
            Ok(a.shape().to_vec())
        } else {
            Err(NumError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            })
        }
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = Self::binary_shapes(op_name, ta, tb)?;
        let n = numel(&shape);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let x = ta.data()[if ta.is_scalar() { 0 } else { i }];
            let y = tb.data()[if tb.is_scalar() { 0 } else { i }];
            data.push(f(x, y));
        }
        Ok(self.push(Tensor { shape, data }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::AddConst(a))
    }

    /// Matrix product over 2-D operands, with 1-D promotion: `[k]x[k,m] -> [m]`
    /// and `[n,k]x[k] -> [n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ar, ac, out_keeps_rows) = match ta.shape() {
            [r, c] => (*r, *c, true),
            [c] => (1, *c, false),
            s => {
                return Err(NumError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("left operand has shape {s:?}"),
                })
            }
        };
        let (br, bc, out_keeps_cols) = match tb.shape() {
            [r, c] => (*r, *c, true),
            [r] => (*r, 1, false),
            s => {
                return Err(NumError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("right operand has shape {s:?}"),
                })
            }
        };
        if ac != br {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut out = vec![0.0; ar * bc];
        for i in 0..ar {
            for k in 0..ac {
                let aik = ta.data()[i * ac + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &tb.data()[k * bc..(k + 1) * bc];
                let orow = &mut out[i * bc..(i + 1) * bc];
                for j in 0..bc {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let shape = match (out_keeps_rows, out_keeps_cols) {
            (true, true) => vec![ar, bc],
            (false, true) => vec![bc],
            (true, false) => vec![ar],
            (false, false) => vec![],
        };
        Ok(self.push(Tensor { shape, data: out }, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let [r, c] = *ta.shape() else {
            return Err(NumError::ShapeMismatch {
                op: "transpose",
                detail: format!("expected 2-D, got {:?}", ta.shape()),
            });
        };
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data()[i * c + j];
            }
        }
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a)))
    }

    /// Flattens each input and concatenates into one vector.
    pub fn concat_flat(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(NumError::ShapeMismatch {
                op: "concat_flat",
                detail: "no inputs".into(),
            });
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        Ok(self.push(Tensor { shape: vec![n], data }, Op::ConcatFlat(parts.to_vec())))
    }

    /// Stacks equal-length vectors into a matrix, one row per input.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(NumError::ShapeMismatch {
                op: "stack_rows",
                detail: "no inputs".into(),
            });
        }
        let width = self.value(parts[0]).len();
        let mut data = Vec::with_capacity(parts.len() * width);
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 || t.len() != width {
                return Err(NumError::ShapeMismatch {
                    op: "stack_rows",
                    detail: format!("expected [{width}], got {:?}", t.shape()),
                });
            }
            data.extend_from_slice(t.data());
        }
        let shape = vec![parts.len(), width];
        Ok(self.push(Tensor { shape, data }, Op::StackRows(parts.to_vec())))
    }

    /// Extracts row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, NumError> {
        let ta = self.value(a);
        let [r, c] = *ta.shape() else {
            return Err(NumError::ShapeMismatch {
                op: "row",
                detail: format!("expected 2-D, got {:?}", ta.shape()),
            });
        };
        if i >= r {
            return Err(NumError::ShapeMismatch {
                op: "row",
                detail: format!("row {i} of {r}"),
            });
        }
        let data = ta.data()[i * c..(i + 1) * c].to_vec();
        Ok(self.push(Tensor { shape: vec![c], data }, Op::Row(a, i)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let ta = self.value(a);
        let [r, c] = *ta.shape() else {
            return Err(NumError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("expected 2-D, got {:?}", ta.shape()),
            });
        };
        if start >= end || end > r {
            return Err(NumError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {start}..{end} of {r}"),
            });
        }
        let data = ta.data()[start * c..end * c].to_vec();
        let shape = vec![end - start, c];
        Ok(self.push(Tensor { shape, data }, Op::SliceRows(a, start, end)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let ta = self.value(a);
        let [r, c] = *ta.shape() else {
            return Err(NumError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("expected 2-D, got {:?}", ta.shape()),
            });
        };
        if start >= end || end > c {
            return Err(NumError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {start}..{end} of {c}"),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * c + start..i * c + end]);
        }
        Ok(self.push(Tensor { shape: vec![r, w], data }, Op::SliceCols(a, start, end)))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(NumError::ShapeMismatch {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let rows = match self.value(parts[0]).shape() {
            [r, _] => *r,
            s => {
                return Err(NumError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("expected 2-D, got {s:?}"),
                })
            }
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.value(p).shape() {
                [r, c] if *r == rows => widths.push(*c),
                s => {
                    return Err(NumError::ShapeMismatch {
                        op: "concat_cols",
                        detail: format!("expected [{rows}, _], got {s:?}"),
                    })
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let t = self.value(p);
                data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
        }
        let shape = vec![rows, total];
        Ok(self.push(Tensor { shape, data }, Op::ConcatCols(parts.to_vec())))
    }

    /// Concatenates matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(NumError::ShapeMismatch {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        }
        let cols = match self.value(parts[0]).shape() {
            [_, c] => *c,
            s => {
                return Err(NumError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("expected 2-D, got {s:?}"),
                })
            }
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            match self.value(p).shape() {
                [r, c] if *c == cols => rows += r,
                s => {
                    return Err(NumError::ShapeMismatch {
                        op: "concat_rows",
                        detail: format!("expected [_, {cols}], got {s:?}"),
                    })
                }
            }
            data.extend_from_slice(self.value(p).data());
        }
        let shape = vec![rows, cols];
        Ok(self.push(Tensor { shape, data }, Op::ConcatRows(parts.to_vec())))
    }

    /// Picks elements of a vector at the given positions.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var, NumError> {
        let ta = self.value(a);
        if ta.shape().len() != 1 {
            return Err(NumError::ShapeMismatch {
                op: "gather",
                detail: format!("expected 1-D, got {:?}", ta.shape()),
            });
        }
        let n = ta.len();
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= n {
                return Err(NumError::IndexOutOfVocab { index: i, size: n });
            }
            data.push(ta.data()[i]);
        }
        let shape = vec![indices.len()];
        Ok(self.push(Tensor { shape, data }, Op::Gather(a, indices.to_vec())))
    }

    /// Mean over rows of a matrix, producing a vector.
    pub fn mean_pool_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let [r, c] = *ta.shape() else {
            return Err(NumError::ShapeMismatch {
                op: "mean_pool_rows",
                detail: format!("expected 2-D, got {:?}", ta.shape()),
            });
        };
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += ta.data()[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        Ok(self.push(Tensor { shape: vec![c], data }, Op::MeanPoolRows(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    fn softmax_row(row: &[f64], out: &mut [f64]) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            let e = fmath::exp(x - max);
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }

    /// Row-wise softmax; a vector is treated as one row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let (r, c) = match ta.shape() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            s => {
                return Err(NumError::ShapeMismatch {
                    op: "softmax_rows",
                    detail: format!("expected 1-D or 2-D, got {s:?}"),
                })
            }
        };
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            Self::softmax_row(&ta.data()[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::SoftmaxRows(a)))
    }

    /// Row-wise softmax over a square score matrix where row `i` attends only
    /// to columns `0..=i`; later columns get exactly zero weight.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let [r, c] = *ta.shape() else {
            return Err(NumError::ShapeMismatch {
                op: "causal_softmax_rows",
                detail: format!("expected 2-D, got {:?}", ta.shape()),
            });
        };
        if r != c {
            return Err(NumError::ShapeMismatch {
                op: "causal_softmax_rows",
                detail: format!("expected square, got [{r}, {c}]"),
            });
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            Self::softmax_row(
                &ta.data()[i * c..i * c + i + 1],
                &mut data[i * c..i * c + i + 1],
            );
        }
        let shape = vec![r, c];
        Ok(self.push(Tensor { shape, data }, Op::CausalSoftmaxRows(a)))
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, op)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(a, fmath::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map_unary(a, fmath::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map_unary(a, fmath::sqrt, Op::Sqrt(a))
    }

    /// Elementwise `x ln x`, continuously extended with `0 ln 0 = 0`.
    pub fn xlnx(&mut self, a: Var) -> Var {
        self.map_unary(
            a,
            |x| if x > 0.0 { x * fmath::ln(x) } else { 0.0 },
            Op::XLnX(a),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_unary(a, gelu_fwd, Op::Gelu(a))
    }

    /// Per-row layer normalization with learnable gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumError> {
        let tx = self.value(x);
        let (r, c) = match tx.shape() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            s => {
                return Err(NumError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("expected 1-D or 2-D, got {s:?}"),
                })
            }
        };
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(NumError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / shift {:?} against width {c}",
                    tg.shape(),
                    tb.shape()
                ),
            });
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let (mean, inv_sigma) = row_norm_stats(row);
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_sigma;
                data[i * c + j] = xhat * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::LayerNorm { x, gamma, beta }))
    }

    /// Looks up rows of `table` for each id, producing `[ids.len(), width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let tt = self.value(table);
        let [v, d] = *tt.shape() else {
            return Err(NumError::ShapeMismatch {
                op: "embedding",
                detail: format!("expected 2-D table, got {:?}", tt.shape()),
            });
        };
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumError::IndexOutOfVocab { index: id, size: v });
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let shape = vec![ids.len(), d];
        Ok(self.push(Tensor { shape, data }, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var, NumError> {
        let (ta, tv) = (self.value(a), self.value(v));
        let [r, c] = *ta.shape() else {
            return Err(NumError::ShapeMismatch {
                op: "add_row_vec",
                detail: format!("expected 2-D, got {:?}", ta.shape()),
            });
        };
        if tv.shape() != [c] {
            return Err(NumError::ShapeMismatch {
                op: "add_row_vec",
                detail: format!("vector {:?} against width {c}", tv.shape()),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(ta.data()[i * c + j] + tv.data()[j]);
            }
        }
        Ok(self.push(Tensor { shape: vec![r, c], data }, Op::AddRowVec(a, v)))
    }

    /// Numerically stable `-log softmax(logits)[target]` over a 1-D logit
    /// vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, NumError> {
        let tl = self.value(logits);
        if tl.shape().len() != 1 {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("expected 1-D logits, got {:?}", tl.shape()),
            });
        }
        let n = tl.len();
        if target >= n {
            return Err(NumError::IndexOutOfVocab { index: target, size: n });
        }
        let max = tl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + fmath::ln(
                tl.data().iter().map(|&x| fmath::exp(x - max)).sum::<f64>(),
            );
        let loss = lse - tl.data()[target];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }))
    }

    /// Sum of elementwise products of two equal-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let p = self.mul(a, b)?;
        Ok(self.sum_all(p))
    }

    /// Euclidean norm of a tensor, as a scalar.
    pub fn norm(&mut self, a: Var) -> Result<Var, NumError> {
        let sq = self.mul(a, a)?;
        let s = self.sum_all(sq);
        Ok(self.sqrt(s))
    }

    /// Reverse pass from a scalar `loss`; returns one adjoint per reachable
    /// node.
    pub fn backward(&mut self, loss: Var) -> Result<Grads, NumError> {
        if !self.value(loss).is_scalar() {
            return Err(NumError::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.accumulate_inputs(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Grads { inner: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reduces a full-shape adjoint back to a scalar operand if needed.
    fn reduce_for(&self, v: Var, full: &Tensor) -> Tensor {
        let target = self.value(v).shape();
        if full.shape() == target {
            full.clone()
        } else {
            debug_assert!(self.value(v).is_scalar());
            let mut t = Tensor::zeros(target);
            t.data_mut()[0] = full.data().iter().sum();
            t
        }
    }

    fn accumulate_inputs(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                let ga = self.reduce_for(*a, gy);
                self.accumulate(grads, *a, ga);
                let gb = self.reduce_for(*b, gy);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_for(*a, gy);
                self.accumulate(grads, *a, ga);
                let mut neg = gy.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                let gb = self.reduce_for(*b, &neg);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(gy.shape());
                let mut gb = Tensor::zeros(gy.shape());
                for i in 0..gy.len() {
                    let x = ta.data()[if ta.is_scalar() { 0 } else { i }];
                    let y = tb.data()[if tb.is_scalar() { 0 } else { i }];
                    ga.data_mut()[i] = gy.data()[i] * y;
                    gb.data_mut()[i] = gy.data()[i] * x;
                }
                let ga = self.reduce_for(*a, &ga);
                self.accumulate(grads, *a, ga);
                let gb = self.reduce_for(*b, &gb);
                self.accumulate(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(gy.shape());
                let mut gb = Tensor::zeros(gy.shape());
                for i in 0..gy.len() {
                    let x = ta.data()[if ta.is_scalar() { 0 } else { i }];
                    let y = tb.data()[if tb.is_scalar() { 0 } else { i }];
                    ga.data_mut()[i] = gy.data()[i] / y;
                    gb.data_mut()[i] = -gy.data()[i] * x / (y * y);
                }
                let ga = self.reduce_for(*a, &ga);
                self.accumulate(grads, *a, ga);
                let gb = self.reduce_for(*b, &gb);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let mut g = gy.clone();
                for v in g.data_mut() {
                    *v *= c;
                }
                self.accumulate(grads, *a, g);
            }
            Op::AddConst(a) => {
                self.accumulate(grads, *a, gy.clone());
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ar, ac) = match ta.shape() {
                    [r, c] => (*r, *c),
                    [c] => (1, *c),
                    _ => unreachable!(),
                };
                let bc = match tb.shape() {
                    [_, c] => *c,
                    [_] => 1,
                    _ => unreachable!(),
                };
                // dA = dY B^T, dB = A^T dY over the promoted 2-D views.
                let mut ga = Tensor::zeros(ta.shape());
                for i in 0..ar {
                    for k in 0..ac {
                        let mut s = 0.0;
                        for j in 0..bc {
                            s += gy.data()[i * bc + j] * tb.data()[k * bc + j];
                        }
                        ga.data_mut()[i * ac + k] = s;
                    }
                }
                self.accumulate(grads, *a, ga);
                let mut gb = Tensor::zeros(tb.shape());
                for k in 0..ac {
                    for j in 0..bc {
                        let mut s = 0.0;
                        for i in 0..ar {
                            s += ta.data()[i * ac + k] * gy.data()[i * bc + j];
                        }
                        gb.data_mut()[k * bc + j] = s;
                    }
                }
                self.accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => {
                let [r, c] = *gy.shape() else { unreachable!() };
                let mut g = Tensor::zeros(self.value(*a).shape());
                for i in 0..r {
                    for j in 0..c {
                        g.data_mut()[j * r + i] = gy.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::ConcatFlat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let mut g = Tensor::zeros(self.value(p).shape());
                    g.data_mut().copy_from_slice(&gy.data()[offset..offset + n]);
                    self.accumulate(grads, p, g);
                    offset += n;
                }
            }
            Op::StackRows(parts) => {
                let width = self.value(parts[0]).len();
                for (i, &p) in parts.iter().enumerate() {
                    let mut g = Tensor::zeros(&[width]);
                    g.data_mut()
                        .copy_from_slice(&gy.data()[i * width..(i + 1) * width]);
                    self.accumulate(grads, p, g);
                }
            }
            Op::Row(a, i) => {
                let mut g = Tensor::zeros(self.value(*a).shape());
                let c = gy.len();
                g.data_mut()[i * c..(i + 1) * c].copy_from_slice(gy.data());
                self.accumulate(grads, *a, g);
            }
            Op::SliceRows(a, start, _end) => {
                let mut g = Tensor::zeros(self.value(*a).shape());
                let c = self.value(*a).cols();
                g.data_mut()[start * c..start * c + gy.len()].copy_from_slice(gy.data());
                self.accumulate(grads, *a, g);
            }
            Op::SliceCols(a, start, end) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let w = end - start;
                let mut g = Tensor::zeros(ta.shape());
                for i in 0..r {
                    for j in 0..w {
                        g.data_mut()[i * c + start + j] = gy.data()[i * w + j];
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).rows();
                let total = gy.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut g = Tensor::zeros(self.value(p).shape());
                    for i in 0..rows {
                        for j in 0..w {
                            g.data_mut()[i * w + j] = gy.data()[i * total + offset + j];
                        }
                    }
                    self.accumulate(grads, p, g);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let mut g = Tensor::zeros(self.value(p).shape());
                    g.data_mut().copy_from_slice(&gy.data()[offset..offset + n]);
                    self.accumulate(grads, p, g);
                    offset += n;
                }
            }
            Op::Gather(a, indices) => {
                let mut g = Tensor::zeros(self.value(*a).shape());
                for (k, &i) in indices.iter().enumerate() {
                    g.data_mut()[i] += gy.data()[k];
                }
                self.accumulate(grads, *a, g);
            }
            Op::MeanPoolRows(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut g = Tensor::zeros(ta.shape());
                for i in 0..r {
                    for j in 0..c {
                        g.data_mut()[i * c + j] = gy.data()[j] / r as f64;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::SumAll(a) => {
                let g = Tensor::filled(self.value(*a).shape(), gy.item());
                self.accumulate(grads, *a, g);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (r, c) = match y.shape() {
                    [r, c] => (*r, *c),
                    [c] => (1, *c),
                    _ => unreachable!(),
                };
                let mut g = Tensor::zeros(y.shape());
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let dyr = &gy.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g.data_mut()[i * c + j] = yr[j] * (dyr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::CausalSoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (r, c) = (y.rows(), y.cols());
                let mut g = Tensor::zeros(y.shape());
                for i in 0..r {
                    let yr = &y.data()[i * c..i * c + i + 1];
                    let dyr = &gy.data()[i * c..i * c + i + 1];
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        g.data_mut()[i * c + j] = yr[j] * (dyr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].value;
                let mut g = gy.clone();
                for (v, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                    *v *= yv;
                }
                self.accumulate(grads, *a, g);
            }
            Op::Ln(a) => {
                let ta = self.value(*a);
                let mut g = gy.clone();
                for (v, &x) in g.data_mut().iter_mut().zip(ta.data()) {
                    *v /= x;
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].value;
                let mut g = gy.clone();
                for (v, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                    *v /= 2.0 * yv;
                }
                self.accumulate(grads, *a, g);
            }
            Op::XLnX(a) => {
                let ta = self.value(*a);
                let mut g = gy.clone();
                for (v, &x) in g.data_mut().iter_mut().zip(ta.data()) {
                    *v *= if x > 0.0 { fmath::ln(x) + 1.0 } else { 0.0 };
                }
                self.accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let mut g = gy.clone();
                for (v, &x) in g.data_mut().iter_mut().zip(ta.data()) {
                    *v *= gelu_bwd(x);
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let (r, c) = match tx.shape() {
                    [r, c] => (*r, *c),
                    [c] => (1, *c),
                    _ => unreachable!(),
                };
                let mut gx = Tensor::zeros(tx.shape());
                let mut gg = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                for i in 0..r {
                    let row = &tx.data()[i * c..(i + 1) * c];
                    let dyr = &gy.data()[i * c..(i + 1) * c];
                    let (mean, inv_sigma) = row_norm_stats(row);
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv_sigma;
                        let gj = dyr[j] * tg.data()[j];
                        mean_g += gj;
                        mean_gx += gj * xhat;
                        gg.data_mut()[j] += dyr[j] * xhat;
                        gb.data_mut()[j] += dyr[j];
                    }
                    mean_g /= c as f64;
                    mean_gx /= c as f64;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv_sigma;
                        let gj = dyr[j] * tg.data()[j];
                        gx.data_mut()[i * c + j] = inv_sigma * (gj - mean_g - xhat * mean_gx);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                let mut g = Tensor::zeros(self.value(*table).shape());
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g.data_mut()[id * d + j] += gy.data()[i * d + j];
                    }
                }
                self.accumulate(grads, *table, g);
            }
            Op::AddRowVec(a, v) => {
                self.accumulate(grads, *a, gy.clone());
                let (r, c) = (gy.rows(), gy.cols());
                let mut g = Tensor::zeros(&[c]);
                for i in 0..r {
                    for j in 0..c {
                        g.data_mut()[j] += gy.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *v, g);
            }
            Op::CrossEntropy { logits, target } => {
                let tl = self.value(*logits);
                let n = tl.len();
                let max = tl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = tl.data().iter().map(|&x| fmath::exp(x - max)).sum();
                let mut g = Tensor::zeros(&[n]);
                for j in 0..n {
                    let p = fmath::exp(tl.data()[j] - max) / sum;
                    g.data_mut()[j] =
                        gy.item() * (p - if j == *target { 1.0 } else { 0.0 });
                }
                self.accumulate(grads, *logits, g);
            }
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn row_norm_stats(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c;
    (mean, 1.0 / fmath::sqrt(var + LAYER_NORM_EPS))
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + fmath::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fmath::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
