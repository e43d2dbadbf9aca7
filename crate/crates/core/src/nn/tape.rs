//! Eager reverse-mode autodiff over [`Tensor2`] values.
//!
//! The tape supports exactly the operations the pipeline graph needs.
//! Differentiable leaves live in an external environment slice; `Var(slot)`
//! nodes reference them without copying, and `backward` returns one gradient
//! tensor per environment slot.

use crate::error::{Error, Result};
use crate::nn::tensor::{sigmoid, softmax_slice, softplus, Tensor2};
use crate::nn::Activation;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Value<T: Real> {
    Owned(Tensor2<T>),
    Env(usize),
}

enum Op<T: Real> {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        act: Activation,
    },
    Relu(NodeId),
    Softplus(NodeId),
    Ln(NodeId),
    SqrtGuarded(NodeId),
    SoftmaxRows(NodeId),
    MaxOverRows {
        x: NodeId,
        argmax: Vec<u32>,
    },
    MaxOverCols {
        x: NodeId,
        argmax: Vec<u32>,
    },
    SumOverRows(NodeId),
    SumOverCols(NodeId),
    SumAll(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, T),
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    DivByScalar(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    RepeatRow(NodeId),
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    Transpose(NodeId),
    MatMul(NodeId, NodeId),
    PairwiseSqDist(NodeId, NodeId),
    RecipClamped {
        x: NodeId,
        eps: T,
    },
    GatherRows {
        x: NodeId,
        indices: Vec<u32>,
    },
}

struct Node<T: Real> {
    value: Value<T>,
    op: Op<T>,
}

pub struct Tape<'e, T: Real> {
    env: &'e [Tensor2<T>],
    nodes: Vec<Node<T>>,
}

impl<'e, T: Real> Tape<'e, T> {
    pub fn new(env: &'e [Tensor2<T>]) -> Self {
        Tape {
            env,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2<T> {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Env(slot) => &self.env[*slot],
        }
    }

    fn push(&mut self, value: Tensor2<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor2<T>) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Differentiable leaf referencing environment slot `slot`.
    pub fn var(&mut self, slot: usize) -> NodeId {
        assert!(slot < self.env.len(), "environment slot out of range");
        self.nodes.push(Node {
            value: Value::Env(slot),
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// `act(x . w + b)`; `w` is `in x out`, `b` is `1 x out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId, act: Activation) -> NodeId {
        let (rows, in_w) = self.value(x).shape();
        let (w_in, out_w) = self.value(w).shape();
        assert_eq!(in_w, w_in, "linear input width");
        assert_eq!(self.value(b).shape(), (1, out_w), "linear bias shape");
        let mut y = Tensor2::from_vec(rows, out_w, self.value(b).data().repeat(rows))
            .expect("bias broadcast");
        T::gemm(
            rows,
            in_w,
            out_w,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            y.data_mut(),
        );
        if act == Activation::Relu {
            for v in y.data_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        self.push(y, Op::Linear { x, w, b, act })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(softplus);
        self.push(y, Op::Softplus(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.ln());
        self.push(y, Op::Ln(x))
    }

    /// `sqrt(max(x, 0))` with a guarded backward near zero.
    pub fn sqrt_guarded(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.max(T::zero()).sqrt());
        self.push(y, Op::SqrtGuarded(x))
    }

    /// Stabilized softmax applied to each row independently.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for r in 0..y.rows() {
            softmax_slice(y.row_mut(r));
        }
        self.push(y, Op::SoftmaxRows(x))
    }

    /// Per-column max over rows: `K x C -> 1 x C` (pool over the K points).
    pub fn max_over_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        assert!(rows > 0, "max over empty tensor");
        let mut out = v.row(0).to_vec();
        let mut argmax = vec![0u32; cols];
        for r in 1..rows {
            for (c, &val) in v.row(r).iter().enumerate() {
                if val > out[c] {
                    out[c] = val;
                    argmax[c] = r as u32;
                }
            }
        }
        let y = Tensor2::row_vector(out);
        self.push(y, Op::MaxOverRows { x, argmax })
    }

    /// Per-row max over columns: `K x C -> K x 1` (channel max).
    pub fn max_over_cols(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        assert!(cols > 0, "max over empty tensor");
        let mut out = Vec::with_capacity(rows);
        let mut argmax = vec![0u32; rows];
        for r in 0..rows {
            let row = v.row(r);
            let mut best = row[0];
            let mut best_c = 0u32;
            for (c, &val) in row.iter().enumerate().skip(1) {
                if val > best {
                    best = val;
                    best_c = c as u32;
                }
            }
            out.push(best);
            argmax[r] = best_c;
        }
        let y = Tensor2::col_vector(out);
        self.push(y, Op::MaxOverCols { x, argmax })
    }

    /// Column sums: `K x C -> 1 x C`.
    pub fn sum_over_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for (c, &val) in v.row(r).iter().enumerate() {
                out[c] += val;
            }
        }
        self.push(Tensor2::row_vector(out), Op::SumOverRows(x))
    }

    /// Row sums: `K x C -> K x 1`.
    pub fn sum_over_cols(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out: Vec<T> = (0..v.rows()).map(|r| v.row(r).iter().copied().sum()).collect();
        self.push(Tensor2::col_vector(out), Op::SumOverCols(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor2::scalar(s), Op::SumAll(x))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "elementwise shape");
        let out = Tensor2::from_vec(
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
        .expect("same shape");
        self.push(out, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::MulScalar(x, c))
    }

    /// Adds a `1 x C` row to every row of an `M x C` tensor.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (rows, cols) = self.value(x).shape();
        assert_eq!(self.value(row).shape(), (1, cols), "row broadcast shape");
        let mut y = self.value(x).clone();
        for r in 0..rows {
            for (c, v) in y.row_mut(r).iter_mut().enumerate() {
                *v += self.value(row).data()[c];
            }
        }
        // value already computed; reborrow note: recompute via clone above
        self.push(y, Op::AddRow(x, row))
    }

    /// Subtracts a `1 x C` row from every row.
    pub fn sub_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (rows, cols) = self.value(x).shape();
        assert_eq!(self.value(row).shape(), (1, cols), "row broadcast shape");
        let row_vals = self.value(row).data().to_vec();
        let mut y = self.value(x).clone();
        for r in 0..rows {
            for (c, v) in y.row_mut(r).iter_mut().enumerate() {
                *v -= row_vals[c];
            }
        }
        self.push(y, Op::SubRow(x, row))
    }

    /// Divides every entry by a `1 x 1` scalar node.
    pub fn div_by_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).shape(), (1, 1), "scalar divisor shape");
        let sv = self.value(s).item();
        let y = self.value(x).map(|v| v / sv);
        self.push(y, Op::DivByScalar(x, s))
    }

    /// Scales row `k` of `x` by `w[k]`: the attentive-feature-map operation.
    pub fn scale_rows(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (rows, _cols) = self.value(x).shape();
        assert_eq!(self.value(w).shape(), (rows, 1), "row weight shape");
        let weights = self.value(w).data().to_vec();
        let mut y = self.value(x).clone();
        for (r, &wv) in weights.iter().enumerate() {
            for v in y.row_mut(r) {
                *v *= wv;
            }
        }
        self.push(y, Op::ScaleRows(x, w))
    }

    /// Duplicates a `1 x C` row `k` times.
    pub fn repeat_row(&mut self, x: NodeId, k: usize) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.rows(), 1, "repeat_row expects a single row");
        let y = Tensor2::from_vec(k, v.cols(), v.data().repeat(k)).expect("repeat shape");
        self.push(y, Op::RepeatRow(x))
    }

    /// Horizontal concatenation of equal-height blocks.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut y = Tensor2::zeros(rows, total);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat height");
                y.row_mut(r)[at..at + v.cols()].copy_from_slice(v.row(r));
                at += v.cols();
            }
        }
        self.push(y, Op::ConcatCols(parts.to_vec()))
    }

    /// Vertical stack of `1 x C` rows into an `M x C` tensor.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack of nothing");
        let cols = self.value(parts[0]).cols();
        let mut y = Tensor2::zeros(parts.len(), cols);
        for (r, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            assert_eq!(v.shape(), (1, cols), "stack_rows expects 1 x C rows");
            y.row_mut(r).copy_from_slice(v.row(0));
        }
        self.push(y, Op::StackRows(parts.to_vec()))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).transpose();
        self.push(y, Op::Transpose(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.value(a).matmul(self.value(b));
        self.push(y, Op::MatMul(a, b))
    }

    /// `D[i][j] = || a_i - b_j ||^2` for row sets `a (M x d)`, `b (N x d)`.
    pub fn pairwise_sqdist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.cols(), bv.cols(), "pairwise dimension");
        let m = av.rows();
        let sq = |t: &Tensor2<T>| -> Vec<T> {
            (0..t.rows())
                .map(|r| t.row(r).iter().map(|&v| v * v).sum())
                .collect()
        };
        let ra = sq(av);
        let rb = sq(bv);
        let mut y = av.matmul_nt(bv);
        for i in 0..m {
            for (j, v) in y.row_mut(i).iter_mut().enumerate() {
                let d = ra[i] + rb[j] - *v - *v;
                *v = d.max(T::zero());
            }
        }
        self.push(y, Op::PairwiseSqDist(a, b))
    }

    /// `1 / max(x, eps)`: the clamped reciprocal guarding zero descriptor
    /// distances.
    pub fn recip_clamped(&mut self, x: NodeId, eps: T) -> NodeId {
        let y = self.value(x).map(|v| T::one() / v.max(eps));
        self.push(y, Op::RecipClamped { x, eps })
    }

    /// Rows of `x` selected by `indices` (duplicates allowed).
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> NodeId {
        let v = self.value(x);
        let mut y = Tensor2::zeros(indices.len(), v.cols());
        for (r, &i) in indices.iter().enumerate() {
            y.row_mut(r).copy_from_slice(v.row(i));
        }
        self.push(
            y,
            Op::GatherRows {
                x,
                indices: indices.iter().map(|&i| i as u32).collect(),
            },
        )
    }

    /// Reverse pass from a scalar loss node. Returns one gradient tensor per
    /// environment slot.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Tensor2<T>>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward target must be 1x1, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor2::scalar(T::one()))])
    }

    /// Reverse pass seeded with explicit output gradients (used to chain
    /// cluster subgraphs below a separate loss graph).
    pub fn backward_seeded(&self, seeds: &[(NodeId, Tensor2<T>)]) -> Result<Vec<Tensor2<T>>> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument(
                "backward called before any forward pass was recorded".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            if seed.shape() != self.value(*id).shape() {
                return Err(Error::Shape("seed gradient shape mismatch".into()));
            }
            match &mut grads[id.0] {
                Some(g) => g.add_assign(seed),
                slot => *slot = Some(seed.clone()),
            }
        }
        let mut env_grads: Vec<Tensor2<T>> = self
            .env
            .iter()
            .map(|t| Tensor2::zeros(t.rows(), t.cols()))
            .collect();

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Value::Env(slot) = &self.nodes[id].value {
                env_grads[*slot].add_assign(&g);
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(env_grads)
    }

    fn acc(grads: &mut [Option<Tensor2<T>>], id: NodeId, delta: Tensor2<T>) {
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor2<T>, grads: &mut [Option<Tensor2<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, b, act } => {
                let y = self.value(NodeId(id));
                let mut dz = g.clone();
                if *act == Activation::Relu {
                    for (v, &yv) in dz.data_mut().iter_mut().zip(y.data()) {
                        if yv <= T::zero() {
                            *v = T::zero();
                        }
                    }
                }
                let dx = dz.matmul_nt(self.value(*w));
                let dw = self.value(*x).matmul_tn(&dz);
                let mut db = Tensor2::zeros(1, dz.cols());
                for r in 0..dz.rows() {
                    for (c, &v) in dz.row(r).iter().enumerate() {
                        db.data_mut()[c] += v;
                    }
                }
                Self::acc(grads, *x, dx);
                Self::acc(grads, *w, dw);
                Self::acc(grads, *b, db);
            }
            Op::Relu(x) => {
                let y = self.value(NodeId(id));
                let mut dx = g.clone();
                for (v, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    if yv <= T::zero() {
                        *v = T::zero();
                    }
                }
                Self::acc(grads, *x, dx);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (v, &x0) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *v *= sigmoid(x0);
                }
                Self::acc(grads, *x, dx);
            }
            Op::Ln(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (v, &x0) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *v /= x0;
                }
                Self::acc(grads, *x, dx);
            }
            Op::SqrtGuarded(x) => {
                let y = self.value(NodeId(id));
                let guard = T::cast(1e-12);
                let half = T::cast(0.5);
                let mut dx = g.clone();
                for (v, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *v *= half / yv.max(guard);
                }
                Self::acc(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let s = self.value(NodeId(id));
                let mut dx = Tensor2::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let srow = s.row(r);
                    let grow = g.row(r);
                    let dot: T = srow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for (c, v) in dx.row_mut(r).iter_mut().enumerate() {
                        *v = srow[c] * (grow[c] - dot);
                    }
                }
                Self::acc(grads, *x, dx);
            }
            Op::MaxOverRows { x, argmax } => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor2::zeros(rows, cols);
                for (c, &r) in argmax.iter().enumerate() {
                    dx.set(r as usize, c, g.data()[c]);
                }
                Self::acc(grads, *x, dx);
            }
            Op::MaxOverCols { x, argmax } => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor2::zeros(rows, cols);
                for (r, &c) in argmax.iter().enumerate() {
                    dx.set(r, c as usize, g.data()[r]);
                }
                Self::acc(grads, *x, dx);
            }
            Op::SumOverRows(x) => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r).copy_from_slice(g.row(0));
                }
                Self::acc(grads, *x, dx);
            }
            Op::SumOverCols(x) => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    let gv = g.data()[r];
                    for v in dx.row_mut(r) {
                        *v = gv;
                    }
                }
                Self::acc(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let (rows, cols) = self.value(*x).shape();
                let gv = g.item();
                let dx = Tensor2::from_vec(rows, cols, vec![gv; rows * cols]).expect("fill");
                Self::acc(grads, *x, dx);
            }
            Op::Add(a, b) => {
                Self::acc(grads, *a, g.clone());
                Self::acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::acc(grads, *a, g.clone());
                Self::acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = Tensor2::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(bv.data()).map(|(&gv, &b0)| gv * b0).collect(),
                )
                .expect("shape");
                let db = Tensor2::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(av.data()).map(|(&gv, &a0)| gv * a0).collect(),
                )
                .expect("shape");
                Self::acc(grads, *a, da);
                Self::acc(grads, *b, db);
            }
            Op::Div(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = Tensor2::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(bv.data()).map(|(&gv, &b0)| gv / b0).collect(),
                )
                .expect("shape");
                let db = Tensor2::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(&gv, (&a0, &b0))| -gv * a0 / (b0 * b0))
                        .collect(),
                )
                .expect("shape");
                Self::acc(grads, *a, da);
                Self::acc(grads, *b, db);
            }
            Op::AddScalar(x) => Self::acc(grads, *x, g.clone()),
            Op::MulScalar(x, c) => Self::acc(grads, *x, g.map(|v| v * *c)),
            Op::AddRow(x, row) | Op::SubRow(x, row) => {
                let sign = if matches!(self.nodes[id].op, Op::AddRow(..)) {
                    T::one()
                } else {
                    -T::one()
                };
                Self::acc(grads, *x, g.clone());
                let mut dr = Tensor2::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (c, &v) in g.row(r).iter().enumerate() {
                        dr.data_mut()[c] += v * sign;
                    }
                }
                Self::acc(grads, *row, dr);
            }
            Op::DivByScalar(x, s) => {
                let sv = self.value(*s).item();
                let xv = self.value(*x);
                Self::acc(grads, *x, g.map(|v| v / sv));
                let num: T = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &x0)| gv * x0)
                    .sum();
                Self::acc(grads, *s, Tensor2::scalar(-num / (sv * sv)));
            }
            Op::ScaleRows(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (rows, cols) = xv.shape();
                let mut dx = Tensor2::zeros(rows, cols);
                let mut dw = Tensor2::zeros(rows, 1);
                for r in 0..rows {
                    let weight = wv.data()[r];
                    let mut acc = T::zero();
                    for c in 0..cols {
                        dx.set(r, c, g.get(r, c) * weight);
                        acc += g.get(r, c) * xv.get(r, c);
                    }
                    dw.set(r, 0, acc);
                }
                Self::acc(grads, *x, dx);
                Self::acc(grads, *w, dw);
            }
            Op::RepeatRow(x) => {
                let mut dx = Tensor2::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (c, &v) in g.row(r).iter().enumerate() {
                        dx.data_mut()[c] += v;
                    }
                }
                Self::acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut dp = Tensor2::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + cols]);
                    }
                    at += cols;
                    Self::acc(grads, p, dp);
                }
            }
            Op::StackRows(parts) => {
                for (r, &p) in parts.iter().enumerate() {
                    let dp = Tensor2::row_vector(g.row(r).to_vec());
                    Self::acc(grads, p, dp);
                }
            }
            Op::Transpose(x) => Self::acc(grads, *x, g.transpose()),
            Op::MatMul(a, b) => {
                let da = g.matmul_nt(self.value(*b));
                let db = self.value(*a).matmul_tn(g);
                Self::acc(grads, *a, da);
                Self::acc(grads, *b, db);
            }
            Op::PairwiseSqDist(a, b) => {
                // D_ij = |a_i|^2 + |b_j|^2 - 2 a_i . b_j
                // da = 2 (rowsum(g) * a - g . b); db = 2 (colsum(g) * b - g^T . a)
                let av = self.value(*a);
                let bv = self.value(*b);
                let two = T::cast(2.0);
                let mut da = g.matmul(bv);
                for i in 0..da.rows() {
                    let row_sum: T = g.row(i).iter().copied().sum();
                    for (c, v) in da.row_mut(i).iter_mut().enumerate() {
                        *v = two * (row_sum * av.get(i, c) - *v);
                    }
                }
                let gt = g.transpose();
                let mut db = gt.matmul(av);
                for j in 0..db.rows() {
                    let col_sum: T = gt.row(j).iter().copied().sum();
                    for (c, v) in db.row_mut(j).iter_mut().enumerate() {
                        *v = two * (col_sum * bv.get(j, c) - *v);
                    }
                }
                Self::acc(grads, *a, da);
                Self::acc(grads, *b, db);
            }
            Op::RecipClamped { x, eps } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (v, &x0) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if x0 > *eps {
                        *v = -*v / (x0 * x0);
                    } else {
                        *v = T::zero();
                    }
                }
                Self::acc(grads, *x, dx);
            }
            Op::GatherRows { x, indices } => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor2::zeros(rows, cols);
                for (r, &i) in indices.iter().enumerate() {
                    for (c, &v) in g.row(r).iter().enumerate() {
                        let cur = dx.get(i as usize, c);
                        dx.set(i as usize, c, cur + v);
                    }
                }
                Self::acc(grads, *x, dx);
            }
        }
    }
}
