//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! Forward evaluation is eager; every operation records its parents so
//! [`Tape::backward`] can push exact analytic adjoints from a scalar root
//! back to the leaves. All reductions run in a fixed order, so repeated
//! evaluation is bit-identical.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use super::real::Real;
use super::tensor::Tensor2;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    /// y = x · wᵀ with w stored `[out × in]`.
    MatmulNt(Var, Var),
    /// Row-broadcast bias add; bias is `[1 × cols]`.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: T,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: Var,
        ids: Arc<Vec<usize>>,
    },
    SegmentSum {
        x: Var,
        ids: Arc<Vec<usize>>,
    },
    SegmentSoftmax {
        x: Var,
        ids: Arc<Vec<usize>>,
    },
    /// Multiply row r of x by scale[r, 0].
    ScaleRows {
        x: Var,
        scale: Var,
    },
    /// Repeat the column block `reps` times.
    TileCols {
        x: Var,
        reps: usize,
    },
    SumAll(Var),
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor2<T>,
}

/// Gradients per tape node, produced by [`Tape::backward`].
pub struct Grads<T: Real> {
    slots: Vec<Option<Tensor2<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the root with respect to `var`; zeros if the var does not
    /// influence the root.
    pub fn get(&self, var: Var, shape: (usize, usize)) -> Tensor2<T> {
        self.slots[var.0]
            .clone()
            .unwrap_or_else(|| Tensor2::zeros(shape.0, shape.1))
    }

    pub fn get_ref(&self, var: Var) -> Option<&Tensor2<T>> {
        self.slots[var.0].as_ref()
    }
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid_scalar<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, op: Op<T>, value: Tensor2<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var(nodes.len() - 1)
    }

    /// Register an input (constant or parameter) on the tape.
    pub fn leaf(&self, value: Tensor2<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Borrow a node's forward value.
    pub fn value(&self, var: Var) -> Ref<'_, Tensor2<T>> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[var.0].value)
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes.borrow()[var.0].value.shape()
    }

    /// y = x · wᵀ, with w stored `[out_features × in_features]`.
    pub fn matmul_nt(&self, x: Var, w: Var) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let wv = &nodes[w.0].value;
        assert_eq!(
            xv.cols(),
            wv.cols(),
            "matmul shape mismatch: x is {:?}, w is {:?}",
            xv.shape(),
            wv.shape()
        );
        let (n, k_out) = (xv.rows(), wv.rows());
        let mut y = Tensor2::zeros(n, k_out);
        for r in 0..n {
            let xr = xv.row(r);
            let yr = y.row_mut(r);
            for (k, out) in yr.iter_mut().enumerate() {
                let wk = wv.row(k);
                let mut acc = T::zero();
                for j in 0..xr.len() {
                    acc += xr[j] * wk[j];
                }
                *out = acc;
            }
        }
        drop(nodes);
        self.push(Op::MatmulNt(x, w), y)
    }

    /// Row-broadcast bias addition; `b` must be `[1 × cols]`.
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let bv = &nodes[b.0].value;
        assert_eq!(
            (1, xv.cols()),
            bv.shape(),
            "bias shape mismatch: x is {:?}, b is {:?}",
            xv.shape(),
            bv.shape()
        );
        let mut y = xv.clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            for (c, v) in row.iter_mut().enumerate() {
                *v += bv.get(0, c);
            }
        }
        drop(nodes);
        self.push(Op::AddBias(x, b), y)
    }

    /// y = x · Wᵀ + b, the affine map used throughout the network.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul_nt(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    fn zip_elementwise(&self, a: Var, b: Var, op_name: &str, f: impl Fn(T, T) -> T) -> Tensor2<T> {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let bv = &nodes[b.0].value;
        assert_eq!(
            av.shape(),
            bv.shape(),
            "{op_name} shape mismatch: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let mut y = av.clone();
        for (x, &z) in y.data_mut().iter_mut().zip(bv.data()) {
            *x = f(*x, z);
        }
        y
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let y = self.zip_elementwise(a, b, "add", |x, z| x + z);
        self.push(Op::Add(a, b), y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let y = self.zip_elementwise(a, b, "sub", |x, z| x - z);
        self.push(Op::Sub(a, b), y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let y = self.zip_elementwise(a, b, "mul", |x, z| x * z);
        self.push(Op::Mul(a, b), y)
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let y = self.nodes.borrow()[x.0].value.map(|v| v * c);
        self.push(Op::Scale(x, c), y)
    }

    pub fn silu(&self, x: Var) -> Var {
        let y = self.nodes.borrow()[x.0].value.map(|v| v * sigmoid_scalar(v));
        self.push(Op::Silu(x), y)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let y = self.nodes.borrow()[x.0].value.map(sigmoid_scalar);
        self.push(Op::Sigmoid(x), y)
    }

    /// Row-wise layer normalization over the feature axis with learnable
    /// affine; `gain` and `bias` are `[1 × cols]`.
    pub fn layernorm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let gv = &nodes[gain.0].value;
        let bv = &nodes[bias.0].value;
        assert_eq!((1, xv.cols()), gv.shape(), "layernorm gain shape mismatch");
        assert_eq!((1, xv.cols()), bv.shape(), "layernorm bias shape mismatch");
        let cols = xv.cols();
        let inv_n = T::one() / T::from_f64(cols as f64);
        let mut y = Tensor2::zeros(xv.rows(), cols);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_n;
            let inv_std = T::one() / (var + eps).sqrt();
            let out = y.row_mut(r);
            for c in 0..cols {
                out[c] = (row[c] - mean) * inv_std * gv.get(0, c) + bv.get(0, c);
            }
        }
        drop(nodes);
        self.push(Op::LayerNorm { x, gain, bias, eps }, y)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let nodes = self.nodes.borrow();
        let rows = nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
        let mut y = Tensor2::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let pv = &nodes[p.0].value;
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                let src = pv.row(r);
                y.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
            }
            offset += pv.cols();
        }
        drop(nodes);
        self.push(Op::ConcatCols(parts.to_vec()), y)
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let mut y = Tensor2::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            y.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        drop(nodes);
        self.push(Op::SliceCols { x, start, len }, y)
    }

    /// y[i] = x[ids[i]].
    pub fn gather_rows(&self, x: Var, ids: Arc<Vec<usize>>) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let mut y = Tensor2::zeros(ids.len(), xv.cols());
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < xv.rows(), "gather_rows id {id} out of range");
            y.row_mut(i).copy_from_slice(xv.row(id));
        }
        drop(nodes);
        self.push(Op::GatherRows { x, ids }, y)
    }

    /// out[s] = Σ over rows i with ids[i] == s, accumulated in ascending
    /// input order; empty segments stay zero.
    pub fn segment_sum(&self, x: Var, ids: Arc<Vec<usize>>, segments: usize) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        assert_eq!(xv.rows(), ids.len(), "segment_sum ids length mismatch");
        let mut y = Tensor2::zeros(segments, xv.cols());
        for (i, &s) in ids.iter().enumerate() {
            assert!(s < segments, "segment id {s} out of range [0, {segments})");
            let src = xv.row(i);
            let dst = y.row_mut(s);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        drop(nodes);
        self.push(Op::SegmentSum { x, ids }, y)
    }

    /// Per segment and per column: softmax with max-subtraction. Rows of the
    /// output correspond to input rows.
    pub fn segment_softmax(&self, x: Var, ids: Arc<Vec<usize>>, segments: usize) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        assert_eq!(xv.rows(), ids.len(), "segment_softmax ids length mismatch");
        let cols = xv.cols();
        let mut y = Tensor2::zeros(xv.rows(), cols);
        let neg_inf = T::neg_infinity();
        for c in 0..cols {
            let mut seg_max = vec![neg_inf; segments];
            for (i, &s) in ids.iter().enumerate() {
                assert!(s < segments, "segment id {s} out of range [0, {segments})");
                let v = xv.get(i, c);
                if v > seg_max[s] {
                    seg_max[s] = v;
                }
            }
            let mut seg_sum = vec![T::zero(); segments];
            for (i, &s) in ids.iter().enumerate() {
                let e = (xv.get(i, c) - seg_max[s]).exp();
                y.set(i, c, e);
                seg_sum[s] += e;
            }
            for (i, &s) in ids.iter().enumerate() {
                y.set(i, c, y.get(i, c) / seg_sum[s]);
            }
        }
        drop(nodes);
        self.push(Op::SegmentSoftmax { x, ids }, y)
    }

    /// y[r, c] = x[r, c] * scale[r, 0].
    pub fn scale_rows(&self, x: Var, scale: Var) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let sv = &nodes[scale.0].value;
        assert_eq!((xv.rows(), 1), sv.shape(), "scale_rows expects [n×1] scale");
        let mut y = xv.clone();
        for r in 0..y.rows() {
            let s = sv.get(r, 0);
            for v in y.row_mut(r) {
                *v *= s;
            }
        }
        drop(nodes);
        self.push(Op::ScaleRows { x, scale }, y)
    }

    /// Repeat the column block `reps` times: output has `cols * reps`
    /// columns. Used to broadcast gate vectors onto wider latents.
    pub fn tile_cols(&self, x: Var, reps: usize) -> Var {
        if reps == 1 {
            return x;
        }
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let mut y = Tensor2::zeros(xv.rows(), xv.cols() * reps);
        for r in 0..xv.rows() {
            let src = xv.row(r);
            let dst = y.row_mut(r);
            for k in 0..reps {
                dst[k * src.len()..(k + 1) * src.len()].copy_from_slice(src);
            }
        }
        drop(nodes);
        self.push(Op::TileCols { x, reps }, y)
    }

    /// Scalar sum of all entries, as a `[1 × 1]` tensor.
    pub fn sum_all(&self, x: Var) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let mut acc = T::zero();
        for &v in xv.data() {
            acc += v;
        }
        drop(nodes);
        self.push(Op::SumAll(x), Tensor2::from_vec(1, 1, vec![acc]))
    }

    /// Reverse pass from a scalar root. Returns one gradient slot per node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.shape(),
            (1, 1),
            "backward root must be a scalar"
        );
        let mut slots: Vec<Option<Tensor2<T>>> = (0..nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(Tensor2::from_vec(1, 1, vec![T::one()]));

        fn add_into<T: Real>(slot: &mut Option<Tensor2<T>>, delta: Tensor2<T>) {
            match slot {
                Some(g) => g.add_scaled(&delta, T::one()),
                None => *slot = Some(delta),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(dy) = slots[i].clone() else { continue };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatmulNt(x, w) => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    let mut dw = Tensor2::zeros(wv.rows(), wv.cols());
                    for r in 0..xv.rows() {
                        let dyr = dy.row(r);
                        let xr = xv.row(r);
                        let dxr = dx.row_mut(r);
                        for (k, &g) in dyr.iter().enumerate() {
                            if g == T::zero() {
                                continue;
                            }
                            let wk = wv.row(k);
                            for j in 0..xr.len() {
                                dxr[j] += g * wk[j];
                            }
                        }
                    }
                    for k in 0..wv.rows() {
                        let dwk = dw.row_mut(k);
                        for r in 0..xv.rows() {
                            let g = dy.get(r, k);
                            if g == T::zero() {
                                continue;
                            }
                            let xr = xv.row(r);
                            for j in 0..dwk.len() {
                                dwk[j] += g * xr[j];
                            }
                        }
                    }
                    add_into(&mut slots[x.0], dx);
                    add_into(&mut slots[w.0], dw);
                }
                Op::AddBias(x, b) => {
                    let cols = dy.cols();
                    let mut db = Tensor2::zeros(1, cols);
                    for r in 0..dy.rows() {
                        for c in 0..cols {
                            let v = db.get(0, c) + dy.get(r, c);
                            db.set(0, c, v);
                        }
                    }
                    add_into(&mut slots[x.0], dy);
                    add_into(&mut slots[b.0], db);
                }
                Op::Add(a, b) => {
                    add_into(&mut slots[a.0], dy.clone());
                    add_into(&mut slots[b.0], dy);
                }
                Op::Sub(a, b) => {
                    add_into(&mut slots[a.0], dy.clone());
                    add_into(&mut slots[b.0], dy.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.clone();
                    let bv = nodes[b.0].value.clone();
                    let mut da = dy.clone();
                    for (g, &v) in da.data_mut().iter_mut().zip(bv.data()) {
                        *g *= v;
                    }
                    let mut db = dy;
                    for (g, &v) in db.data_mut().iter_mut().zip(av.data()) {
                        *g *= v;
                    }
                    add_into(&mut slots[a.0], da);
                    add_into(&mut slots[b.0], db);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    add_into(&mut slots[x.0], dy.map(|v| v * c));
                }
                Op::Silu(x) => {
                    let xv = &nodes[x.0].value;
                    let mut dx = dy;
                    for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid_scalar(v);
                        *g *= s * (T::one() + v * (T::one() - s));
                    }
                    add_into(&mut slots[x.0], dx);
                }
                Op::Sigmoid(x) => {
                    let yv = &nodes[i].value;
                    let mut dx = dy;
                    for (g, &y) in dx.data_mut().iter_mut().zip(yv.data()) {
                        *g *= y * (T::one() - y);
                    }
                    add_into(&mut slots[x.0], dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = &nodes[x.0].value;
                    let gv = &nodes[gain.0].value;
                    let cols = xv.cols();
                    let inv_n = T::one() / T::from_f64(cols as f64);
                    let mut dx = Tensor2::zeros(xv.rows(), cols);
                    let mut dgain = Tensor2::zeros(1, cols);
                    let mut dbias = Tensor2::zeros(1, cols);
                    for r in 0..xv.rows() {
                        let row = xv.row(r);
                        let mut mean = T::zero();
                        for &v in row {
                            mean += v;
                        }
                        mean *= inv_n;
                        let mut var = T::zero();
                        for &v in row {
                            var += (v - mean) * (v - mean);
                        }
                        var *= inv_n;
                        let inv_std = T::one() / (var + *eps).sqrt();
                        // x̂ and the two row means the adjoint needs.
                        let dyr = dy.row(r);
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        let mut xhat = vec![T::zero(); cols];
                        let mut dxhat = vec![T::zero(); cols];
                        for c in 0..cols {
                            xhat[c] = (row[c] - mean) * inv_std;
                            dxhat[c] = dyr[c] * gv.get(0, c);
                            mean_dxhat += dxhat[c];
                            mean_dxhat_xhat += dxhat[c] * xhat[c];
                            dgain.set(0, c, dgain.get(0, c) + dyr[c] * xhat[c]);
                            dbias.set(0, c, dbias.get(0, c) + dyr[c]);
                        }
                        mean_dxhat *= inv_n;
                        mean_dxhat_xhat *= inv_n;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            out[c] = (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) * inv_std;
                        }
                    }
                    add_into(&mut slots[x.0], dx);
                    add_into(&mut slots[gain.0], dgain);
                    add_into(&mut slots[bias.0], dbias);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = &nodes[p.0].value;
                        let mut dp = Tensor2::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            dp.row_mut(r)
                                .copy_from_slice(&dy.row(r)[offset..offset + pv.cols()]);
                        }
                        offset += pv.cols();
                        add_into(&mut slots[p.0], dp);
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let xv = &nodes[x.0].value;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        dx.row_mut(r)[*start..start + len].copy_from_slice(dy.row(r));
                    }
                    add_into(&mut slots[x.0], dx);
                }
                Op::GatherRows { x, ids } => {
                    let xv = &nodes[x.0].value;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (i_row, &id) in ids.iter().enumerate() {
                        let src = dy.row(i_row);
                        let dst = dx.row_mut(id);
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                    add_into(&mut slots[x.0], dx);
                }
                Op::SegmentSum { x, ids } => {
                    let xv = &nodes[x.0].value;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (i_row, &s) in ids.iter().enumerate() {
                        dx.row_mut(i_row).copy_from_slice(dy.row(s));
                    }
                    add_into(&mut slots[x.0], dx);
                }
                Op::SegmentSoftmax { x, ids } => {
                    let yv = &nodes[i].value;
                    let segments = ids.iter().copied().max().map_or(0, |m| m + 1);
                    let cols = yv.cols();
                    let mut dx = Tensor2::zeros(yv.rows(), cols);
                    for c in 0..cols {
                        let mut seg_dot = vec![T::zero(); segments];
                        for (r, &s) in ids.iter().enumerate() {
                            seg_dot[s] += yv.get(r, c) * dy.get(r, c);
                        }
                        for (r, &s) in ids.iter().enumerate() {
                            dx.set(r, c, yv.get(r, c) * (dy.get(r, c) - seg_dot[s]));
                        }
                    }
                    add_into(&mut slots[x.0], dx);
                }
                Op::ScaleRows { x, scale } => {
                    let xv = &nodes[x.0].value;
                    let sv = &nodes[scale.0].value;
                    let mut dx = dy.clone();
                    let mut ds = Tensor2::zeros(xv.rows(), 1);
                    for r in 0..xv.rows() {
                        let s = sv.get(r, 0);
                        let mut acc = T::zero();
                        for (c, g) in dx.row_mut(r).iter_mut().enumerate() {
                            acc += *g * xv.get(r, c);
                            *g *= s;
                        }
                        ds.set(r, 0, acc);
                    }
                    add_into(&mut slots[x.0], dx);
                    add_into(&mut slots[scale.0], ds);
                }
                Op::TileCols { x, reps } => {
                    let xv = &nodes[x.0].value;
                    let cols = xv.cols();
                    let mut dx = Tensor2::zeros(xv.rows(), cols);
                    for r in 0..xv.rows() {
                        let dyr = dy.row(r);
                        let dst = dx.row_mut(r);
                        for k in 0..*reps {
                            for c in 0..cols {
                                dst[c] += dyr[k * cols + c];
                            }
                        }
                    }
                    add_into(&mut slots[x.0], dx);
                }
                Op::SumAll(x) => {
                    let xv = &nodes[x.0].value;
                    let g = dy.get(0, 0);
                    add_into(
                        &mut slots[x.0],
                        Tensor2::from_fn(xv.rows(), xv.cols(), |_, _| g),
                    );
                }
            }
        }
        Grads { slots }
    }
}
