use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use ndarray::{s, Axis, Zip};

use crate::graph::Op;
use crate::{Mat, SparseMatrix, Var};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'g> Var<'g> {
    fn unary(self, op: Op, f: impl Fn(&Mat) -> Mat) -> Var<'g> {
        let v = f(&self.value());
        self.graph.push(v, op, &[self.id])
    }

    fn check_same_shape(self, other: Var<'g>, what: &str) {
        assert_eq!(self.shape(), other.shape(), "{what}: shape mismatch");
    }

    fn matmul_impl(self, other: Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let av = if ta { a.t() } else { a.view() };
        let bv = if tb { b.t() } else { b.view() };
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dimension mismatch {:?} x {:?}", av.dim(), bv.dim());
        let v = av.dot(&bv);
        self.graph.push(v, Op::MatMul { a: self.id, b: other.id, ta, tb }, &[self.id, other.id])
    }

    /// `self · other`
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.matmul_impl(other, false, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(self, other: Var<'g>) -> Var<'g> {
        self.matmul_impl(other, false, true)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(self, other: Var<'g>) -> Var<'g> {
        self.matmul_impl(other, true, false)
    }

    /// `selfᵀ · otherᵀ`
    pub fn matmul_tt(self, other: Var<'g>) -> Var<'g> {
        self.matmul_impl(other, true, true)
    }

    pub fn t(self) -> Var<'g> {
        self.unary(Op::Transpose(self.id), |a| a.t().to_owned())
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |a| a + c)
    }

    /// Repeats a `1 x n` row `m` times.
    pub fn broadcast_rows(self, m: usize) -> Var<'g> {
        assert_eq!(self.shape().0, 1, "broadcast_rows needs a single row");
        self.unary(Op::BroadcastRows(self.id), |a| {
            a.broadcast((m, a.ncols())).expect("row broadcast").to_owned()
        })
    }

    /// Repeats an `m x 1` column `n` times.
    pub fn broadcast_cols(self, n: usize) -> Var<'g> {
        assert_eq!(self.shape().1, 1, "broadcast_cols needs a single column");
        self.unary(Op::BroadcastCols(self.id), |a| {
            let mut out = Mat::zeros((a.nrows(), n));
            for (mut row, &x) in out.rows_mut().into_iter().zip(a.column(0).iter()) {
                row.fill(x);
            }
            out
        })
    }

    /// Column sums as a `1 x n` row.
    pub fn sum_rows(self) -> Var<'g> {
        self.unary(Op::SumRows(self.id), |a| a.sum_axis(Axis(0)).insert_axis(Axis(0)))
    }

    /// Row sums as an `m x 1` column.
    pub fn sum_cols(self) -> Var<'g> {
        self.unary(Op::SumCols(self.id), |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)))
    }

    /// Sum of all entries as a `1 x 1` scalar.
    pub fn sum(self) -> Var<'g> {
        self.sum_cols().sum_rows()
    }

    pub fn mean(self) -> Var<'g> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    /// Broadcasts a `1 x 1` scalar to `rows x cols`.
    pub fn broadcast_scalar(self, rows: usize, cols: usize) -> Var<'g> {
        assert_eq!(self.shape(), (1, 1), "broadcast_scalar needs a scalar");
        self.broadcast_cols(cols).broadcast_rows(rows)
    }

    /// Adds a `1 x n` row to every row.
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        let m = self.shape().0;
        self + row.broadcast_rows(m)
    }

    /// Multiplies every row elementwise by a `1 x n` row.
    pub fn mul_row(self, row: Var<'g>) -> Var<'g> {
        let m = self.shape().0;
        self * row.broadcast_rows(m)
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), |a| a.mapv(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), |a| a.mapv(sigmoid))
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary(Op::Softplus(self.id), |a| a.mapv(softplus))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), |a| a.mapv(f64::exp))
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(Op::Ln(self.id), |a| a.mapv(f64::ln))
    }

    pub fn powf(self, p: f64) -> Var<'g> {
        self.unary(Op::Powf(self.id, p), |a| a.mapv(|x| x.powf(p)))
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(Op::Abs(self.id), |a| a.mapv(f64::abs))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(self) -> Var<'g> {
        self.unary(Op::SoftmaxRows(self.id), |a| {
            let mut out = a.clone();
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - max).exp());
                let z: f64 = row.sum();
                row.mapv_inplace(|x| x / z);
            }
            out
        })
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'g> {
        assert!(start + len <= self.shape().0, "slice_rows out of range");
        self.unary(Op::SliceRows { a: self.id, start }, |a| a.slice(s![start..start + len, ..]).to_owned())
    }

    /// Embeds the rows of `self` at `start` inside a zero matrix with `total` rows.
    pub fn pad_rows(self, start: usize, total: usize) -> Var<'g> {
        let (r, c) = self.shape();
        assert!(start + r <= total, "pad_rows out of range");
        self.unary(Op::PadRows { a: self.id, start }, |a| {
            let mut out = Mat::zeros((total, c));
            out.slice_mut(s![start..start + r, ..]).assign(a);
            out
        })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g> {
        assert!(start + len <= self.shape().1, "slice_cols out of range");
        self.unary(Op::SliceCols { a: self.id, start }, |a| a.slice(s![.., start..start + len]).to_owned())
    }

    pub fn pad_cols(self, start: usize, total: usize) -> Var<'g> {
        let (r, c) = self.shape();
        assert!(start + c <= total, "pad_cols out of range");
        self.unary(Op::PadCols { a: self.id, start }, |a| {
            let mut out = Mat::zeros((r, total));
            out.slice_mut(s![.., start..start + c]).assign(a);
            out
        })
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'g> {
        let (r, c) = self.shape();
        assert_eq!(r * c, rows * cols, "reshape changes element count");
        self.unary(Op::Reshape(self.id), |a| {
            Mat::from_shape_vec((rows, cols), a.iter().cloned().collect()).expect("reshape")
        })
    }

    /// Single entry as a `1 x 1` scalar.
    pub fn select(self, r: usize, c: usize) -> Var<'g> {
        self.unary(Op::Select { a: self.id, r, c }, |a| Mat::from_elem((1, 1), a[[r, c]]))
    }

    /// Places a `1 x 1` scalar at `(r, c)` of a `rows x cols` zero matrix.
    pub fn scatter(self, r: usize, c: usize, rows: usize, cols: usize) -> Var<'g> {
        assert_eq!(self.shape(), (1, 1), "scatter needs a scalar");
        self.unary(Op::Scatter { a: self.id, r, c }, |a| {
            let mut out = Mat::zeros((rows, cols));
            out[[r, c]] = a[[0, 0]];
            out
        })
    }

    /// Largest entry (first one on ties).
    pub fn max_all(self) -> Var<'g> {
        let (r, c) = arg_extreme(&self.value(), |x, best| x > best);
        self.select(r, c)
    }

    /// Smallest entry (first one on ties).
    pub fn min_all(self) -> Var<'g> {
        let (r, c) = arg_extreme(&self.value(), |x, best| x < best);
        self.select(r, c)
    }

    /// `S · self` for a constant sparse `S` (or `Sᵀ · self` when `transposed`).
    pub fn sparse_left(self, mat: Rc<SparseMatrix>, transposed: bool) -> Var<'g> {
        let v = if transposed { mat.apply_transposed(&self.value()) } else { mat.apply(&self.value()) };
        self.graph.push(v, Op::Sparse { a: self.id, mat, transposed }, &[self.id])
    }

    /// Stacks variables with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let total: usize = parts.iter().map(|p| p.shape().0).sum();
        let mut offset = 0;
        let mut acc: Option<Var<'g>> = None;
        for p in parts {
            let padded = p.pad_rows(offset, total);
            offset += p.shape().0;
            acc = Some(match acc {
                Some(a) => a + padded,
                None => padded,
            });
        }
        acc.expect("non-empty")
    }
}

fn arg_extreme(a: &Mat, better: impl Fn(f64, f64) -> bool) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = a[[0, 0]];
    for ((r, c), &x) in a.indexed_iter() {
        if better(x, best_v) {
            best_v = x;
            best = (r, c);
        }
    }
    best
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'g> $trait for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                self.check_same_shape(rhs, stringify!($method));
                let a = self.value();
                let b = rhs.value();
                let mut out = Mat::zeros(a.dim());
                Zip::from(&mut out).and(&*a).and(&*b).for_each(|o, &x, &y| *o = $f(x, y));
                self.graph.push(out, Op::$variant(self.id, rhs.id), &[self.id, rhs.id])
            }
        }
    };
}

binary_op!(Add, add, Add, |x: f64, y: f64| x + y);
binary_op!(Sub, sub, Sub, |x: f64, y: f64| x - y);
binary_op!(Mul, mul, Mul, |x: f64, y: f64| x * y);

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}
