use crate::Mat;

/// Constant sparse matrix in CSR form, stored together with its transpose so
/// that left-multiplication can be differentiated without re-deriving it.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    fwd: Csr,
    bwd: Csr,
}

#[derive(Debug, Clone)]
struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl Csr {
    fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut data: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            if prev == Some((r, c)) {
                *data.last_mut().expect("previous entry") += v;
                continue;
            }
            indices.push(c);
            data.push(v);
            indptr[r + 1] += 1;
            prev = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Csr { rows, cols, indptr, indices, data }
    }

    fn apply(&self, x: &Mat) -> Mat {
        assert_eq!(x.nrows(), self.cols, "sparse apply: inner dimension mismatch");
        let k = x.ncols();
        let mut out = Mat::zeros((self.rows, k));
        for r in 0..self.rows {
            let mut row = out.row_mut(r);
            for idx in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[idx];
                let v = self.data[idx];
                row.scaled_add(v, &x.row(c));
            }
        }
        out
    }
}

impl SparseMatrix {
    /// Builds a `rows x cols` matrix from `(row, col, value)` triplets.
    /// Duplicate coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let transposed: Vec<(usize, usize, f64)> =
            triplets.iter().map(|&(r, c, v)| (c, r, v)).collect();
        SparseMatrix {
            fwd: Csr::from_triplets(rows, cols, triplets),
            bwd: Csr::from_triplets(cols, rows, &transposed),
        }
    }

    pub fn rows(&self) -> usize {
        self.fwd.rows
    }

    pub fn cols(&self) -> usize {
        self.fwd.cols
    }

    /// `S · x`.
    pub fn apply(&self, x: &Mat) -> Mat {
        self.fwd.apply(x)
    }

    /// `Sᵀ · x`.
    pub fn apply_transposed(&self, x: &Mat) -> Mat {
        self.bwd.apply(x)
    }

    pub fn to_dense(&self) -> Mat {
        let mut out = Mat::zeros((self.rows(), self.cols()));
        for r in 0..self.fwd.rows {
            for idx in self.fwd.indptr[r]..self.fwd.indptr[r + 1] {
                out[[r, self.fwd.indices[idx]]] += self.fwd.data[idx];
            }
        }
        out
    }
}
