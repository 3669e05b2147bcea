//! Dense row-major f64 matrices.
//!
//! Everything in the model is two-dimensional: images become patch matrices,
//! token streams are `s x dim` matrices, vectors are `1 x n`. Training runs in
//! double precision so finite-difference gradient checks have headroom.

/// A dense `rows x cols` matrix of f64, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Tensor { rows, cols, data }
    }

    /// Build from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { rows: r, cols: c, data }
    }

    /// A `1 x n` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// self += other * scale, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }

    /// C = A * B with A: m x k, B: k x n.
    pub fn matmul(&self, b: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, b.rows,
            "matmul inner dims: {}x{} * {}x{}",
            self.rows, self.cols, b.rows, b.cols
        );
        let mut out = Tensor::zeros(self.rows, b.cols);
        let n = b.cols;
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &b.data[k * n..(k + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    /// C = A * B^T with A: m x k, B: n x k.
    pub fn matmul_nt(&self, b: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, b.cols,
            "matmul_nt inner dims: {}x{} * ({}x{})^T",
            self.rows, self.cols, b.rows, b.cols
        );
        let k = self.cols;
        let mut out = Tensor::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * b.rows..(i + 1) * b.rows];
            for (j, o) in o_row.iter_mut().enumerate() {
                let b_row = &b.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&a, &bv) in a_row.iter().zip(b_row) {
                    acc += a * bv;
                }
                *o = acc;
            }
        }
        out
    }

    /// C = A^T * B with A: k x m, B: k x n.
    pub fn matmul_tn(&self, b: &Tensor) -> Tensor {
        assert_eq!(
            self.rows, b.rows,
            "matmul_tn inner dims: ({}x{})^T * {}x{}",
            self.rows, self.cols, b.rows, b.cols
        );
        let m = self.cols;
        let n = b.cols;
        let mut out = Tensor::zeros(m, n);
        for k in 0..self.rows {
            let a_row = &self.data[k * m..(k + 1) * m];
            let b_row = &b.data[k * n..(k + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        out
    }
}
