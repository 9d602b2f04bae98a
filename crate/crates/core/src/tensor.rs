//! Dense 3-order tensor storage and multilinear algebra primitives.
//!
//! Layout convention (pinned for bit-reproducible files and tests): the linear
//! index of element `(i1, i2, i3)` is `i1 + I1*(i2 + I2*i3)`, i.e. mode 1
//! varies fastest. Mode-n unfoldings order the fibers by cycling the remaining
//! indices with the lower-numbered mode fastest. Under this convention
//! `unfold(Z x1 A x2 B, 3) = unfold(Z, 3) * kron(B, A)^T` holds exactly.

use nalgebra::DMatrix;

use crate::error::{LtdlError, Result};

/// Dense matrix of `f64`, column-major.
pub type Matrix = DMatrix<f64>;

/// Dense 3-order tensor with a fixed column-major-style layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    /// Builds a tensor from raw data in layout order, validating length,
    /// positive dimensions and finiteness.
    pub fn from_vec(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (i1, i2, i3) = dims;
        if i1 == 0 || i2 == 0 || i3 == 0 {
            return Err(LtdlError::Argument(format!(
                "tensor dimensions must be positive, got {dims:?}"
            )));
        }
        if data.len() != i1 * i2 * i3 {
            return Err(LtdlError::Shape(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                i1 * i2 * i3
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(LtdlError::Numerical(
                "tensor data contains non-finite entries".into(),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_fn(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for i3 in 0..dims.2 {
            for i2 in 0..dims.1 {
                for i1 in 0..dims.0 {
                    let v = f(i1, i2, i3);
                    t.data[i1 + dims.0 * (i2 + dims.1 * i3)] = v;
                }
            }
        }
        t
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, i1: usize, i2: usize, i3: usize) -> f64 {
        self.data[i1 + self.dims.0 * (i2 + self.dims.1 * i3)]
    }

    pub fn set(&mut self, i1: usize, i2: usize, i3: usize, value: f64) {
        self.data[i1 + self.dims.0 * (i2 + self.dims.1 * i3)] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Size of the given mode (1, 2 or 3).
    pub fn dim(&self, mode: usize) -> Result<usize> {
        match mode {
            1 => Ok(self.dims.0),
            2 => Ok(self.dims.1),
            3 => Ok(self.dims.2),
            _ => Err(LtdlError::Argument(format!("mode must be 1, 2 or 3, got {mode}"))),
        }
    }

    /// Mode-n unfolding: `I_n x (product of the other dims)`, columns are
    /// mode-n fibers with the lower-numbered remaining mode cycling fastest.
    pub fn unfold(&self, mode: usize) -> Result<Matrix> {
        let (i1, i2, i3) = self.dims;
        match mode {
            1 => Ok(Matrix::from_column_slice(i1, i2 * i3, &self.data)),
            2 => {
                let mut m = Matrix::zeros(i2, i1 * i3);
                for k3 in 0..i3 {
                    for k2 in 0..i2 {
                        for k1 in 0..i1 {
                            m[(k2, k1 + i1 * k3)] = self.data[k1 + i1 * (k2 + i2 * k3)];
                        }
                    }
                }
                Ok(m)
            }
            3 => {
                let mut m = Matrix::zeros(i3, i1 * i2);
                let plane = i1 * i2;
                for k3 in 0..i3 {
                    for j in 0..plane {
                        m[(k3, j)] = self.data[j + plane * k3];
                    }
                }
                Ok(m)
            }
            _ => Err(LtdlError::Argument(format!("mode must be 1, 2 or 3, got {mode}"))),
        }
    }

    /// Exact inverse of [`Tensor3::unfold`].
    pub fn fold(m: &Matrix, mode: usize, dims: (usize, usize, usize)) -> Result<Self> {
        let (i1, i2, i3) = dims;
        let (want_rows, want_cols) = match mode {
            1 => (i1, i2 * i3),
            2 => (i2, i1 * i3),
            3 => (i3, i1 * i2),
            _ => {
                return Err(LtdlError::Argument(format!("mode must be 1, 2 or 3, got {mode}")))
            }
        };
        if m.nrows() != want_rows || m.ncols() != want_cols {
            return Err(LtdlError::Shape(format!(
                "cannot fold a {}x{} matrix at mode {mode} into dims {dims:?} (expected {want_rows}x{want_cols})",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut t = Self::zeros(dims);
        match mode {
            1 => t.data.copy_from_slice(m.as_slice()),
            2 => {
                for k3 in 0..i3 {
                    for k2 in 0..i2 {
                        for k1 in 0..i1 {
                            t.data[k1 + i1 * (k2 + i2 * k3)] = m[(k2, k1 + i1 * k3)];
                        }
                    }
                }
            }
            3 => {
                let plane = i1 * i2;
                for k3 in 0..i3 {
                    for j in 0..plane {
                        t.data[j + plane * k3] = m[(k3, j)];
                    }
                }
            }
            _ => unreachable!(),
        }
        Ok(t)
    }

    /// n-mode product `self x_mode u`; `u` must have `I_mode` columns. The
    /// result replaces `I_mode` with `u.nrows()` and satisfies
    /// `unfold(result, mode) = u * unfold(self, mode)`.
    pub fn mode_product(&self, u: &Matrix, mode: usize) -> Result<Self> {
        let in_dim = self.dim(mode)?;
        if u.ncols() != in_dim {
            return Err(LtdlError::Shape(format!(
                "mode-{mode} product needs a matrix with {in_dim} columns, got {}x{}",
                u.nrows(),
                u.ncols()
            )));
        }
        let out = u * self.unfold(mode)?;
        let mut dims = self.dims;
        match mode {
            1 => dims.0 = u.nrows(),
            2 => dims.1 = u.nrows(),
            3 => dims.2 = u.nrows(),
            _ => unreachable!(),
        }
        Self::fold(&out, mode, dims)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn inner(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(LtdlError::Shape(format!(
                "inner product needs equal dims, got {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// `alpha * self + beta * other`, elementwise.
    pub fn lin_comb(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        if self.dims != other.dims {
            return Err(LtdlError::Shape(format!(
                "linear combination needs equal dims, got {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Ok(Self { dims: self.dims, data })
    }

    /// Contiguous mode-3 slice `self[:, :, k]` as an `I1 x I2` matrix.
    pub fn mode3_slice(&self, k: usize) -> Matrix {
        let (i1, i2, _) = self.dims;
        let plane = i1 * i2;
        Matrix::from_column_slice(i1, i2, &self.data[plane * k..plane * (k + 1)])
    }

    pub fn set_mode3_slice(&mut self, k: usize, slice: &Matrix) {
        let (i1, i2, _) = self.dims;
        debug_assert_eq!((slice.nrows(), slice.ncols()), (i1, i2));
        let plane = i1 * i2;
        self.data[plane * k..plane * (k + 1)].copy_from_slice(slice.as_slice());
    }
}

/// Frobenius and l1 norm of a tensor, per the elementwise definitions.
pub fn norms(t: &Tensor3) -> (f64, f64) {
    (t.frobenius(), t.l1())
}

/// Kronecker product with the standard block structure:
/// `kron(a, b)[(ia*b.nrows + ib, ja*b.ncols + jb)] = a[(ia, ja)] * b[(ib, jb)]`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}
