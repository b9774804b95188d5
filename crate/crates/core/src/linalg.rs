//! Dense complex linear algebra on paired real matrices.
//!
//! A [`ComplexMatrix`] keeps its real and imaginary parts as two real
//! matrices, and every operation here is written in terms of real products
//! and real inverses. The same formulas are replayed on the tape in
//! [`crate::neural::tape`], which is what makes the beamforming pipelines
//! differentiable without complex calculus.

use ndarray::{s, Array2, Axis};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Condition estimate above which a real matrix is treated as singular.
pub const SINGULAR_COND: f64 = 1e14;

/// Condition estimate above which `Re{D}` is considered too ill-conditioned
/// for the two-step inverse and the stacked 2n x 2n route is used instead.
pub const REAL_PART_COND: f64 = 1e10;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    re: Array2<f64>,
    im: Array2<f64>,
}

impl ComplexMatrix {
    pub fn from_parts(re: Array2<f64>, im: Array2<f64>) -> Result<Self> {
        if re.dim() != im.dim() {
            return Err(Error::dims("ComplexMatrix::from_parts", re.dim(), im.dim()));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            re: Array2::zeros((rows, cols)),
            im: Array2::zeros((rows, cols)),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            re: Array2::eye(n),
            im: Array2::zeros((n, n)),
        }
    }

    /// Real matrix with zero imaginary part.
    pub fn from_real(re: Array2<f64>) -> Self {
        let im = Array2::zeros(re.dim());
        Self { re, im }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut out = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.set(i, j, f(i, j));
            }
        }
        out
    }

    /// Builds a matrix from `rows x cols` entries in row-major order.
    pub fn from_row_major(rows: usize, cols: usize, data: &[Complex64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "ComplexMatrix::from_row_major",
                (rows, cols),
                (data.len(), 1),
            ));
        }
        Ok(Self::from_fn(rows, cols, |i, j| data[i * cols + j]))
    }

    pub fn rows(&self) -> usize {
        self.re.nrows()
    }

    pub fn cols(&self) -> usize {
        self.re.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.re.dim()
    }

    pub fn re(&self) -> &Array2<f64> {
        &self.re
    }

    pub fn im(&self) -> &Array2<f64> {
        &self.im
    }

    pub fn into_parts(self) -> (Array2<f64>, Array2<f64>) {
        (self.re, self.im)
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        Complex64::new(self.re[[i, j]], self.im[[i, j]])
    }

    pub fn set(&mut self, i: usize, j: usize, z: Complex64) {
        self.re[[i, j]] = z.re;
        self.im[[i, j]] = z.im;
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(self.im.iter()).all(|x| x.is_finite())
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            re: &self.re * factor,
            im: &self.im * factor,
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::dims("add", self.dim(), other.dim()));
        }
        Ok(Self {
            re: &self.re + &other.re,
            im: &self.im + &other.im,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::dims("sub", self.dim(), other.dim()));
        }
        Ok(Self {
            re: &self.re - &other.re,
            im: &self.im - &other.im,
        })
    }

    /// Plain transpose without conjugation.
    pub fn transpose(&self) -> Self {
        Self {
            re: self.re.t().to_owned(),
            im: self.im.t().to_owned(),
        }
    }

    pub fn row(&self, i: usize) -> Self {
        Self {
            re: self.re.slice(s![i..i + 1, ..]).to_owned(),
            im: self.im.slice(s![i..i + 1, ..]).to_owned(),
        }
    }

    pub fn column(&self, j: usize) -> Self {
        Self {
            re: self.re.slice(s![.., j..j + 1]).to_owned(),
            im: self.im.slice(s![.., j..j + 1]).to_owned(),
        }
    }

    /// Keeps the leading `n` columns.
    pub fn leading_cols(&self, n: usize) -> Self {
        Self {
            re: self.re.slice(s![.., ..n]).to_owned(),
            im: self.im.slice(s![.., ..n]).to_owned(),
        }
    }

    /// Keeps the leading `n` rows.
    pub fn leading_rows(&self, n: usize) -> Self {
        Self {
            re: self.re.slice(s![..n, ..]).to_owned(),
            im: self.im.slice(s![..n, ..]).to_owned(),
        }
    }

    /// Row `i` of the result is row `perm[i]` of `self`, i.e. `Π^T A` for the
    /// permutation matrix with `Π[perm[i], i] = 1`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        Self {
            re: self.re.select(Axis(0), perm),
            im: self.im.select(Axis(0), perm),
        }
    }

    /// Column `j` of the result is column `perm[j]` of `self`, i.e. `A Π`.
    pub fn permute_cols(&self, perm: &[usize]) -> Self {
        Self {
            re: self.re.select(Axis(1), perm),
            im: self.im.select(Axis(1), perm),
        }
    }

    /// Squared Frobenius norm, equal to `Tr(A A^H)`.
    pub fn fro_norm_sq(&self) -> f64 {
        self.re.iter().chain(self.im.iter()).map(|x| x * x).sum()
    }

    /// Real matrix `[Re | Im]` with one row per row of `self`.
    pub fn to_stacked_rows(&self) -> Array2<f64> {
        ndarray::concatenate![Axis(1), self.re, self.im]
    }

    /// Inverse of [`ComplexMatrix::to_stacked_rows`].
    pub fn from_stacked_rows(stacked: &Array2<f64>) -> Result<Self> {
        let width = stacked.ncols();
        if !width.is_multiple_of(2) {
            return Err(Error::Format(format!("stacked row width {width} is not even")));
        }
        let half = width / 2;
        Ok(Self {
            re: stacked.slice(s![.., ..half]).to_owned(),
            im: stacked.slice(s![.., half..]).to_owned(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dim(), other.dim(), "max_abs_diff shape mismatch");
        let mut worst = 0.0_f64;
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                worst = worst.max((self.get(i, j) - other.get(i, j)).norm());
            }
        }
        worst
    }
}

/// Complex product `A B` evaluated block-wise from the stacked real form
/// `[Re C; Im C] = [Re A, -Im A; Im A, Re A] [Re B; Im B]`.
pub fn cmul(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::dims("cmul", a.dim(), b.dim()));
    }
    let re = a.re.dot(&b.re) - a.im.dot(&b.im);
    let im = a.im.dot(&b.re) + a.re.dot(&b.im);
    Ok(ComplexMatrix { re, im })
}

/// Conjugate transpose.
pub fn hermitian(a: &ComplexMatrix) -> ComplexMatrix {
    ComplexMatrix {
        re: a.re.t().to_owned(),
        im: a.im.t().mapv(|x| -x),
    }
}

pub fn fro_norm(a: &ComplexMatrix) -> f64 {
    a.fro_norm_sq().sqrt()
}

/// Complex inverse through real inverses only.
///
/// With `D = Dr + j Di` and `E = D^{-1}`:
/// `Re E = (Dr + Di Dr^{-1} Di)^{-1}`, `Im E = -Dr^{-1} Di Re E`.
/// When `Dr` is (numerically) singular the stacked real matrix
/// `[Dr, -Di; Di, Dr]` is inverted instead; its first block column holds
/// `[Re E; Im E]`.
pub fn cinv(d: &ComplexMatrix) -> Result<ComplexMatrix> {
    let (n, m) = d.dim();
    if n != m {
        return Err(Error::dims("cinv", d.dim(), d.dim()));
    }
    if let Ok((dr_inv, cond)) = real_inverse_with_cond(&d.re) {
        if cond <= REAL_PART_COND {
            let schur = &d.re + &d.im.dot(&dr_inv.dot(&d.im));
            let e_re = real_inverse(&schur)?;
            let e_im = -dr_inv.dot(&d.im).dot(&e_re);
            return Ok(ComplexMatrix { re: e_re, im: e_im });
        }
    }
    let stacked = stacked_block(d);
    let inv = real_inverse(&stacked)?;
    Ok(ComplexMatrix {
        re: inv.slice(s![..n, ..n]).to_owned(),
        im: inv.slice(s![n.., ..n]).to_owned(),
    })
}

/// `[Re A, -Im A; Im A, Re A]`.
pub fn stacked_block(a: &ComplexMatrix) -> Array2<f64> {
    let neg_im = a.im.mapv(|x| -x);
    let top = ndarray::concatenate![Axis(1), a.re, neg_im];
    let bottom = ndarray::concatenate![Axis(1), a.im, a.re];
    ndarray::concatenate![Axis(0), top, bottom]
}

/// Inverse of a real square matrix via partial-pivoted LU.
pub fn real_inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    let (inv, cond) = real_inverse_with_cond(a)?;
    if cond > SINGULAR_COND {
        return Err(Error::Singular { cond });
    }
    Ok(inv)
}

/// Like [`real_inverse`] but returns the 1-norm condition estimate
/// `‖A‖₁ ‖A⁻¹‖₁` instead of rejecting ill-conditioned input. Fails only on
/// an exactly zero (or non-finite) pivot.
pub fn real_inverse_with_cond(a: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::dims("real_inverse", a.dim(), a.dim()));
    }
    let lu = Lu::factor(a)?;
    let inv = lu.inverse();
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() {
        return Err(Error::Singular { cond: f64::INFINITY });
    }
    Ok((inv, cond))
}

/// Maximum absolute column sum.
pub fn norm1(a: &Array2<f64>) -> f64 {
    a.columns()
        .into_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Packed LU factors with row permutation, `P A = L U`.
struct Lu {
    factors: Array2<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(a: &Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        let mut f = a.to_owned();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (pivot_row, pivot_abs) =
                (k..n)
                    .map(|i| (i, f[[i, k]].abs()))
                    .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_abs == 0.0 || !pivot_abs.is_finite() {
                return Err(Error::Singular { cond: f64::INFINITY });
            }
            if pivot_row != k {
                for j in 0..n {
                    f.swap([k, j], [pivot_row, j]);
                }
                perm.swap(k, pivot_row);
            }
            let pivot = f[[k, k]];
            for i in k + 1..n {
                let l = f[[i, k]] / pivot;
                f[[i, k]] = l;
                if l != 0.0 {
                    for j in k + 1..n {
                        f[[i, j]] -= l * f[[k, j]];
                    }
                }
            }
        }
        Ok(Self { factors: f, perm })
    }

    fn inverse(&self) -> Array2<f64> {
        let n = self.factors.nrows();
        let mut inv = Array2::zeros((n, n));
        let mut col = vec![0.0; n];
        for j in 0..n {
            for (i, c) in col.iter_mut().enumerate() {
                *c = if self.perm[i] == j { 1.0 } else { 0.0 };
            }
            // forward substitution with unit lower triangle
            for i in 0..n {
                let mut acc = col[i];
                for k in 0..i {
                    acc -= self.factors[[i, k]] * col[k];
                }
                col[i] = acc;
            }
            for i in (0..n).rev() {
                let mut acc = col[i];
                for k in i + 1..n {
                    acc -= self.factors[[i, k]] * col[k];
                }
                col[i] = acc / self.factors[[i, i]];
            }
            for i in 0..n {
                inv[[i, j]] = col[i];
            }
        }
        inv
    }
}
