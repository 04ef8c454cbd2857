//! Small dense linear algebra: row-major matrices, Householder least squares
//! and a Jacobi symmetric eigensolver. Sizes here are tens to hundreds of
//! rows, so nothing is blocked or vectorized by hand.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use libm::{fabs, sqrt};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T * self`.
    pub fn gram(&self) -> Matrix {
        let mut g = Matrix::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                let grow = g.row_mut(i);
                for j in 0..row.len() {
                    grow[j] += ri * row[j];
                }
            }
        }
        g
    }

    /// Stack `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Matrix::from_vec(self.rows + other.rows, self.cols, data)
    }

    /// Keep only the first `n` columns.
    pub fn leading_columns(&self, n: usize) -> Matrix {
        assert!(n <= self.cols);
        let mut data = Vec::with_capacity(self.rows * n);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[..n]);
        }
        Matrix::from_vec(self.rows, n, data)
    }

    /// Gather the listed rows into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix::from_vec(rows.len(), self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Column at which a factorization lost rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankDeficient {
    pub column: usize,
}

/// Householder QR factorization of a tall matrix, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct QrFactor {
    rows: usize,
    cols: usize,
    // Householder vectors, v_k has length rows - k.
    reflectors: Vec<Vec<f64>>,
    betas: Vec<f64>,
    // Upper triangle, row-major cols x cols.
    r: Vec<f64>,
}

/// Columns whose residual norm after elimination falls below this fraction of
/// their original norm are treated as linearly dependent.
const RANK_TOLERANCE: f64 = 1e-10;

impl QrFactor {
    pub fn new(a: &Matrix) -> Result<Self, RankDeficient> {
        let (m, n) = (a.rows, a.cols);
        if m < n {
            return Err(RankDeficient { column: m });
        }
        let col_norms: Vec<f64> = (0..n)
            .map(|j| sqrt((0..m).map(|i| a[(i, j)] * a[(i, j)]).sum()))
            .collect();
        let mut w = a.clone();
        let mut reflectors = Vec::with_capacity(n);
        let mut betas = Vec::with_capacity(n);
        for k in 0..n {
            let norm = sqrt((k..m).map(|i| w[(i, k)] * w[(i, k)]).sum());
            if col_norms[k] == 0.0 || norm <= RANK_TOLERANCE * col_norms[k] {
                return Err(RankDeficient { column: k });
            }
            let alpha = if w[(k, k)] > 0.0 { -norm } else { norm };
            let mut v: Vec<f64> = (k..m).map(|i| w[(i, k)]).collect();
            v[0] -= alpha;
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            let beta = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
            for j in k..n {
                let s: f64 = beta * (k..m).map(|i| v[i - k] * w[(i, j)]).sum::<f64>();
                if s != 0.0 {
                    for i in k..m {
                        w[(i, j)] -= s * v[i - k];
                    }
                }
            }
            reflectors.push(v);
            betas.push(beta);
        }
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                r[i * n + j] = w[(i, j)];
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            reflectors,
            betas,
            r,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Least-squares solution of `A x = b`. Panics on a length mismatch.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.rows, "right-hand side length");
        let (m, n) = (self.rows, self.cols);
        let mut y = b.to_vec();
        for k in 0..n {
            let v = &self.reflectors[k];
            let s: f64 = self.betas[k] * (k..m).map(|i| v[i - k] * y[i]).sum::<f64>();
            for i in k..m {
                y[i] -= s * v[i - k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in i + 1..n {
                acc -= self.r[i * n + j] * x[j];
            }
            x[i] = acc / self.r[i * n + i];
        }
        x
    }
}

/// Least-squares solve in one shot.
pub fn lstsq(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, RankDeficient> {
    Ok(QrFactor::new(a)?.solve(b))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and a matrix whose columns are the
/// matching unit eigenvectors.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows;
    assert_eq!(n, a.cols, "symmetric_eigen needs a square matrix");
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if sqrt(off) <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if fabs(apq) <= 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (fabs(theta) + sqrt(theta * theta + 1.0))
                };
                let c = 1.0 / sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    (values, vectors)
}
