//! Small dense linear algebra: symmetric matrices with a Jacobi eigensolver,
//! plain vector helpers and a least-squares solver for tiny systems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major square matrix used for rotations and scratch work.
pub type Mat = Vec<Vec<f64>>;

/// Largest dimension the Jacobi routine is meant for.
pub const MAX_DIM: usize = 8;

/// Symmetric d×d real matrix. Only the upper triangle is stored (row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    entries: Vec<f64>,
}

/// Eigen-decomposition `M = Q diag(values) Qᵀ`, values ascending.
/// `vectors[k]` is the unit eigenvector belonging to `values[k]`.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

#[inline]
fn tri_index(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    // rows 0..i hold dim + (dim-1) + ... entries
    i * dim - i * i.saturating_sub(1) / 2 + (j - i)
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        SymMatrix { dim, entries: vec![0.0; dim * (dim + 1) / 2] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diag(&vec![1.0; dim])
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Builds the matrix from `f(i, j)` evaluated on the upper triangle.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Symmetric part `(A + Aᵀ)/2` of a dense square matrix.
    pub fn from_dense_sym_part(a: &Mat) -> Self {
        let d = a.len();
        Self::from_fn(d, |i, j| 0.5 * (a[i][j] + a[j][i]))
    }

    /// Upper triangle given row-major, as in the storage layout.
    pub fn from_upper(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 || entries.len() != dim * (dim + 1) / 2 {
            return Err(Error::InvalidInput(format!(
                "expected {} upper-triangle entries for dimension {dim}, got {}",
                dim * (dim + 1) / 2,
                entries.len()
            )));
        }
        Ok(SymMatrix { dim, entries })
    }

    /// `v ⊗ v`.
    pub fn outer(v: &[f64]) -> Self {
        Self::from_fn(v.len(), |i, j| v[i] * v[j])
    }

    /// `(a bᵀ + b aᵀ)/2`.
    pub fn sym_outer(a: &[f64], b: &[f64]) -> Self {
        Self::from_fn(a.len(), |i, j| 0.5 * (a[i] * b[j] + a[j] * b[i]))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn upper(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[tri_index(self.dim, i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = tri_index(self.dim, i, j);
        self.entries[k] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.dim, other.dim);
        SymMatrix {
            dim: self.dim,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.dim, other.dim);
        SymMatrix {
            dim: self.dim,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix { dim: self.dim, entries: self.entries.iter().map(|a| a * s).collect() }
    }

    /// `self + s·other`.
    pub fn add_scaled(&self, s: f64, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.dim, other.dim);
        SymMatrix {
            dim: self.dim,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a + s * b).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Largest absolute entry.
    pub fn norm_inf(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius norm (off-diagonal entries counted twice).
    pub fn frobenius(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                s += self.get(i, j).powi(2);
            }
        }
        s.sqrt()
    }

    /// Frobenius inner product `tr(A B)`.
    pub fn frob_dot(&self, other: &SymMatrix) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                s += self.get(i, j) * other.get(i, j);
            }
        }
        s
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| (0..self.dim).map(|j| self.get(i, j) * x[j]).sum()).collect()
    }

    /// `xᵀ M x`.
    pub fn quad(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    pub fn to_dense(&self) -> Mat {
        (0..self.dim).map(|i| (0..self.dim).map(|j| self.get(i, j)).collect()).collect()
    }

    /// `R M Rᵀ` for a dense square `R`.
    pub fn congruence(&self, r: &Mat) -> SymMatrix {
        let m = self.to_dense();
        let rm = matmul(r, &m);
        let out = matmul(&rm, &transpose(r));
        SymMatrix::from_dense_sym_part(&out)
    }

    /// Cyclic Jacobi eigen-decomposition, eigenvalues sorted ascending.
    pub fn eigen(&self) -> Eigen {
        let d = self.dim;
        assert!(d <= MAX_DIM, "Jacobi eigensolver is limited to d <= {MAX_DIM}");
        let mut a = self.to_dense();
        let mut v: Mat = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let scale = self.norm_inf().max(f64::MIN_POSITIVE);
        for _sweep in 0..64 {
            let mut off = 0.0;
            for p in 0..d {
                for q in (p + 1)..d {
                    off += a[p][q] * a[p][q];
                }
            }
            if off.sqrt() <= 1e-16 * scale {
                break;
            }
            for p in 0..d {
                for q in (p + 1)..d {
                    let apq = a[p][q];
                    if apq.abs() <= 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..d {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let vkp = row[p];
                        let vkq = row[q];
                        row[p] = c * vkp - s * vkq;
                        row[q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| a[i][i].partial_cmp(&a[j][j]).unwrap_or(std::cmp::Ordering::Equal));
        Eigen {
            values: order.iter().map(|&i| a[i][i]).collect(),
            vectors: order.iter().map(|&i| (0..d).map(|k| v[k][i]).collect()).collect(),
        }
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.eigen().values
    }
}

impl Eigen {
    /// `Q diag(values) Qᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        let d = self.values.len();
        let mut m = SymMatrix::zeros(d);
        for (mu, q) in self.values.iter().zip(&self.vectors) {
            m = m.add_scaled(*mu, &SymMatrix::outer(q));
        }
        m
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scaled(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `a + s b`.
pub fn axpy(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

pub fn unit(dim: usize, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    e[k] = 1.0;
    e
}

/// Normalized copy; `None` for a (numerically) zero vector.
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    if n <= 1e-300 || !n.is_finite() {
        None
    } else {
        Some(scaled(a, 1.0 / n))
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let m = b[0].len();
    let k = b.len();
    (0..n).map(|i| (0..m).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect()).collect()
}

pub fn transpose(a: &Mat) -> Mat {
    let n = a.len();
    let m = a[0].len();
    (0..m).map(|j| (0..n).map(|i| a[i][j]).collect()).collect()
}

pub fn mat_vec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| dot(row, x)).collect()
}

pub fn identity_mat(d: usize) -> Mat {
    (0..d).map(|i| unit(d, i)).collect()
}

/// Proper rotation `R` with `R a = b` for unit vectors `a`, `b`, acting as the
/// identity on the complement of span{a, b}.
pub fn rotation_between(a: &[f64], b: &[f64]) -> Mat {
    let d = a.len();
    let c = dot(a, b);
    if c > 1.0 - 1e-15 {
        return identity_mat(d);
    }
    if c < -1.0 + 1e-12 {
        // Half turn in a plane containing a: pick an axis orthogonal to a.
        let mut w = vec![0.0; d];
        let k = (0..d).min_by(|&i, &j| a[i].abs().partial_cmp(&a[j].abs()).unwrap()).unwrap();
        w[k] = 1.0;
        let w = normalized(&axpy(&w, -dot(&w, a), a)).expect("orthogonal direction");
        let mut r = identity_mat(d);
        for i in 0..d {
            for j in 0..d {
                r[i][j] -= 2.0 * (a[i] * a[j] + w[i] * w[j]);
            }
        }
        return r;
    }
    let mut r = identity_mat(d);
    let k: Mat = (0..d).map(|i| (0..d).map(|j| b[i] * a[j] - a[i] * b[j]).collect()).collect();
    let k2 = matmul(&k, &k);
    for i in 0..d {
        for j in 0..d {
            r[i][j] += k[i][j] + k2[i][j] / (1.0 + c);
        }
    }
    r
}

/// Rotation sending the unit vector `nu` to the last coordinate axis.
pub fn rotation_to_last_axis(nu: &[f64]) -> Mat {
    rotation_between(nu, &unit(nu.len(), nu.len() - 1))
}

/// Solves the square system `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.len();
    let mut m: Mat = a.iter().zip(b).map(|(row, &bi)| {
        let mut r = row.clone();
        r.push(bi);
        r
    }).collect();
    let scale = a.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        if m[piv][col].abs() <= 1e-14 * scale {
            return Err(Error::Resolution(format!("singular system at column {col}")));
        }
        m.swap(col, piv);
        for row in (col + 1)..n {
            let f = m[row][col] / m[col][col];
            if f != 0.0 {
                for k in col..=n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = ((i + 1)..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    Ok(x)
}

/// Least-squares solution of the overdetermined system `rows · x ≈ rhs`
/// through the normal equations (the systems here have at most ten unknowns).
pub fn least_squares(rows: &[Vec<f64>], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.len() < n || n == 0 {
        return Err(Error::Resolution(format!(
            "least squares needs at least {n} rows, got {}",
            rows.len()
        )));
    }
    let mut ata = vec![vec![0.0; n]; n];
    let mut atb = vec![0.0; n];
    for (row, &b) in rows.iter().zip(rhs) {
        for i in 0..n {
            atb[i] += row[i] * b;
            for j in 0..n {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    solve_linear(&ata, &atb)
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Slope of `log y` against `log x`, i.e. the fitted power-law exponent.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    fit_slope(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_layout_is_row_major_upper() {
        let m = SymMatrix::from_upper(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(0, 2), 3.0);
        assert_eq!(m.get(2, 0), 3.0);
        assert_eq!(m.get(1, 1), 4.0);
        assert_eq!(m.get(1, 2), 5.0);
        assert_eq!(m.get(2, 2), 6.0);
    }

    #[test]
    fn jacobi_diagonal_input() {
        let m = SymMatrix::diag(&[3.0, -1.0, 2.0]);
        let e = m.eigen();
        assert_eq!(e.values, vec![-1.0, 2.0, 3.0]);
    }

    #[test]
    fn jacobi_reconstructs_2x2() {
        let m = SymMatrix::from_upper(2, vec![2.0, 1.0, 2.0]).unwrap();
        let e = m.eigen();
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        assert!((e.values[1] - 3.0).abs() < 1e-14);
        assert!(e.reconstruct().sub(&m).norm_inf() < 1e-14);
    }

    #[test]
    fn rotation_maps_vector() {
        let a = normalized(&[0.3, -0.2, 0.9]).unwrap();
        let r = rotation_to_last_axis(&a);
        let ra = mat_vec(&r, &a);
        assert!(norm(&sub(&ra, &[0.0, 0.0, 1.0])) < 1e-14);
        let rtr = matmul(&r, &transpose(&r));
        for i in 0..3 {
            for j in 0..3 {
                assert!((rtr[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
        let neg = rotation_to_last_axis(&[0.0, 0.0, -1.0]);
        assert!(norm(&sub(&mat_vec(&neg, &[0.0, 0.0, -1.0]), &[0.0, 0.0, 1.0])) < 1e-14);
    }

    #[test]
    fn least_squares_recovers_line() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0, i as f64]).collect();
        let rhs: Vec<f64> = (0..5).map(|i| 2.0 + 3.0 * i as f64).collect();
        let x = least_squares(&rows, &rhs).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
    }
}
