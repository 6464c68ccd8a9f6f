//! Dense LU and preconditioned conjugate gradients, generic over the scalar.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub rows: usize,
    pub cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// `max |A - A^T|`.
    pub fn asymmetry(&self) -> T {
        let mut m = T::zero();
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                m = m.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        m
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        (0..self.rows).map(|i| self.row(i).iter().zip(v).map(|(a, b)| *a * *b).sum()).collect()
    }
}

impl<T> std::ops::Index<(usize, usize)> for Dense<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Dense<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Solve `A X = B` by LU with partial pivoting; `a` is consumed.
pub fn lu_solve<T: Scalar>(mut a: Dense<T>, mut b: Dense<T>) -> Result<Dense<T>> {
    let n = a.rows;
    if a.cols != n || b.rows != n {
        return Err(Error::Numerical(format!("lu_solve shape mismatch {}x{} vs {}", a.rows, a.cols, b.rows)));
    }
    let m = b.cols;
    let scale = a.max_abs();
    for k in 0..n {
        let (p, pv) = (k..n)
            .map(|i| (i, a[(i, k)].abs()))
            .fold((k, T::zero()), |best, c| if c.1 > best.1 { c } else { best });
        if pv <= scale * T::epsilon() {
            return Err(Error::Numerical("singular matrix in dense solve".into()));
        }
        if p != k {
            for j in 0..n {
                a.data.swap(k * n + j, p * n + j);
            }
            for j in 0..m {
                b.data.swap(k * m + j, p * m + j);
            }
        }
        let piv = a[(k, k)];
        for i in k + 1..n {
            let f = a[(i, k)] / piv;
            if f == T::zero() {
                continue;
            }
            a[(i, k)] = f;
            let (top, bottom) = a.data.split_at_mut(i * n);
            let rk = &top[k * n..k * n + n];
            let ri = &mut bottom[..n];
            for j in k + 1..n {
                ri[j] = ri[j] - f * rk[j];
            }
            let (btop, bbot) = b.data.split_at_mut(i * m);
            let bk = &btop[k * m..k * m + m];
            for (bij, bkj) in bbot[..m].iter_mut().zip(bk) {
                *bij = *bij - f * *bkj;
            }
        }
    }
    // Row-oriented back substitution keeps the inner loop contiguous.
    for k in (0..n).rev() {
        let (top, bottom) = b.data.split_at_mut((k + 1) * m);
        let bk = &mut top[k * m..];
        for i in k + 1..n {
            let f = a[(k, i)];
            if f == T::zero() {
                continue;
            }
            let bi = &bottom[(i - k - 1) * m..(i - k) * m];
            for (x, y) in bk.iter_mut().zip(bi) {
                *x = *x - f * *y;
            }
        }
        let inv = T::one() / a[(k, k)];
        for x in bk.iter_mut() {
            *x = *x * inv;
        }
    }
    Ok(b)
}

/// Compressed sparse rows.
#[derive(Clone, Debug)]
pub struct Csr<T> {
    pub n: usize,
    rowptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    /// From per-row `(col, value)` lists.
    pub fn from_rows(rows: Vec<Vec<(u32, T)>>) -> Self {
        let n = rows.len();
        let mut rowptr = Vec::with_capacity(n + 1);
        rowptr.push(0);
        let mut col = Vec::new();
        let mut val = Vec::new();
        for r in rows {
            for (c, v) in r {
                col.push(c);
                val.push(v);
            }
            rowptr.push(col.len());
        }
        Csr { n, rowptr, col, val }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (a, b) = (self.rowptr[i], self.rowptr[i + 1]);
        self.col[a..b].iter().map(|c| *c as usize).zip(self.val[a..b].iter().copied())
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.n).map(|i| self.row(i).find(|(j, _)| *j == i).map(|(_, v)| v).unwrap_or_else(T::zero)).collect()
    }

    pub fn mul_into(&self, x: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (a, b) = (self.rowptr[i], self.rowptr[i + 1]);
            let mut s = T::zero();
            for k in a..b {
                s = s + self.val[k] * x[self.col[k] as usize];
            }
            *yi = s;
        }
    }

    pub fn to_dense(&self) -> Dense<T> {
        let mut d = Dense::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[(i, j)] = d[(i, j)] + v;
            }
        }
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Dense,
    Cg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub method: SolveMethod,
    pub unknowns: usize,
    pub iterations: usize,
    pub residual: f64,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

/// Jacobi-preconditioned CG for a symmetric positive definite `a`.
/// Stops when `|r| <= tol |b|`.
pub fn cg<T: Scalar>(a: &Csr<T>, b: &[T], tol: f64, max_iter: usize) -> Result<(Vec<T>, SolverStats)> {
    let n = a.n;
    let dinv: Vec<T> = a.diag().into_iter().map(|d| T::one() / d).collect();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![T::zero(); n];
    let stats = |it, res| SolverStats { method: SolveMethod::Cg, unknowns: n, iterations: it, residual: res };
    if bnorm == 0.0 {
        return Ok((x, stats(0, 0.0)));
    }
    let mut r = b.to_vec();
    let mut z: Vec<T> = r.iter().zip(&dinv).map(|(r, d)| *r * *d).collect();
    let mut p = z.clone();
    let mut ap = vec![T::zero(); n];
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        a.mul_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Numerical("CG breakdown: operator not positive definite".into()));
        }
        let alpha = T::of(rz / pap);
        for i in 0..n {
            x[i] = x[i] + alpha * p[i];
            r[i] = r[i] - alpha * ap[i];
        }
        let rel = dot(&r, &r).sqrt() / bnorm;
        if rel <= tol {
            // Confirm with the true residual.
            a.mul_into(&x, &mut ap);
            let tr: f64 = b.iter().zip(&ap).map(|(b, ax)| (b.f64() - ax.f64()).powi(2)).sum::<f64>().sqrt() / bnorm;
            if tr <= tol * 10.0 {
                return Ok((x, stats(it, tr)));
            }
            r = b.iter().zip(&ap).map(|(b, ax)| *b - *ax).collect();
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = T::of(rz_new / rz);
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Numerical(format!("CG did not reach residual {tol:e} in {max_iter} iterations")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> Csr<f64> {
        Csr::from_rows(
            (0..n)
                .map(|i| {
                    let mut r = vec![(i as u32, 2.5)];
                    if i > 0 {
                        r.push((i as u32 - 1, -1.0));
                    }
                    if i + 1 < n {
                        r.push((i as u32 + 1, -1.0));
                    }
                    r
                })
                .collect(),
        )
    }

    #[test]
    fn lu_solves_known_system() {
        let mut a = Dense::<f64>::zeros(3, 3);
        let vals = [[0.0, 2.0, 1.0], [1.0, 1.0, 0.0], [3.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                a[(i, j)] = vals[i][j];
            }
        }
        let x_true = [1.0, -2.0, 0.5];
        let b = a.mul_vec(&x_true);
        let mut bm = Dense::zeros(3, 1);
        for i in 0..3 {
            bm[(i, 0)] = b[i];
        }
        let x = lu_solve(a, bm).unwrap();
        for i in 0..3 {
            assert!((x[(i, 0)] - x_true[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_matches_lu() {
        let a = laplacian_1d(40);
        let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let (x, st) = cg(&a, &b, 1e-12, 1000).unwrap();
        assert!(st.residual <= 1e-11);
        let mut bm = Dense::zeros(40, 1);
        for i in 0..40 {
            bm[(i, 0)] = b[i];
        }
        let y = lu_solve(a.to_dense(), bm).unwrap();
        for i in 0..40 {
            assert!((x[i] - y[(i, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn cg_f32() {
        let a = Csr::<f32>::from_rows(laplacian_1d(20).to_dense().row(0).iter().map(|_| vec![]).collect());
        assert_eq!(a.n, 20);
        let a64 = laplacian_1d(20);
        let a32 = Csr::from_rows((0..20).map(|i| a64.row(i).map(|(j, v)| (j as u32, v as f32)).collect()).collect());
        let b = vec![1f32; 20];
        let (x, _) = cg(&a32, &b, 1e-5, 500).unwrap();
        let mut ax = vec![0f32; 20];
        a32.mul_into(&x, &mut ax);
        assert!(ax.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }
}
