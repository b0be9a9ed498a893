//! Dense complex matrices, just enough for precoders and beam responses.

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<C64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[&[C64]]) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::DimensionMismatch("columns of unequal length".into()));
        }
        Ok(Self::from_fn(rows, columns.len(), |r, c| columns[c][r]))
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: C64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r).conj())
    }

    pub fn matmul(&self, rhs: &CMat) -> Result<CMat> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// self^H * v
    pub fn adjoint_mul_vec(&self, v: &[C64]) -> Result<Vec<C64>> {
        if v.len() != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "adjoint of {}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![C64::new(0.0, 0.0); self.cols];
        for (r, &x) in v.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a.conj() * x;
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &CMat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

pub fn norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// sum_i conj(a_i) b_i
pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// |<a, b>| / (||a|| ||b||)
pub fn correlation(a: &[C64], b: &[C64]) -> f64 {
    inner(a, b).norm() / (norm(a) * norm(b))
}

pub fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_adjoint() {
        let a = CMat::from_fn(3, 2, |r, c| C64::new(r as f64, c as f64 + 1.0));
        let i = CMat::identity(2);
        assert_eq!(a.matmul(&i).unwrap(), a);
        let v = vec![C64::new(1.0, -1.0), C64::new(0.5, 2.0), C64::new(-1.0, 0.0)];
        let direct = a.adjoint().matmul(&CMat::from_fn(3, 1, |r, _| v[r])).unwrap();
        let fast = a.adjoint_mul_vec(&v).unwrap();
        for (x, y) in direct.data.iter().zip(&fast) {
            assert!((x - y).norm() < 1e-14);
        }
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn gcd_small() {
        assert_eq!(gcd(60, 7), 1);
        assert_eq!(gcd(60, 8), 4);
        assert_eq!(gcd(5, 0), 5);
    }
}
