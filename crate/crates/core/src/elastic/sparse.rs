//! Compressed sparse row matrices and a Jacobi-preconditioned CG solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Square matrix with the given sparsity pattern (one sorted, deduplicated
    /// column list per row) and zero values.
    pub fn from_pattern(rows: Vec<Vec<usize>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self {
            n,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    fn index(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].binary_search(&j).ok().map(|k| r.start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.index(i, j).map_or(0.0, |k| self.values[k])
    }

    /// Adds `v` at `(i, j)`; the entry must be in the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self
            .index(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside sparsity pattern"));
        self.values[k] += v;
    }

    pub fn clear(&mut self) {
        self.values.fill(0.0);
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn add_diagonal(&mut self, d: &[f64]) {
        for (i, &v) in d.iter().enumerate() {
            self.add(i, i, v);
        }
    }

    /// `self ← a·self + b·other` for matrices sharing one pattern.
    pub fn axpby(&mut self, a: f64, b: f64, other: &CsrMatrix) {
        assert_eq!(self.col_idx, other.col_idx, "pattern mismatch");
        for (x, &y) in self.values.iter_mut().zip(&other.values) {
            *x = a * *x + b * y;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                m[(i, j)] += a;
            }
        }
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest `|Aᵢⱼ − Aⱼᵢ|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                worst = worst.max((a - self.get(j, i)).abs());
            }
        }
        worst
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CgReport {
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `A x = b` restricted to the entries where `free` is true, with
/// the remaining entries of `x` held at zero. Fails on a nonpositive
/// curvature direction or when `max_iter` is exhausted.
pub fn pcg(a: &CsrMatrix, b: &[f64], free: &[bool], tol: f64, max_iter: usize) -> Result<(Vec<f64>, CgReport)> {
    let n = a.dim();
    let diag = a.diagonal();
    let inv: Vec<f64> = diag
        .iter()
        .zip(free)
        .map(|(&d, &f)| if f && d > 0.0 { 1.0 / d } else { 0.0 })
        .collect();
    let mask = |v: &mut Vec<f64>| {
        for (x, &f) in v.iter_mut().zip(free) {
            if !f {
                *x = 0.0;
            }
        }
    };
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = b.to_vec();
    mask(&mut r);
    let bnorm = dot(&r, &r).sqrt();
    if bnorm == 0.0 {
        return Ok((
            x,
            CgReport {
                iterations: 0,
                residual: 0.0,
            },
        ));
    }
    let mut z: Vec<f64> = r.iter().zip(&inv).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        let mut ap = a.mul_vec(&p);
        mask(&mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Singular);
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rn = dot(&r, &r).sqrt();
        if rn <= tol * bnorm {
            return Ok((
                x,
                CgReport {
                    iterations: it + 1,
                    residual: rn / bnorm,
                },
            ));
        }
        for i in 0..n {
            z[i] = r[i] * inv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Singular)
}

/// Dense LU on the free entries; used when CG cannot handle the system.
pub fn dense_solve(a: &CsrMatrix, b: &[f64], free: &[bool]) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..a.dim()).filter(|&i| free[i]).collect();
    let m = idx.len();
    let mut pos = vec![usize::MAX; a.dim()];
    for (k, &i) in idx.iter().enumerate() {
        pos[i] = k;
    }
    let mut dense = DMatrix::zeros(m, m);
    for (k, &i) in idx.iter().enumerate() {
        let (c, v) = a.row(i);
        for (&j, &val) in c.iter().zip(v) {
            if pos[j] != usize::MAX {
                dense[(k, pos[j])] += val;
            }
        }
    }
    let rhs = DVector::from_iterator(m, idx.iter().map(|&i| b[i]));
    let sol = dense.lu().solve(&rhs).ok_or(Error::Singular)?;
    let mut x = vec![0.0; a.dim()];
    for (k, &i) in idx.iter().enumerate() {
        x[i] = sol[k];
    }
    Ok(x)
}
