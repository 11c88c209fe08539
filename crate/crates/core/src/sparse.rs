//! Compressed sparse row matrices and the linear solvers behind the FEM.
//!
//! SPD systems are solved with Jacobi-preconditioned conjugate gradients;
//! general systems go through a banded LU factorization with partial pivoting
//! (structured-grid numbering keeps bandwidths small), falling back to
//! Jacobi-preconditioned BiCGSTAB when the band would not fit in memory.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(y.len(), self.n_rows);
        for r in 0..self.n_rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[r] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n_rows];
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.cols[k] == r {
                    d[r] = self.vals[k];
                }
            }
        }
        d
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }

    /// Max |A - A^T| entry, for symmetry assertions.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                let vt = self.get(c, r);
                worst = worst.max((v - vt).abs());
            }
        }
        worst
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        for k in self.row_ptr[r]..self.row_ptr[r + 1] {
            if self.cols[k] == c {
                return self.vals[k];
            }
        }
        0.0
    }

    /// (lower, upper) bandwidth of the sparsity pattern.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0usize;
        let mut ku = 0usize;
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[k];
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }
}

/// Row-wise accumulator; duplicate insertions sum.
pub struct CsrBuilder {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl CsrBuilder {
    pub fn new(n: usize) -> Self {
        CsrBuilder {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            self.rows[r].push((c, v));
        }
    }

    pub fn finish(mut self) -> CsrMatrix {
        let mut row_ptr = Vec::with_capacity(self.n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in 0..self.n {
            let row = &mut self.rows[r];
            row.sort_unstable_by_key(|e| e.0);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut v = 0.0;
                while i < row.len() && row[i].0 == c {
                    v += row[i].1;
                    i += 1;
                }
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix {
            n_rows: self.n,
            n_cols: self.n,
            row_ptr,
            cols,
            vals,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub struct SolveStats {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients with optional warm start.
pub fn solve_cg(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveStats)> {
    let n = a.n_rows;
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveStats {
                iterations: 0,
                rel_residual: 0.0,
            },
        ));
    }
    let diag = a.diagonal();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = match x0 {
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    let mut r = vec![0.0; n];
    a.matvec(&x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];

    for it in 0..max_iter {
        let rel = norm2(&r) / bnorm;
        if rel < tol {
            return Ok((
                x,
                SolveStats {
                    iterations: it,
                    rel_residual: rel,
                },
            ));
        }
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(CoreError::Solver {
                iterations: it,
                residual: rel,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rel = norm2(&r) / bnorm;
    if rel < tol {
        Ok((
            x,
            SolveStats {
                iterations: max_iter,
                rel_residual: rel,
            },
        ))
    } else {
        Err(CoreError::Solver {
            iterations: max_iter,
            residual: rel,
        })
    }
}

/// Banded LU with partial pivoting (LAPACK gbtrf storage scheme).
///
/// The factor needs kl extra superdiagonals for pivoting fill, so storage is
/// (2*kl + ku + 1) x n.
pub fn solve_banded_lu(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.n_rows;
    let (kl, ku) = a.bandwidths();
    let ldab = 2 * kl + ku + 1;
    // Band storage: ab[i_band * n + j] where i_band = kl + ku + i - j.
    let mut ab = vec![0.0f64; ldab * n];
    for r in 0..n {
        for (c, v) in a.row(r) {
            let band_row = kl + ku + r - c;
            ab[band_row * n + c] = v;
        }
    }
    let mut piv = vec![0usize; n];
    let at = |ab: &Vec<f64>, i: usize, j: usize| -> f64 { ab[(kl + ku + i - j) * n + j] };
    let set = |ab: &mut Vec<f64>, i: usize, j: usize, v: f64| {
        ab[(kl + ku + i - j) * n + j] = v;
    };

    for j in 0..n {
        // pivot search in column j, rows j..=min(j+kl, n-1)
        let last = (j + kl).min(n - 1);
        let mut pr = j;
        let mut pv = at(&ab, j, j).abs();
        for i in (j + 1)..=last {
            let v = at(&ab, i, j).abs();
            if v > pv {
                pv = v;
                pr = i;
            }
        }
        if pv == 0.0 {
            return Err(CoreError::Assembly(format!(
                "singular matrix at column {j} during banded factorization"
            )));
        }
        piv[j] = pr;
        let upto = (j + kl + ku).min(n - 1);
        if pr != j {
            for c in j..=upto {
                let vj = at(&ab, j, c);
                let vp = at(&ab, pr, c);
                set(&mut ab, j, c, vp);
                set(&mut ab, pr, c, vj);
            }
        }
        let pivot = at(&ab, j, j);
        for i in (j + 1)..=last {
            let m = at(&ab, i, j) / pivot;
            set(&mut ab, i, j, m);
            if m != 0.0 {
                for c in (j + 1)..=upto {
                    let v = at(&ab, i, c) - m * at(&ab, j, c);
                    set(&mut ab, i, c, v);
                }
            }
        }
    }

    // forward substitution with pivoting
    let mut x = b.to_vec();
    for j in 0..n {
        if piv[j] != j {
            x.swap(j, piv[j]);
        }
        let last = (j + kl).min(n - 1);
        for i in (j + 1)..=last {
            let m = at(&ab, i, j);
            x[i] -= m * x[j];
        }
    }
    // back substitution
    for j in (0..n).rev() {
        let upto = (j + kl + ku).min(n - 1);
        let mut acc = x[j];
        for c in (j + 1)..=upto {
            acc -= at(&ab, j, c) * x[c];
        }
        x[j] = acc / at(&ab, j, j);
    }
    Ok(x)
}

/// Jacobi-preconditioned BiCGSTAB for general systems too wide-banded for LU.
pub fn solve_bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveStats)> {
    let n = a.n_rows;
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveStats {
                iterations: 0,
                rel_residual: 0.0,
            },
        ));
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r0 = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut shat = vec![0.0; n];

    for it in 0..max_iter {
        let rel = norm2(&r) / bnorm;
        if rel < tol {
            return Ok((
                x,
                SolveStats {
                    iterations: it,
                    rel_residual: rel,
                },
            ));
        }
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 {
            return Err(CoreError::Solver {
                iterations: it,
                residual: rel,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        for i in 0..n {
            phat[i] = p[i] * inv_diag[i];
        }
        a.matvec(&phat, &mut v);
        alpha = rho / dot(&r0, &v);
        let s: Vec<f64> = (0..n).map(|i| r[i] - alpha * v[i]).collect();
        if norm2(&s) / bnorm < tol {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            let rel = norm2(&s) / bnorm;
            return Ok((
                x,
                SolveStats {
                    iterations: it + 1,
                    rel_residual: rel,
                },
            ));
        }
        for i in 0..n {
            shat[i] = s[i] * inv_diag[i];
        }
        a.matvec(&shat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        if omega == 0.0 {
            return Err(CoreError::Solver {
                iterations: it,
                residual: norm2(&r) / bnorm,
            });
        }
    }
    let rel = norm2(&r) / bnorm;
    Err(CoreError::Solver {
        iterations: max_iter,
        residual: rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn dense_lu_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        // Independent dense Gaussian elimination oracle.
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.to_vec();
        let mut x = b.to_vec();
        for j in 0..n {
            let mut pr = j;
            for i in j + 1..n {
                if m[i][j].abs() > m[pr][j].abs() {
                    pr = i;
                }
            }
            m.swap(j, pr);
            x.swap(j, pr);
            for i in j + 1..n {
                let f = m[i][j] / m[j][j];
                for c in j..n {
                    m[i][c] -= f * m[j][c];
                }
                x[i] -= f * x[j];
            }
        }
        for j in (0..n).rev() {
            for c in j + 1..n {
                x[j] -= m[j][c] * x[c];
            }
            x[j] /= m[j][j];
        }
        x
    }

    fn to_csr(a: &[Vec<f64>]) -> CsrMatrix {
        let n = a.len();
        let mut b = CsrBuilder::new(n);
        for (r, row) in a.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                b.add(r, c, v);
            }
        }
        b.finish()
    }

    fn random_spd(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = vec![vec![0.0; n]; n];
        for r in 0..n {
            for c in 0..n {
                g[r][c] = rng.gen_range(-1.0..1.0);
            }
        }
        // A = G G^T + n I is SPD
        let mut a = vec![vec![0.0; n]; n];
        for r in 0..n {
            for c in 0..n {
                a[r][c] = (0..n).map(|k| g[r][k] * g[c][k]).sum();
            }
            a[r][r] += n as f64;
        }
        a
    }

    #[test]
    fn identity_returns_rhs() {
        let mut b = CsrBuilder::new(3);
        for i in 0..3 {
            b.add(i, i, 1.0);
        }
        let a = b.finish();
        let rhs = vec![3.0, -1.0, 0.5];
        let (x, _) = solve_cg(&a, &rhs, None, 1e-12, 100).unwrap();
        for i in 0..3 {
            assert!((x[i] - rhs[i]).abs() < 1e-12);
        }
        let x2 = solve_banded_lu(&a, &rhs).unwrap();
        for i in 0..3 {
            assert!((x2[i] - rhs[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn two_by_two_spd_hand_solution() {
        let a = to_csr(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let (x, _) = solve_cg(&a, &[1.0, 2.0], None, 1e-14, 100).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn random_spd_matches_dense_oracle() {
        let dense = random_spd(50, 42);
        let a = to_csr(&dense);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let b: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oracle = dense_lu_solve(&dense, &b);
        let (x, stats) = solve_cg(&a, &b, None, 1e-13, 5000).unwrap();
        let rel: f64 = {
            let num: f64 = x.iter().zip(&oracle).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = oracle.iter().map(|v| v * v).sum();
            (num / den).sqrt()
        };
        assert!(rel < 1e-8, "rel {rel} after {}", stats.iterations);
    }

    #[test]
    fn banded_lu_matches_dense_oracle_nonsymmetric() {
        let n = 40;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut dense = vec![vec![0.0; n]; n];
        for r in 0..n {
            for c in 0..n {
                if (r as isize - c as isize).abs() <= 4 {
                    dense[r][c] = rng.gen_range(-1.0..1.0);
                }
            }
            dense[r][r] += 3.0;
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = solve_banded_lu(&to_csr(&dense), &b).unwrap();
        let oracle = dense_lu_solve(&dense, &b);
        for i in 0..n {
            assert!((x[i] - oracle[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn bicgstab_solves_nonsymmetric() {
        let n = 30;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut dense = vec![vec![0.0; n]; n];
        for r in 0..n {
            for c in 0..n {
                if (r as isize - c as isize).abs() <= 3 {
                    dense[r][c] = rng.gen_range(-1.0..1.0);
                }
            }
            dense[r][r] += 4.0;
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (x, _) = solve_bicgstab(&to_csr(&dense), &b, 1e-12, 1000).unwrap();
        let oracle = dense_lu_solve(&dense, &b);
        for i in 0..n {
            assert!((x[i] - oracle[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn builder_sums_duplicates_and_sorts() {
        let mut b = CsrBuilder::new(2);
        b.add(0, 1, 2.0);
        b.add(0, 0, 1.0);
        b.add(0, 1, 3.0);
        b.add(1, 1, 1.0);
        let a = b.finish();
        assert_eq!(a.get(0, 1), 5.0);
        assert_eq!(a.get(0, 0), 1.0);
        assert_eq!(a.cols[0], 0);
    }
}
