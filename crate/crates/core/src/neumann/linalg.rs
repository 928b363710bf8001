//! Dense symmetric solvers: Cholesky factorisation and cyclic Jacobi
//! eigenvalues.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Lower-triangular factor `L` with `B = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Tensor,
}

impl Cholesky {
    /// Factors a symmetric positive-definite matrix; fails on a non-positive
    /// pivot.
    pub fn factor(b: &Tensor) -> Result<Self> {
        let n = b.rows();
        if b.cols() != n {
            return Err(Error::dim("cholesky", format!("{}x{} is not square", b.rows(), b.cols())));
        }
        let mut l = Tensor::zeros(n, n);
        for j in 0..n {
            let mut d = b.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > 0.0) {
                return Err(Error::contract(format!("matrix is not positive definite (pivot {j} = {d:e})")));
            }
            let d = d.sqrt();
            l.set(j, j, d);
            for i in (j + 1)..n {
                let mut s = b.get(i, j);
                let (ri, rj) = (l.row(i), l.row(j));
                for k in 0..j {
                    s -= ri[k] * rj[k];
                }
                l.set(i, j, s / d);
            }
        }
        Ok(Self { l })
    }

    /// Solves `B X = rhs` column by column.
    pub fn solve(&self, rhs: &Tensor) -> Result<Tensor> {
        let n = self.l.rows();
        if rhs.rows() != n {
            return Err(Error::dim("cholesky_solve", format!("{} rhs rows for order {n}", rhs.rows())));
        }
        let mut x = rhs.clone();
        for c in 0..rhs.cols() {
            for i in 0..n {
                let mut s = x.get(i, c);
                let li = self.l.row(i);
                for k in 0..i {
                    s -= li[k] * x.get(k, c);
                }
                x.set(i, c, s / li[i]);
            }
            for i in (0..n).rev() {
                let mut s = x.get(i, c);
                for k in (i + 1)..n {
                    s -= self.l.get(k, i) * x.get(k, c);
                }
                x.set(i, c, s / self.l.get(i, i));
            }
        }
        Ok(x)
    }
}

/// Rotation `(c, s)` annihilating `a_pq`.
fn rotation(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    if apq == 0.0 {
        return (1.0, 0.0);
    }
    let theta = (aqq - app) / (2.0 * apq);
    let t =
        if theta.abs() > 1e150 { 0.5 / theta } else { theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt()) };
    let c = 1.0 / (1.0 + t * t).sqrt();
    (c, t * c)
}

/// Disjoint index pairs of round `round` of a round-robin schedule on
/// `m` (even) slots; slots `≥ n` are padding.
fn round_pairs(m: usize, n: usize, round: usize) -> Vec<(usize, usize)> {
    let slot = |pos: usize| {
        if pos == 0 {
            0
        } else {
            1 + (pos - 1 + round) % (m - 1)
        }
    };
    (0..m / 2)
        .map(|k| {
            let (a, b) = (slot(k), slot(m - 1 - k));
            (a.min(b), a.max(b))
        })
        .filter(|&(_, b)| b < n)
        .collect()
}

fn off_diagonal_norm(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for (j, x) in a.row(i).iter().enumerate() {
            if i != j {
                s += x * x;
            }
        }
    }
    s.sqrt()
}

/// Eigenvalues of a symmetric matrix in ascending order, by parallel cyclic
/// Jacobi. Sweeps stop once the off-diagonal Frobenius norm is at most
/// `tol · ‖B‖_F`.
pub fn symmetric_eigenvalues(b: &Tensor, tol: f64, max_sweeps: usize) -> Result<Vec<f64>> {
    let n = b.rows();
    if b.cols() != n {
        return Err(Error::dim("jacobi", format!("{}x{} is not square", b.rows(), b.cols())));
    }
    let mut a = b.clone();
    let target = tol * b.frobenius();
    let m = if n.is_multiple_of(2) { n } else { n + 1 };
    let mut sweeps = 0;
    while off_diagonal_norm(&a) > target {
        if sweeps == max_sweeps {
            return Err(Error::Convergence(format!(
                "Jacobi did not reach off-norm {target:e} in {max_sweeps} sweeps (now {:e})",
                off_diagonal_norm(&a)
            )));
        }
        for round in 0..m.saturating_sub(1) {
            let pairs = round_pairs(m, n, round);
            let rots: Vec<(usize, usize, f64, f64)> = pairs
                .iter()
                .map(|&(p, q)| {
                    let (c, s) = rotation(a.get(p, p), a.get(q, q), a.get(p, q));
                    (p, q, c, s)
                })
                .filter(|r| r.3 != 0.0)
                .collect();
            if rots.is_empty() {
                continue;
            }
            apply_round(&mut a, &rots);
        }
        sweeps += 1;
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// `A ← Jᵀ A J` for the product `J` of the disjoint rotations in `rots`.
fn apply_round(a: &mut Tensor, rots: &[(usize, usize, f64, f64)]) {
    let n = a.rows();
    // Row stage: each rotation owns its two rows.
    {
        let mut rows: Vec<Option<&mut [f64]>> = a.data_mut().chunks_mut(n).map(Some).collect();
        let mut work: Vec<(&mut [f64], &mut [f64], f64, f64)> = rots
            .iter()
            .map(|&(p, q, c, s)| {
                let rp = rows[p].take().expect("pairs are disjoint");
                let rq = rows[q].take().expect("pairs are disjoint");
                (rp, rq, c, s)
            })
            .collect();
        parallel::for_each_mut(&mut work, |(rp, rq, c, s)| {
            for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
                let (xp, xq) = (*x, *y);
                *x = *c * xp - *s * xq;
                *y = *s * xp + *c * xq;
            }
        });
    }
    // Column stage: each row updates its own entries.
    parallel::for_each_chunk_mut(a.data_mut(), n, |_, row| {
        for &(p, q, c, s) in rots {
            let (xp, xq) = (row[p], row[q]);
            row[p] = c * xp - s * xq;
            row[q] = s * xp + c * xq;
        }
    });
}
