//! Banded linear algebra: storage, LU with partial pivoting, and bordered
//! (banded-plus-low-rank) solves.
//!
//! All discretized 1-D operators in this crate are banded with bandwidth a
//! small multiple of the component count, so a dedicated band solver keeps
//! every linear solve O(n·bw²) instead of O(n³).  Phase conditions and
//! nonlocal Newton corrections add a handful of dense rows/columns, which are
//! handled by block elimination with iterative refinement rather than by
//! widening the band.

use crate::{Error, Result};
use ndarray::Array2;

/// Row-compressed banded matrix: entry (i, j) is stored when
/// `i - kl <= j <= i + ku`.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    /// `data[i * (kl + ku + 1) + (j - i + kl)]`
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        BandMatrix {
            n,
            kl,
            ku,
            data: vec![0.0; n * (kl + ku + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kl(&self) -> usize {
        self.kl
    }

    pub fn ku(&self) -> usize {
        self.ku
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> Option<usize> {
        let (i_, j_) = (i as isize, j as isize);
        let off = j_ - i_ + self.kl as isize;
        if i < self.n && j < self.n && off >= 0 && off < (self.kl + self.ku + 1) as isize {
            Some(i * (self.kl + self.ku + 1) + off as usize)
        } else {
            None
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.idx(i, j).map_or(0.0, |k| self.data[k])
    }

    /// Sets entry (i, j); panics if outside the band.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self
            .idx(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside band kl={} ku={}", self.kl, self.ku));
        self.data[k] = v;
    }

    /// Adds to entry (i, j); panics if outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self
            .idx(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside band kl={} ku={}", self.kl, self.ku));
        self.data[k] += v;
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        let w = self.kl + self.ku + 1;
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.kl);
            let j1 = (i + self.ku).min(self.n - 1);
            let row = &self.data[i * w..(i + 1) * w];
            let mut acc = 0.0;
            for j in j0..=j1 {
                acc += row[(j + self.kl) - i] * x[j];
            }
            y[i] = acc;
        }
    }

    /// y = alpha * A x + beta * y
    pub fn matvec_acc(&self, alpha: f64, x: &[f64], beta: f64, y: &mut [f64]) {
        let mut tmp = vec![0.0; self.n];
        self.matvec(x, &mut tmp);
        for i in 0..self.n {
            y[i] = alpha * tmp[i] + beta * y[i];
        }
    }

    /// Returns alpha * A + beta * I with the same band profile.
    pub fn scale_plus_identity(&self, alpha: f64, beta: f64) -> BandMatrix {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= alpha;
        }
        for i in 0..self.n {
            out.add(i, i, beta);
        }
        out
    }

    /// Transpose (bandwidths swap).
    pub fn transpose(&self) -> BandMatrix {
        let mut out = BandMatrix::new(self.n, self.ku, self.kl);
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.kl);
            let j1 = (i + self.ku).min(self.n - 1);
            for j in j0..=j1 {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Conjugation D^{-1} A^T D by a positive diagonal: the discrete adjoint
    /// with respect to the weighted inner product diag(d).
    pub fn weighted_adjoint(&self, d: &[f64]) -> BandMatrix {
        assert_eq!(d.len(), self.n);
        let mut out = self.transpose();
        let w = out.kl + out.ku + 1;
        for i in 0..self.n {
            let j0 = i.saturating_sub(out.kl);
            let j1 = (i + out.ku).min(self.n - 1);
            for j in j0..=j1 {
                out.data[i * w + ((j + out.kl) - i)] *= d[j] / d[i];
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.kl);
            let j1 = (i + self.ku).min(self.n - 1);
            for j in j0..=j1 {
                a[[i, j]] = self.get(i, j);
            }
        }
        a
    }

    /// LU factorization with partial pivoting (LAPACK-style band storage with
    /// kl extra superdiagonals of fill).
    pub fn factorize(&self) -> Result<BandLu> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let w = 2 * kl + ku + 1; // rows of the working band per column
        let diag = kl + ku; // working-band row index of the diagonal
        let mut ab = vec![0.0; n * w];
        // scatter A into the working layout: ab[j*w + (diag + i - j)] = A[i,j]
        for i in 0..n {
            let j0 = i.saturating_sub(kl);
            let j1 = (i + ku).min(n - 1);
            for j in j0..=j1 {
                ab[j * w + (diag + i - j)] = self.get(i, j);
            }
        }
        let mut ipiv = vec![0usize; n];
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            // pivot search in column j, rows j..=j+km
            let mut p = 0usize;
            let mut pmax = ab[j * w + diag].abs();
            for r in 1..=km {
                let v = ab[j * w + diag + r].abs();
                if v > pmax {
                    pmax = v;
                    p = r;
                }
            }
            ipiv[j] = j + p;
            if pmax < f64::MIN_POSITIVE {
                return Err(Error::numerical(format!(
                    "banded LU: zero pivot at column {j} (matrix singular to machine precision)"
                )));
            }
            if p > 0 {
                // swap rows j and j+p across columns j..=min(n-1, j+ku+kl)
                let cmax = (j + ku + kl).min(n - 1);
                for c in j..=cmax {
                    let a_idx = c * w + (diag + j - c);
                    let b_idx = a_idx + p;
                    ab.swap(a_idx, b_idx);
                }
            }
            let piv = ab[j * w + diag];
            let cmax = (j + ku + kl).min(n - 1);
            for r in 1..=km {
                let m = ab[j * w + diag + r] / piv;
                ab[j * w + diag + r] = m;
                if m != 0.0 {
                    for c in (j + 1)..=cmax {
                        let u = ab[c * w + (diag + j - c)];
                        if u != 0.0 {
                            ab[c * w + (diag + j + r - c)] -= m * u;
                        }
                    }
                }
            }
        }
        Ok(BandLu {
            n,
            kl,
            ku,
            ab,
            ipiv,
        })
    }
}

/// Factored band matrix (P A = L U).
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
}

impl BandLu {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Solves A x = b in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let w = 2 * kl + ku + 1;
        let diag = kl + ku;
        // forward: apply P and L
        for j in 0..n {
            let piv = self.ipiv[j];
            if piv != j {
                x.swap(j, piv);
            }
            let km = kl.min(n - 1 - j);
            let xj = x[j];
            if xj != 0.0 {
                for r in 1..=km {
                    x[j + r] -= self.ab[j * w + diag + r] * xj;
                }
            }
        }
        // backward: U x = y, U has bandwidth ku + kl above the diagonal
        for j in (0..n).rev() {
            let cmax = (j + ku + kl).min(n - 1);
            let mut acc = x[j];
            for c in (j + 1)..=cmax {
                acc -= self.ab[c * w + (diag + j - c)] * x[c];
            }
            x[j] = acc / self.ab[j * w + diag];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Banded system bordered by `m` dense columns/rows:
///
/// ```text
/// [ A  U ] [x]   [f]
/// [ V  D ] [y] = [g]
/// ```
///
/// Solved by block elimination through the band factorization of `A`, with
/// iterative refinement against the full system to absorb the loss of
/// accuracy when `A` is nearly singular (the usual case here: `A` has a
/// translation quasi-kernel and the borders restore invertibility).
pub struct Bordered<'a> {
    a: &'a BandMatrix,
    lu: BandLu,
    cols: &'a [Vec<f64>],
    rows: &'a [Vec<f64>],
    corner: &'a Array2<f64>,
    /// A^{-1} U
    ycols: Vec<Vec<f64>>,
    /// factored capacitance matrix D - V A^{-1} U
    cap: DenseLu,
}

impl<'a> Bordered<'a> {
    pub fn new(
        a: &'a BandMatrix,
        cols: &'a [Vec<f64>],
        rows: &'a [Vec<f64>],
        corner: &'a Array2<f64>,
    ) -> Result<Self> {
        let m = cols.len();
        assert_eq!(rows.len(), m);
        assert_eq!(corner.shape(), [m, m]);
        let lu = a.factorize()?;
        let ycols: Vec<Vec<f64>> = cols.iter().map(|c| lu.solve(c)).collect();
        let mut cap = Array2::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                let viy: f64 = rows[i].iter().zip(&ycols[j]).map(|(a, b)| a * b).sum();
                cap[[i, j]] = corner[[i, j]] - viy;
            }
        }
        let cap = DenseLu::new(cap)?;
        Ok(Bordered {
            a,
            lu,
            cols,
            rows,
            corner,
            ycols,
            cap,
        })
    }

    fn solve_once(&self, f: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.cols.len();
        let af = self.lu.solve(f);
        let mut rhs = vec![0.0; m];
        for i in 0..m {
            let vaf: f64 = self.rows[i].iter().zip(&af).map(|(a, b)| a * b).sum();
            rhs[i] = g[i] - vaf;
        }
        let y = self.cap.solve(&rhs);
        let mut x = af;
        for j in 0..m {
            for (xi, yc) in x.iter_mut().zip(&self.ycols[j]) {
                *xi -= y[j] * yc;
            }
        }
        (x, y)
    }

    /// Solves the bordered system with `refine` rounds of iterative
    /// refinement using the unfactored operators.
    pub fn solve(&self, f: &[f64], g: &[f64], refine: usize) -> (Vec<f64>, Vec<f64>) {
        let m = self.cols.len();
        let n = f.len();
        let (mut x, mut y) = self.solve_once(f, g);
        for _ in 0..refine {
            // residuals of the full system
            let mut r1 = vec![0.0; n];
            self.a.matvec(&x, &mut r1);
            for j in 0..m {
                for (r, c) in r1.iter_mut().zip(&self.cols[j]) {
                    *r += y[j] * c;
                }
            }
            for (r, fv) in r1.iter_mut().zip(f) {
                *r = fv - *r;
            }
            let mut r2 = vec![0.0; m];
            for i in 0..m {
                let vx: f64 = self.rows[i].iter().zip(&x).map(|(a, b)| a * b).sum();
                let dy: f64 = (0..m).map(|j| self.corner[[i, j]] * y[j]).sum();
                r2[i] = g[i] - vx - dy;
            }
            let (dx, dy) = self.solve_once(&r1, &r2);
            for (xi, d) in x.iter_mut().zip(&dx) {
                *xi += d;
            }
            for (yi, d) in y.iter_mut().zip(&dy) {
                *yi += d;
            }
        }
        (x, y)
    }
}

/// Small dense LU with partial pivoting for capacitance systems (m ≤ 4 here,
/// so no BLAS needed).
pub struct DenseLu {
    n: usize,
    a: Array2<f64>,
    ipiv: Vec<usize>,
}

impl DenseLu {
    pub fn new(mut a: Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(a.ncols(), n);
        let mut ipiv = vec![0usize; n];
        for k in 0..n {
            let mut p = k;
            let mut pmax = a[[k, k]].abs();
            for r in (k + 1)..n {
                if a[[r, k]].abs() > pmax {
                    pmax = a[[r, k]].abs();
                    p = r;
                }
            }
            ipiv[k] = p;
            if pmax < f64::MIN_POSITIVE {
                return Err(Error::numerical(
                    "dense LU: singular capacitance matrix in bordered solve",
                ));
            }
            if p != k {
                for c in 0..n {
                    let t = a[[k, c]];
                    a[[k, c]] = a[[p, c]];
                    a[[p, c]] = t;
                }
            }
            for r in (k + 1)..n {
                let m = a[[r, k]] / a[[k, k]];
                a[[r, k]] = m;
                for c in (k + 1)..n {
                    let t = m * a[[k, c]];
                    a[[r, c]] -= t;
                }
            }
        }
        Ok(DenseLu { n, a, ipiv })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for k in 0..n {
            let p = self.ipiv[k];
            if p != k {
                x.swap(k, p);
            }
            for r in (k + 1)..n {
                x[r] -= self.a[[r, k]] * x[k];
            }
        }
        for k in (0..n).rev() {
            let mut acc = x[k];
            for c in (k + 1)..n {
                acc -= self.a[[k, c]] * x[c];
            }
            x[k] = acc / self.a[[k, k]];
        }
        x
    }
}
