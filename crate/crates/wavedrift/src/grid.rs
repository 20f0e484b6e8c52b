//! Uniform 1-D grid on `[-L, L]` and multi-component fields living on it.
//!
//! Conventions used throughout the crate:
//! * trapezoid quadrature defines every inner product and norm;
//! * first derivatives are 2nd-order central with one-sided 2nd-order
//!   closures at the ends;
//! * second derivatives are 2nd-order central with a homogeneous-Neumann
//!   ghost-point closure (profiles are flat at the truncated ends);
//! * lateral translation `T_γ u (ξ) = u(ξ - γ)` is evaluated by cubic
//!   Catmull–Rom interpolation with constant extension outside the window.

use crate::{Error, Result};
use ndarray::{Array2, ArrayView1, ArrayViewMut1};
use std::io::{BufRead, Write};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct Grid {
    half_length: f64,
    points: usize,
    spacing: f64,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.half_length == other.half_length && self.points == other.points
    }
}

impl Grid {
    pub fn new(half_length: f64, points: usize) -> Result<Arc<Grid>> {
        if !(half_length.is_finite() && half_length > 0.0) {
            return Err(Error::validation(format!(
                "grid half_length must be positive and finite, got {half_length}"
            )));
        }
        if points < 16 {
            return Err(Error::validation(format!(
                "grid needs at least 16 points, got {points}"
            )));
        }
        let spacing = 2.0 * half_length / (points - 1) as f64;
        Ok(Arc::new(Grid {
            half_length,
            points,
            spacing,
        }))
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn node(&self, k: usize) -> f64 {
        -self.half_length + k as f64 * self.spacing
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.points).map(|k| self.node(k)).collect()
    }

    /// Trapezoid weight of node `k`.
    pub fn quad_weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.points - 1 {
            0.5 * self.spacing
        } else {
            self.spacing
        }
    }

    /// Trapezoid weights replicated for an interleaved `n_comp`-component
    /// vector (node-major layout, component fastest).
    pub fn weights_interleaved(&self, n_comp: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.points * n_comp);
        for k in 0..self.points {
            for _ in 0..n_comp {
                w.push(self.quad_weight(k));
            }
        }
        w
    }
}

/// An `n_comp`-component field sampled on a [`Grid`].
#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<Grid>,
    /// shape (n_comp, points); each component row is contiguous
    values: Array2<f64>,
}

impl Field {
    pub fn zeros(grid: Arc<Grid>, n_comp: usize) -> Field {
        assert!(n_comp >= 1, "field needs at least one component");
        let values = Array2::zeros((n_comp, grid.points()));
        Field { grid, values }
    }

    /// Builds a field by evaluating `f(component, xi)` at every node.
    pub fn from_fn(grid: Arc<Grid>, n_comp: usize, mut f: impl FnMut(usize, f64) -> f64) -> Field {
        let mut field = Field::zeros(grid, n_comp);
        let g = field.grid.clone();
        for c in 0..n_comp {
            let row = field.component_mut_slice(c);
            for (k, v) in row.iter_mut().enumerate() {
                *v = f(c, g.node(k));
            }
        }
        field
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn n_comp(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn component(&self, c: usize) -> ArrayView1<'_, f64> {
        self.values.row(c)
    }

    pub fn component_mut(&mut self, c: usize) -> ArrayViewMut1<'_, f64> {
        self.values.row_mut(c)
    }

    pub fn component_slice(&self, c: usize) -> &[f64] {
        self.values.row(c).to_slice().expect("component row is contiguous")
    }

    pub fn component_mut_slice(&mut self, c: usize) -> &mut [f64] {
        self.values
            .row_mut(c)
            .into_slice()
            .expect("component row is contiguous")
    }

    fn check_same_layout(&self, other: &Field, what: &str) -> Result<()> {
        if self.grid.as_ref() != other.grid.as_ref() {
            return Err(Error::validation(format!(
                "{what}: grids differ (L={} N={} vs L={} N={})",
                self.grid.half_length(),
                self.grid.points(),
                other.grid.half_length(),
                other.grid.points()
            )));
        }
        if self.n_comp() != other.n_comp() {
            return Err(Error::validation(format!(
                "{what}: component counts differ ({} vs {})",
                self.n_comp(),
                other.n_comp()
            )));
        }
        Ok(())
    }

    /// Trapezoid L² inner product, summed over components.
    pub fn inner(&self, other: &Field) -> Result<f64> {
        self.check_same_layout(other, "inner product")?;
        let h = self.grid.spacing();
        let n = self.grid.points();
        let mut acc = 0.0;
        for c in 0..self.n_comp() {
            let a = self.component_slice(c);
            let b = other.component_slice(c);
            let mut dot = 0.0;
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
            }
            acc += h * dot - 0.5 * h * (a[0] * b[0] + a[n - 1] * b[n - 1]);
        }
        Ok(acc)
    }

    pub fn norm_l2_sq(&self) -> f64 {
        self.inner(self).expect("self inner product")
    }

    pub fn norm_l2(&self) -> f64 {
        self.norm_l2_sq().sqrt()
    }

    /// `‖u‖² + ‖∂_ξ u‖²` with the discrete first derivative.
    pub fn h1_norm_sq(&self) -> f64 {
        self.norm_l2_sq() + self.diff1().norm_l2_sq()
    }

    pub fn norm_linf(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// 2nd-order first derivative: central interior, one-sided at the ends.
    pub fn diff1(&self) -> Field {
        let n = self.grid.points();
        let h = self.grid.spacing();
        let mut out = Field::zeros(self.grid.clone(), self.n_comp());
        for c in 0..self.n_comp() {
            let v = self.component_slice(c);
            let d = out.component_mut_slice(c);
            d[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
            for k in 1..n - 1 {
                d[k] = (v[k + 1] - v[k - 1]) / (2.0 * h);
            }
            d[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h);
        }
        out
    }

    /// 2nd-order second derivative: central interior, homogeneous-Neumann
    /// ghost points at the ends.
    pub fn diff2(&self) -> Field {
        let n = self.grid.points();
        let h2 = self.grid.spacing() * self.grid.spacing();
        let mut out = Field::zeros(self.grid.clone(), self.n_comp());
        for c in 0..self.n_comp() {
            let v = self.component_slice(c);
            let d = out.component_mut_slice(c);
            d[0] = 2.0 * (v[1] - v[0]) / h2;
            for k in 1..n - 1 {
                d[k] = (v[k + 1] - 2.0 * v[k] + v[k - 1]) / h2;
            }
            d[n - 1] = 2.0 * (v[n - 2] - v[n - 1]) / h2;
        }
        out
    }

    /// Lateral translation `(T_γ u)(ξ) = u(ξ - γ)` by cubic Catmull–Rom
    /// interpolation, extending each end constantly.
    ///
    /// Errors when `|γ| ≥ L` (the window would no longer overlap itself);
    /// warns when `|γ| > L/2`.
    pub fn shift(&self, gamma: f64) -> Result<Field> {
        let l = self.grid.half_length();
        if !gamma.is_finite() || gamma.abs() >= l {
            return Err(Error::validation(format!(
                "shift amount {gamma} out of range for window half-length {l}"
            )));
        }
        if gamma.abs() > 0.5 * l {
            log::warn!("shift by {gamma} exceeds half the window half-length {l}; interpolation leans on constant extension");
        }
        let n = self.grid.points();
        let s = gamma / self.grid.spacing();
        let mut out = Field::zeros(self.grid.clone(), self.n_comp());
        for c in 0..self.n_comp() {
            let v = self.component_slice(c);
            let d = out.component_mut_slice(c);
            let at = |i: isize| -> f64 { v[i.clamp(0, (n - 1) as isize) as usize] };
            for (k, dst) in d.iter_mut().enumerate() {
                let f = k as f64 - s;
                let i1 = f.floor();
                let t = f - i1;
                let i1 = i1 as isize;
                if t == 0.0 {
                    *dst = at(i1);
                    continue;
                }
                let p0 = at(i1 - 1);
                let p1 = at(i1);
                let p2 = at(i1 + 1);
                let p3 = at(i1 + 2);
                *dst = 0.5
                    * (2.0 * p1
                        + (p2 - p0) * t
                        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
                        + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t * t * t);
            }
        }
        Ok(out)
    }

    /// self += a * other
    pub fn axpy(&mut self, a: f64, other: &Field) -> Result<()> {
        self.check_same_layout(other, "axpy")?;
        for (x, y) in self.values.iter_mut().zip(other.values.iter()) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for x in self.values.iter_mut() {
            *x *= a;
        }
    }

    /// Pointwise map applied to every entry.
    pub fn mapv_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for x in self.values.iter_mut() {
            *x = f(*x);
        }
    }

    /// Flattens to a node-major interleaved vector `x[k*n_comp + c]`,
    /// the layout used by banded operator assembly.
    pub fn to_interleaved(&self) -> Vec<f64> {
        let n = self.grid.points();
        let nc = self.n_comp();
        let mut x = vec![0.0; n * nc];
        for c in 0..nc {
            let row = self.component_slice(c);
            for k in 0..n {
                x[k * nc + c] = row[k];
            }
        }
        x
    }

    pub fn from_interleaved(grid: Arc<Grid>, n_comp: usize, x: &[f64]) -> Field {
        assert_eq!(x.len(), grid.points() * n_comp);
        let mut f = Field::zeros(grid, n_comp);
        let n = f.grid.points();
        for c in 0..n_comp {
            let row = f.component_mut_slice(c);
            for k in 0..n {
                row[k] = x[k * n_comp + c];
            }
        }
        f
    }

    /// Writes `xi,c1,...,cn` with 17 significant digits (lossless for f64).
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let nc = self.n_comp();
        write!(w, "xi")?;
        for c in 1..=nc {
            write!(w, ",c{c}")?;
        }
        writeln!(w)?;
        for k in 0..self.grid.points() {
            write!(w, "{:.16e}", self.grid.node(k))?;
            for c in 0..nc {
                write!(w, ",{:.16e}", self.values[[c, k]])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads a field written by [`Field::write_csv`], reconstructing the grid
    /// from the `xi` column (which must be uniform).
    pub fn read_csv(r: impl BufRead) -> Result<Field> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::validation("field csv: empty file"))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"xi") || cols.len() < 2 {
            return Err(Error::validation(format!(
                "field csv: bad header {header:?}, expected xi,c1,..."
            )));
        }
        let n_comp = cols.len() - 1;
        let mut xi = Vec::new();
        let mut data: Vec<Vec<f64>> = vec![Vec::new(); n_comp];
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.trim().split(',').collect();
            if parts.len() != n_comp + 1 {
                return Err(Error::validation(format!(
                    "field csv line {}: expected {} columns, got {}",
                    lineno + 2,
                    n_comp + 1,
                    parts.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::validation(format!("field csv line {}: {e}", lineno + 2)))
            };
            xi.push(parse(parts[0])?);
            for c in 0..n_comp {
                data[c].push(parse(parts[c + 1])?);
            }
        }
        let n = xi.len();
        if n < 16 {
            return Err(Error::validation(format!(
                "field csv: {n} rows, need at least 16"
            )));
        }
        let h = (xi[n - 1] - xi[0]) / (n - 1) as f64;
        for k in 1..n {
            if ((xi[k] - xi[k - 1]) - h).abs() > 1e-9 * h.abs().max(1.0) {
                return Err(Error::validation("field csv: xi column is not uniform"));
            }
        }
        let half = 0.5 * (xi[n - 1] - xi[0]);
        if (xi[0] + half).abs() > 1e-9 * half {
            return Err(Error::validation(
                "field csv: xi column is not centered on zero",
            ));
        }
        let grid = Grid::new(half, n)?;
        let mut f = Field::zeros(grid, n_comp);
        for c in 0..n_comp {
            f.component_mut_slice(c).copy_from_slice(&data[c]);
        }
        Ok(f)
    }
}
