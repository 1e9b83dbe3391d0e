//! Implicit steps `(I − dt·div F + dt·diag(s)) x = b` for conservative
//! face-flux operators `F_f = a_f x_R − b_f x_L` with `a_f, b_f ≥ 0`.
//!
//! The matrix has nonpositive off-diagonals and every column sums to
//! `1 + dt·s_k`, so it is a column diagonally dominant M-matrix. One
//! dimensional systems are solved by cyclic tridiagonal elimination that
//! tracks column sums instead of subtracting, so a nonnegative right-hand side
//! yields a nonnegative solution in floating point. Two dimensional systems
//! use Jacobi-preconditioned BiCGSTAB.

use crate::error::{invalid, Error, Result};
use crate::grid::{Field, Grid};

pub const SOLVE_TOLERANCE: f64 = 1e-12;
const MAX_ITERATIONS: usize = 5000;

/// Face coefficients of a conservative flux, indexed per axis by the cell on
/// the lower side of the face.
#[derive(Clone, Debug)]
pub struct FluxOperator {
    grid: Grid,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl FluxOperator {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            a: vec![vec![0.0; grid.len()]; grid.dim()],
            b: vec![vec![0.0; grid.len()]; grid.dim()],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Sets the face between `p` and its `+1` neighbour along `axis`;
    /// boundary faces of Neumann grids stay closed.
    pub fn set_face(&mut self, axis: usize, p: usize, a: f64, b: f64) {
        debug_assert!(a >= 0.0 && b >= 0.0, "face coefficients must be nonnegative");
        if self.grid.is_boundary_face(p, axis) {
            return;
        }
        self.a[axis][p] = a;
        self.b[axis][p] = b;
    }

    pub fn face(&self, axis: usize, p: usize) -> (f64, f64) {
        (self.a[axis][p], self.b[axis][p])
    }

    /// Operator for `Δ(c x)` with face flux `(c_R x_R − c_L x_L)/h`.
    pub fn laplace_form(c: &Field) -> Self {
        let g = *c.grid();
        let h = g.cell_size();
        let mut op = Self::zeros(g);
        for axis in 0..g.dim() {
            for p in 0..g.len() {
                let q = g.neighbour(p, axis, 1);
                op.set_face(axis, p, c.values()[q] / h, c.values()[p] / h);
            }
        }
        op
    }

    /// `div F(x)`
    pub fn divergence(&self, x: &[f64]) -> Vec<f64> {
        let g = self.grid;
        let h = g.cell_size();
        let mut out = vec![0.0; g.len()];
        for axis in 0..g.dim() {
            for p in 0..g.len() {
                if g.is_boundary_face(p, axis) {
                    continue;
                }
                let q = g.neighbour(p, axis, 1);
                let flux = (self.a[axis][p] * x[q] - self.b[axis][p] * x[p]) / h;
                out[p] += flux;
                out[q] -= flux;
            }
        }
        out
    }

    /// Solves `(I − dt·div F + dt·diag(sink)) x = rhs`.
    pub fn solve_implicit(&self, dt: f64, sink: Option<&[f64]>, rhs: &[f64]) -> Result<Vec<f64>> {
        if !(dt > 0.0) {
            return Err(invalid(format!("time step must be positive, got {dt}")));
        }
        let g = self.grid;
        if rhs.len() != g.len() || sink.is_some_and(|s| s.len() != g.len()) {
            return Err(Error::GridMismatch);
        }
        let excess: Vec<f64> = match sink {
            Some(s) => s.iter().map(|v| 1.0 + dt * v).collect(),
            None => vec![1.0; g.len()],
        };
        let x = if g.dim() == 1 {
            self.solve_cyclic(dt, &excess, rhs)
        } else {
            self.solve_krylov(dt, &excess, rhs)?
        };
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("linear solve produced a non-finite value at {k}")));
        }
        Ok(x)
    }

    fn solve_cyclic(&self, dt: f64, excess: &[f64], rhs: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        let r = dt / self.grid.cell_size();
        let (a, b) = (&self.a[0], &self.b[0]);
        // Off-diagonal magnitudes: row k couples to k+1 through face k (a_k)
        // and to k−1 through face k−1 (b_{k−1}).
        let sup = |k: usize| r * a[k];
        let sub = |k: usize| r * b[(k + n - 1) % n];
        let mut s = excess.to_vec();
        let mut x = rhs.to_vec();
        // up[k] = |M(k,k+1)|, lo[k] = |M(k+1,k)| for k ≤ n−3; lc[k] = |M(k,n−1)|,
        // lr[k] = |M(n−1,k)| for k ≤ n−2.
        let mut up = vec![0.0; n];
        let mut lo = vec![0.0; n];
        let mut lc = vec![0.0; n];
        let mut lr = vec![0.0; n];
        for k in 0..n.saturating_sub(2) {
            up[k] = sup(k);
            lo[k] = sub(k + 1);
        }
        lc[n - 2] = sup(n - 2);
        lr[n - 2] = sub(n - 1);
        lc[0] += sub(0);
        lr[0] += sup(n - 1);
        let mut pivot = vec![0.0; n];
        for k in 0..n - 1 {
            if k + 2 < n {
                let d = s[k] + lo[k] + lr[k];
                lc[k + 1] += lo[k] * lc[k] / d;
                lr[k + 1] += lr[k] * up[k] / d;
                s[k + 1] += s[k] * up[k] / d;
                s[n - 1] += s[k] * lc[k] / d;
                x[k + 1] += lo[k] * x[k] / d;
                x[n - 1] += lr[k] * x[k] / d;
                pivot[k] = d;
            } else {
                let d = s[k] + lr[k];
                s[n - 1] += s[k] * lc[k] / d;
                x[n - 1] += lr[k] * x[k] / d;
                pivot[k] = d;
            }
        }
        x[n - 1] /= s[n - 1];
        let last = x[n - 1];
        for k in (0..n - 1).rev() {
            let upper = if k + 2 < n { up[k] * x[k + 1] } else { 0.0 };
            x[k] = (x[k] + upper + lc[k] * last) / pivot[k];
        }
        x
    }

    fn assemble_csr(&self, dt: f64, excess: &[f64]) -> CsrMatrix {
        let g = self.grid;
        let r = dt / g.cell_size();
        let len = g.len();
        let mut diag = excess.to_vec();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(5); len];
        for axis in 0..g.dim() {
            for p in 0..len {
                let (a, b) = (self.a[axis][p], self.b[axis][p]);
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                let q = g.neighbour(p, axis, 1);
                // Flux leaves p with weight b on x_p and enters with a on x_q.
                rows[p].push((q, -r * a));
                rows[q].push((p, -r * b));
                diag[p] += r * b;
                diag[q] += r * a;
            }
        }
        let mut indptr = Vec::with_capacity(len + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for (p, row) in rows.into_iter().enumerate() {
            indices.push(p);
            data.push(diag[p]);
            for (q, v) in row {
                indices.push(q);
                data.push(v);
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            indptr,
            indices,
            data,
            diag,
        }
    }

    fn solve_krylov(&self, dt: f64, excess: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
        let m = self.assemble_csr(dt, excess);
        bicgstab(&m, rhs, SOLVE_TOLERANCE)
    }
}

struct CsrMatrix {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
    diag: Vec<f64>,
}

impl CsrMatrix {
    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (p, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.indptr[p]..self.indptr[p + 1] {
                acc += self.data[k] * x[self.indices[k]];
            }
            *o = acc;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn bicgstab(m: &CsrMatrix, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let precond = |v: &[f64], out: &mut [f64]| {
        for ((o, x), d) in out.iter_mut().zip(v).zip(&m.diag) {
            *o = x / d;
        }
    };
    let mut x: Vec<f64> = b.iter().zip(&m.diag).map(|(v, d)| v / d).collect();
    let mut r = vec![0.0; n];
    m.mul(&x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut residual = norm(&r) / bnorm;
    for it in 0..MAX_ITERATIONS {
        if residual <= tol {
            return Ok(x);
        }
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return Err(Error::SolveFailed {
                residual,
                iterations: it,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for k in 0..n {
            p[k] = r[k] + beta * (p[k] - omega * v[k]);
        }
        precond(&p, &mut phat);
        m.mul(&phat, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for k in 0..n {
            s[k] = r[k] - alpha * v[k];
        }
        if norm(&s) / bnorm <= tol {
            for k in 0..n {
                x[k] += alpha * phat[k];
            }
            return Ok(x);
        }
        precond(&s, &mut shat);
        m.mul(&shat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt == 0.0 { 0.0 } else { dot(&t, &s) / tt };
        for k in 0..n {
            x[k] += alpha * phat[k] + omega * shat[k];
            r[k] = s[k] - omega * t[k];
        }
        residual = norm(&r) / bnorm;
    }
    // Guard against drift of the recursive residual.
    m.mul(&x, &mut t);
    let true_res = norm(&t.iter().zip(b).map(|(a, c)| c - a).collect::<Vec<_>>()) / bnorm;
    if true_res <= tol {
        Ok(x)
    } else {
        Err(Error::SolveFailed {
            residual: true_res,
            iterations: MAX_ITERATIONS,
        })
    }
}
