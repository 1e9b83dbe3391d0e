//! Uniform grids in one or two dimensions and the fields that live on them.
//!
//! Periodic grids sample the torus `[0, L)^d` at the nodes `k h`. Neumann
//! grids sample the box `(0, L)^d` at cell centres `(k + 1/2) h` and close
//! every stencil with zero boundary flux. In two dimensions the flat index of
//! point `(ix, iy)` is `iy * n + ix`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Boundary {
    Periodic,
    Neumann,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    dim: usize,
    n: usize,
    length: f64,
    boundary: Boundary,
}

impl Grid {
    pub fn new(dim: usize, n: usize, length: f64, boundary: Boundary) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(invalid(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if n < 4 {
            return Err(invalid(format!("grid needs at least 4 points per axis, got {n}")));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(invalid(format!("grid length must be positive, got {length}")));
        }
        Ok(Self {
            dim,
            n,
            length,
            boundary,
        })
    }

    /// Periodic grid of period 1.
    pub fn torus(dim: usize, n: usize) -> Result<Self> {
        Self::new(dim, n, 1.0, Boundary::Periodic)
    }

    /// Cell-centred grid on `(0, 1)^d` with no-flux boundaries.
    pub fn unit_box(dim: usize, n: usize) -> Result<Self> {
        Self::new(dim, n, 1.0, Boundary::Neumann)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn is_periodic(&self) -> bool {
        self.boundary == Boundary::Periodic
    }

    pub fn cell_size(&self) -> f64 {
        self.length / self.n as f64
    }

    /// `h^d`
    pub fn cell_volume(&self) -> f64 {
        self.cell_size().powi(self.dim as i32)
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Per-axis indices of a flat index; the second entry is 0 in 1D.
    pub fn axis_indices(&self, p: usize) -> [usize; 2] {
        if self.dim == 1 {
            [p, 0]
        } else {
            [p % self.n, p / self.n]
        }
    }

    pub fn flat_index(&self, idx: [usize; 2]) -> usize {
        if self.dim == 1 {
            idx[0]
        } else {
            idx[1] * self.n + idx[0]
        }
    }

    /// Coordinate of index `k` along an axis.
    pub fn axis_coordinate(&self, k: usize) -> f64 {
        let h = self.cell_size();
        match self.boundary {
            Boundary::Periodic => k as f64 * h,
            Boundary::Neumann => (k as f64 + 0.5) * h,
        }
    }

    /// Coordinates of a flat index; the second entry is 0 in 1D.
    pub fn point(&self, p: usize) -> [f64; 2] {
        let [ix, iy] = self.axis_indices(p);
        if self.dim == 1 {
            [self.axis_coordinate(ix), 0.0]
        } else {
            [self.axis_coordinate(ix), self.axis_coordinate(iy)]
        }
    }

    /// Neighbour of `p` along `axis` shifted by `offset`, wrapping periodically.
    pub fn neighbour(&self, p: usize, axis: usize, offset: isize) -> usize {
        let mut idx = self.axis_indices(p);
        let n = self.n as isize;
        idx[axis] = (idx[axis] as isize + offset).rem_euclid(n) as usize;
        self.flat_index(idx)
    }

    /// Whether the face between `p` and its `+1` neighbour along `axis` is a
    /// boundary face (always false on periodic grids).
    pub fn is_boundary_face(&self, p: usize, axis: usize) -> bool {
        self.boundary == Boundary::Neumann && self.axis_indices(p)[axis] == self.n - 1
    }

    /// Flat index of `p` shifted by the per-axis offset `s` (periodic wrap).
    pub fn shifted(&self, p: usize, s: [isize; 2]) -> usize {
        let mut q = self.neighbour(p, 0, s[0]);
        if self.dim == 2 {
            q = self.neighbour(q, 1, s[1]);
        }
        q
    }

    /// Per-axis offsets of index `p` read as a signed displacement in `(-n/2, n/2]`.
    pub fn signed_offset(&self, p: usize) -> [isize; 2] {
        let idx = self.axis_indices(p);
        let n = self.n as isize;
        let wrap = |k: usize| {
            let k = k as isize;
            if k > n / 2 {
                k - n
            } else {
                k
            }
        };
        if self.dim == 1 {
            [wrap(idx[0]), 0]
        } else {
            [wrap(idx[0]), wrap(idx[1])]
        }
    }

    fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "field needs {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at index {k}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    /// Samples `f` at every grid point.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.len()).map(|p| f(grid.point(p))).collect();
        Self { grid, values }
    }

    /// Value `1/h^d` at flat index `p`, zero elsewhere; integrates to 1.
    pub fn delta(grid: Grid, p: usize) -> Self {
        let mut f = Self::zeros(grid);
        f.values[p] = 1.0 / grid.cell_volume();
        f
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field::from_raw(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.grid.check_same(&other.grid)?;
        Ok(Field::from_raw(
            self.grid,
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn scaled(&self, c: f64) -> Field {
        self.map(|v| c * v)
    }

    /// Translation `(τ_s f)(x) = f(x − s h)`.
    pub fn translated(&self, s: [isize; 2]) -> Field {
        let g = self.grid;
        let mut out = vec![0.0; g.len()];
        for (p, slot) in out.iter_mut().enumerate() {
            *slot = self.values[g.shifted(p, [-s[0], -s[1]])];
        }
        Field::from_raw(g, out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.grid.dim == 1 {
            w.write_record(["x", "value"])?;
        } else {
            w.write_record(["x", "y", "value"])?;
        }
        for (p, v) in self.values.iter().enumerate() {
            let [x, y] = self.grid.point(p);
            if self.grid.dim == 1 {
                w.write_record([format!("{x:e}"), format!("{v:e}")])?;
            } else {
                w.write_record([format!("{x:e}"), format!("{y:e}"), format!("{v:e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Header line `dim N L boundary`, then `N^dim` little-endian `f64` values.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let b = match self.grid.boundary {
            Boundary::Periodic => "periodic",
            Boundary::Neumann => "neumann",
        };
        writeln!(w, "{} {} {:e} {}", self.grid.dim, self.grid.n, self.grid.length, b)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Field> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() < 3 {
            return Err(invalid(format!("malformed field header: {header:?}")));
        }
        let parse_err = |what: &str| invalid(format!("malformed field header ({what}): {header:?}"));
        let dim: usize = parts[0].parse().map_err(|_| parse_err("dim"))?;
        let n: usize = parts[1].parse().map_err(|_| parse_err("N"))?;
        let length: f64 = parts[2].parse().map_err(|_| parse_err("L"))?;
        let boundary = match parts.get(3).copied() {
            None | Some("periodic") => Boundary::Periodic,
            Some("neumann") => Boundary::Neumann,
            Some(_) => return Err(parse_err("boundary")),
        };
        let grid = Grid::new(dim, n, length, boundary)?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * grid.len() {
            return Err(invalid(format!(
                "field body has {} bytes, expected {}",
                bytes.len(),
                8 * grid.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Field::new(grid, values)
    }
}

/// `h^d Σ f`
pub fn integrate(f: &Field) -> f64 {
    f.grid.cell_volume() * f.values.iter().sum::<f64>()
}

/// `h^d Σ f g`
pub fn inner(f: &Field, g: &Field) -> Result<f64> {
    f.grid.check_same(&g.grid)?;
    Ok(f.grid.cell_volume() * f.values.iter().zip(&g.values).map(|(a, b)| a * b).sum::<f64>())
}

/// Discrete `L²` norm.
pub fn l2_norm(f: &Field) -> f64 {
    inner(f, f).expect("same grid").sqrt()
}

/// Centred second-difference Laplacian; zero-flux closure on Neumann grids.
pub fn laplacian(f: &Field) -> Field {
    let g = f.grid;
    let h2 = g.cell_size() * g.cell_size();
    let mut out = vec![0.0; g.len()];
    for axis in 0..g.dim {
        for p in 0..g.len() {
            if g.is_boundary_face(p, axis) {
                continue;
            }
            let q = g.neighbour(p, axis, 1);
            let flux = (f.values[q] - f.values[p]) / h2;
            out[p] += flux;
            out[q] -= flux;
        }
    }
    Field::from_raw(g, out)
}

/// Conservative `div(Σ_j c_j ∇g_j)`: coefficients averaged arithmetically to
/// faces, gradients by two-point differences, zero flux through Neumann walls.
pub fn flux_divergence(coeffs: &[Field], targets: &[Field]) -> Result<Field> {
    if coeffs.len() != targets.len() || coeffs.is_empty() {
        return Err(invalid("flux_divergence needs matching nonempty coefficient and target lists"));
    }
    let g = coeffs[0].grid;
    for f in coeffs.iter().chain(targets) {
        g.check_same(&f.grid)?;
    }
    let h2 = g.cell_size() * g.cell_size();
    let mut out = vec![0.0; g.len()];
    for axis in 0..g.dim {
        for p in 0..g.len() {
            if g.is_boundary_face(p, axis) {
                continue;
            }
            let q = g.neighbour(p, axis, 1);
            let flux: f64 = coeffs
                .iter()
                .zip(targets)
                .map(|(c, t)| 0.5 * (c.values[p] + c.values[q]) * (t.values[q] - t.values[p]))
                .sum::<f64>()
                / h2;
            out[p] += flux;
            out[q] -= flux;
        }
    }
    Ok(Field::from_raw(g, out))
}

/// Centred-difference gradient component along `axis`; mirrored ghost values
/// at Neumann walls.
pub fn centred_gradient(f: &Field, axis: usize) -> Field {
    let g = f.grid;
    let h = g.cell_size();
    let n = g.n;
    let out = (0..g.len())
        .map(|p| {
            let k = g.axis_indices(p)[axis];
            let (plus, minus) = match g.boundary {
                Boundary::Periodic => (g.neighbour(p, axis, 1), g.neighbour(p, axis, -1)),
                Boundary::Neumann => (
                    if k + 1 == n { p } else { g.neighbour(p, axis, 1) },
                    if k == 0 { p } else { g.neighbour(p, axis, -1) },
                ),
            };
            (f.values[plus] - f.values[minus]) / (2.0 * h)
        })
        .collect();
    Field::from_raw(g, out)
}

/// `|∇f|²` from centred differences.
pub fn gradient_norm_squared(f: &Field) -> Field {
    let mut out = vec![0.0; f.len()];
    for axis in 0..f.grid.dim {
        let d = centred_gradient(f, axis);
        for (o, v) in out.iter_mut().zip(d.values()) {
            *o += v * v;
        }
    }
    Field::from_raw(f.grid, out)
}

/// `(f ⋆ k)(x) = h^d Σ_y k(y) f(x − y)` on a periodic grid; `k` holds density
/// values (a normalised kernel integrates to 1).
pub fn circular_convolve(f: &Field, k: &Field) -> Result<Field> {
    f.grid.check_same(&k.grid)?;
    if !f.grid.is_periodic() {
        return Err(Error::Unsupported("circular convolution needs a periodic grid".into()));
    }
    let g = f.grid;
    let w = g.cell_volume();
    let support: Vec<(usize, f64)> = k
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(p, v)| (p, w * v))
        .collect();
    let offsets: Vec<([isize; 2], f64)> = support
        .iter()
        .map(|&(p, wv)| {
            let [ix, iy] = g.axis_indices(p);
            ([-(ix as isize), -(iy as isize)], wv)
        })
        .collect();
    let out = (0..g.len())
        .map(|p| offsets.iter().map(|&(s, wv)| wv * f.values[g.shifted(p, s)]).sum())
        .collect();
    Ok(Field::from_raw(g, out))
}

/// `ǩ(y) = k(−y)` by index reversal modulo `N` on each axis.
pub fn reflect(k: &Field) -> Field {
    let g = k.grid;
    let n = g.n;
    let out = (0..g.len())
        .map(|p| {
            let [ix, iy] = g.axis_indices(p);
            let q = g.flat_index([(n - ix) % n, (n - iy) % n]);
            k.values[q]
        })
        .collect();
    Field::from_raw(g, out)
}
