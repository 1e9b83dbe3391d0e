//! Convolution mollifiers on the torus and multi-argument interaction kernels
//! on bounded boxes.

use crate::error::{invalid, Error, Result};
use crate::grid::{self, Field, Grid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MollifierShape {
    /// `(1 − s²)³` on `s = |y|/r < 1`
    Bump,
    /// Periodised Gaussian with `σ = r/4.5`.
    Gaussian,
    /// Cell-averaged indicator of `|y| ≤ r`.
    UniformCap,
    /// User-supplied sampled kernel.
    Custom,
}

impl MollifierShape {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Bump => "bump",
            Self::Gaussian => "gaussian",
            Self::UniformCap => "uniform-cap",
            Self::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bump" | "smooth-bump" => Some(Self::Bump),
            "gaussian" | "gaussian-periodised" => Some(Self::Gaussian),
            "uniform-cap" | "uniform" => Some(Self::UniformCap),
            _ => None,
        }
    }
}

const GAUSSIAN_RADII: f64 = 4.5;

/// `b(q) = (1 − q)³` for `q < 1`, with `q = s²`.
#[inline]
fn bump_q(q: f64) -> f64 {
    if q < 1.0 {
        let t = 1.0 - q;
        t * t * t
    } else {
        0.0
    }
}

#[inline]
fn bump_q_d1(q: f64) -> f64 {
    if q < 1.0 {
        -3.0 * (1.0 - q) * (1.0 - q)
    } else {
        0.0
    }
}

#[inline]
fn bump_q_d2(q: f64) -> f64 {
    if q < 1.0 {
        6.0 * (1.0 - q)
    } else {
        0.0
    }
}

/// Normalised kernel `ρ` on a periodic grid, with its sampled field.
#[derive(Clone, Debug, PartialEq)]
pub struct TorusMollifier {
    width: f64,
    shape: MollifierShape,
    constant: f64,
    field: Field,
}

impl TorusMollifier {
    pub fn width(&self) -> f64 {
        self.width
    }

    /// Support radius `width/2`.
    pub fn radius(&self) -> f64 {
        0.5 * self.width
    }

    pub fn shape(&self) -> MollifierShape {
        self.shape
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn grid(&self) -> &Grid {
        self.field.grid()
    }

    fn sigma(&self) -> f64 {
        self.radius() / GAUSSIAN_RADII
    }

    fn wrap(&self, z: [f64; 2]) -> [f64; 2] {
        let l = self.grid().length();
        let w = |t: f64| t - l * (t / l).round();
        [w(z[0]), w(z[1])]
    }

    /// Periodised one-dimensional Gaussian factor with its first two
    /// derivatives; images are summed in `±m` pairs so that `t ↦ −t` is exact.
    fn gaussian_1d(&self, t: f64) -> (f64, f64, f64) {
        let l = self.grid().length();
        let t = self.wrap([t, 0.0])[0];
        let s2 = self.sigma() * self.sigma();
        let term = |y: f64| {
            let e = (-0.5 * y * y / s2).exp();
            (e, -y / s2 * e, (y * y / (s2 * s2) - 1.0 / s2) * e)
        };
        let mut acc = term(t);
        for m in 1..=2 {
            let a = term(t - m as f64 * l);
            let b = term(t + m as f64 * l);
            acc.0 += a.0 + b.0;
            acc.1 += a.1 + b.1;
            acc.2 += a.2 + b.2;
        }
        acc
    }

    /// `ρ(z)` at an arbitrary displacement; smooth shapes only.
    pub fn density(&self, z: [f64; 2]) -> Result<f64> {
        Ok(self.density_parts(z)?.0)
    }

    /// `(ρ(z), ∇ρ(z), Δρ(z))` for the smooth shapes.
    pub fn density_parts(&self, z: [f64; 2]) -> Result<(f64, [f64; 2], f64)> {
        match self.shape {
            MollifierShape::Bump => {
                let z = self.wrap(z);
                let r2 = self.radius() * self.radius();
                let q = (z[0] * z[0] + z[1] * z[1]) / r2;
                let c = self.constant;
                let g = c * bump_q_d1(q) * 2.0 / r2;
                let d = self.grid().dim() as f64;
                let lap = c * (4.0 * q * bump_q_d2(q) + 2.0 * d * bump_q_d1(q)) / r2;
                Ok((c * bump_q(q), [g * z[0], g * z[1]], lap))
            }
            MollifierShape::Gaussian => {
                let c = self.constant;
                let gx = self.gaussian_1d(z[0]);
                if self.grid().dim() == 1 {
                    return Ok((c * gx.0, [c * gx.1, 0.0], c * gx.2));
                }
                let gy = self.gaussian_1d(z[1]);
                Ok((
                    c * gx.0 * gy.0,
                    [c * gx.1 * gy.0, c * gx.0 * gy.1],
                    c * (gx.2 * gy.0 + gx.0 * gy.2),
                ))
            }
            MollifierShape::UniformCap | MollifierShape::Custom => Err(Error::Unsupported(
                format!("the {} kernel has no pointwise derivatives", self.shape.name()),
            )),
        }
    }

    /// `sup |Δ_d ρ|` of the sampled field.
    pub fn laplacian_sup(&self) -> f64 {
        grid::laplacian(&self.field).sup_norm()
    }

    /// Normalises a nonnegative sampled kernel to unit integral. The width is
    /// the diameter of the sampled support.
    pub fn from_field(field: Field) -> Result<Self> {
        let g = *field.grid();
        if !g.is_periodic() {
            return Err(invalid("mollifiers live on periodic grids"));
        }
        if field.min() < 0.0 {
            return Err(invalid("kernel samples must be nonnegative"));
        }
        let total = grid::integrate(&field);
        if !(total > 0.0) {
            return Err(invalid("kernel has no mass"));
        }
        let h = g.cell_size();
        let reach = (0..g.len())
            .filter(|&p| field.values()[p] != 0.0)
            .map(|p| {
                let o = g.signed_offset(p);
                ((o[0] * o[0] + o[1] * o[1]) as f64).sqrt() * h
            })
            .fold(0.0, f64::max);
        Ok(Self {
            width: (2.0 * reach).max(2.0 * h),
            shape: MollifierShape::Custom,
            constant: 1.0 / total,
            field: field.scaled(1.0 / total),
        })
    }

    /// The reflected kernel `ρ̌` as a field.
    pub fn reflected_field(&self) -> Field {
        grid::reflect(&self.field)
    }
}

/// Builds a normalised mollifier of support diameter `width` on a periodic grid.
pub fn make_torus_mollifier(g: &Grid, width: f64, shape: MollifierShape) -> Result<TorusMollifier> {
    if !g.is_periodic() {
        return Err(invalid("mollifiers live on periodic grids"));
    }
    let h = g.cell_size();
    if !(width >= 2.0 * h) {
        return Err(invalid(format!(
            "mollifier width {width} is below the resolvable size 2h = {}",
            2.0 * h
        )));
    }
    if !(width < g.length()) {
        return Err(invalid(format!(
            "mollifier width {width} must be smaller than the period {}",
            g.length()
        )));
    }
    let r = 0.5 * width;
    let mut m = TorusMollifier {
        width,
        shape,
        constant: 1.0,
        field: Field::zeros(*g),
    };
    let raw: Vec<f64> = match shape {
        MollifierShape::Bump | MollifierShape::Gaussian => (0..g.len())
            .map(|p| {
                let o = g.signed_offset(p);
                m.density_parts([o[0] as f64 * h, o[1] as f64 * h]).map(|t| t.0)
            })
            .collect::<Result<_>>()?,
        MollifierShape::Custom => {
            return Err(invalid("custom kernels are built with TorusMollifier::from_field"))
        }
        MollifierShape::UniformCap => (0..g.len())
            .map(|p| {
                let off = g.signed_offset(p);
                if g.dim() == 1 {
                    let lo = (off[0] as f64 - 0.5) * h;
                    let hi = (off[0] as f64 + 0.5) * h;
                    (hi.min(r) - lo.max(-r)).max(0.0) / h
                } else {
                    // Area fraction of the cell inside the disk by 16×16 subsampling.
                    let sub = 16;
                    let mut inside = 0usize;
                    for a in 0..sub {
                        for b in 0..sub {
                            let x = (off[0] as f64 - 0.5 + (a as f64 + 0.5) / sub as f64) * h;
                            let y = (off[1] as f64 - 0.5 + (b as f64 + 0.5) / sub as f64) * h;
                            if x * x + y * y <= r * r {
                                inside += 1;
                            }
                        }
                    }
                    inside as f64 / (sub * sub) as f64
                }
            })
            .collect(),
    };
    let total: f64 = g.cell_volume() * raw.iter().sum::<f64>();
    if !(total > 0.0) {
        return Err(invalid("mollifier has no mass on this grid"));
    }
    m.constant = 1.0 / total;
    let c = m.constant;
    m.field = Field::new(*g, raw.into_iter().map(|v| v * c).collect())?;
    Ok(m)
}

/// A nonnegative interaction intensity `K(x_1, …, x_n)` with analytic
/// first derivatives and mixed second derivatives. Points are `[x, y]`,
/// with `y` ignored in one dimension.
pub trait InteractionKernel: Send + Sync {
    fn arity(&self) -> usize;

    fn dim(&self) -> usize;

    fn eval(&self, x: &[[f64; 2]]) -> f64;

    /// `∇_{x_k} K`
    fn gradient(&self, x: &[[f64; 2]], k: usize) -> [f64; 2];

    /// `Σ_a ∂_{x_i,a} ∂_{x_j,a} K` for `i != j`.
    fn mixed_trace(&self, x: &[[f64; 2]], i: usize, j: usize) -> f64;
}

/// `K ≡ 0`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZeroKernel {
    pub arity: usize,
    pub dim: usize,
}

impl InteractionKernel for ZeroKernel {
    fn arity(&self) -> usize {
        self.arity
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _x: &[[f64; 2]]) -> f64 {
        0.0
    }

    fn gradient(&self, _x: &[[f64; 2]], _k: usize) -> [f64; 2] {
        [0.0; 2]
    }

    fn mixed_trace(&self, _x: &[[f64; 2]], _i: usize, _j: usize) -> f64 {
        0.0
    }
}

/// Two-argument convolution kernel `K(x, y) = ρ(x − y)` on the torus.
#[derive(Clone, Debug)]
pub struct ConvolutionKernel {
    mollifier: TorusMollifier,
}

impl ConvolutionKernel {
    pub fn new(mollifier: TorusMollifier) -> Result<Self> {
        if matches!(mollifier.shape, MollifierShape::UniformCap | MollifierShape::Custom) {
            return Err(Error::Unsupported(
                "convolution kernels need a smooth mollifier shape".into(),
            ));
        }
        Ok(Self { mollifier })
    }

    pub fn mollifier(&self) -> &TorusMollifier {
        &self.mollifier
    }

    fn parts(&self, x: &[[f64; 2]]) -> (f64, [f64; 2], f64) {
        let z = [x[0][0] - x[1][0], x[0][1] - x[1][1]];
        self.mollifier.density_parts(z).expect("smooth shape checked at construction")
    }
}

impl InteractionKernel for ConvolutionKernel {
    fn arity(&self) -> usize {
        2
    }

    fn dim(&self) -> usize {
        self.mollifier.grid().dim()
    }

    fn eval(&self, x: &[[f64; 2]]) -> f64 {
        self.parts(x).0
    }

    fn gradient(&self, x: &[[f64; 2]], k: usize) -> [f64; 2] {
        let g = self.parts(x).1;
        if k == 0 {
            g
        } else {
            [-g[0], -g[1]]
        }
    }

    fn mixed_trace(&self, x: &[[f64; 2]], i: usize, j: usize) -> f64 {
        debug_assert_ne!(i, j);
        -self.parts(x).2
    }
}

/// C^∞ step from 0 at `t ≤ 0` to 1 at `t ≥ 1`, with its derivative.
fn smooth_step(t: f64) -> (f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0);
    }
    if t >= 1.0 {
        return (1.0, 0.0);
    }
    let e = 1.0 / t - 1.0 / (1.0 - t);
    let v = if e > 0.0 {
        let x = (-e).exp();
        x / (1.0 + x)
    } else {
        1.0 / (1.0 + e.exp())
    };
    if v == 0.0 || v == 1.0 {
        return (v, 0.0);
    }
    (v, v * (1.0 - v) * (1.0 / (t * t) + 1.0 / ((1.0 - t) * (1.0 - t))))
}

/// Product kernel
/// `K = C · Π_{i<j} (1 − |x_i − x_j|²/R²)³₊ · Π_i χ(x_i)` on the box `(0, L)^d`,
/// where `χ` vanishes within `boundary_margin` of the walls and rises
/// smoothly to 1 over `ramp_width`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainKernel {
    species: usize,
    dim: usize,
    length: f64,
    diag_radius: f64,
    boundary_margin: f64,
    ramp_width: f64,
    constant: f64,
}

enum Factor {
    Pair(usize, usize),
    Cutoff(usize),
}

impl DomainKernel {
    pub fn species(&self) -> usize {
        self.species
    }

    pub fn diag_radius(&self) -> f64 {
        self.diag_radius
    }

    pub fn boundary_margin(&self) -> f64 {
        self.boundary_margin
    }

    pub fn ramp_width(&self) -> f64 {
        self.ramp_width
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    fn factors(&self) -> Vec<Factor> {
        let mut f = Vec::new();
        for i in 0..self.species {
            for j in (i + 1)..self.species {
                f.push(Factor::Pair(i, j));
            }
        }
        for i in 0..self.species {
            f.push(Factor::Cutoff(i));
        }
        f
    }

    fn chi(&self, t: f64) -> (f64, f64) {
        let (v, d) = smooth_step((t - self.boundary_margin) / self.ramp_width);
        (v, d / self.ramp_width)
    }

    /// `χ(x)` and its gradient.
    pub fn cutoff(&self, x: [f64; 2]) -> (f64, [f64; 2]) {
        let mut parts = [(1.0, 0.0); 2];
        for (a, part) in parts.iter_mut().enumerate().take(self.dim) {
            let (lo, dlo) = self.chi(x[a]);
            let (hi, dhi) = self.chi(self.length - x[a]);
            *part = (lo * hi, dlo * hi - lo * dhi);
        }
        let value = parts[0].0 * parts[1].0;
        (value, [parts[0].1 * parts[1].0, parts[0].0 * parts[1].1])
    }

    fn q(&self, a: [f64; 2], b: [f64; 2]) -> (f64, [f64; 2]) {
        let d = [a[0] - b[0], a[1] - b[1]];
        let r2 = self.diag_radius * self.diag_radius;
        ((d[0] * d[0] + d[1] * d[1]) / r2, d)
    }

    fn factor_value(&self, f: &Factor, x: &[[f64; 2]]) -> f64 {
        match *f {
            Factor::Pair(i, j) => bump_q(self.q(x[i], x[j]).0),
            Factor::Cutoff(i) => self.cutoff(x[i]).0,
        }
    }

    fn factor_gradient(&self, f: &Factor, x: &[[f64; 2]], k: usize) -> [f64; 2] {
        match *f {
            Factor::Pair(i, j) if k == i || k == j => {
                let (q, d) = self.q(x[i], x[j]);
                let s = bump_q_d1(q) * 2.0 / (self.diag_radius * self.diag_radius);
                let sign = if k == i { 1.0 } else { -1.0 };
                [sign * s * d[0], sign * s * d[1]]
            }
            Factor::Cutoff(i) if k == i => self.cutoff(x[i]).1,
            _ => [0.0; 2],
        }
    }

    fn factor_mixed(&self, f: &Factor, x: &[[f64; 2]], i: usize, j: usize) -> f64 {
        match *f {
            Factor::Pair(a, b) if (a == i && b == j) || (a == j && b == i) => {
                let (q, _) = self.q(x[a], x[b]);
                let r2 = self.diag_radius * self.diag_radius;
                -(4.0 * q * bump_q_d2(q) + 2.0 * self.dim as f64 * bump_q_d1(q)) / r2
            }
            _ => 0.0,
        }
    }

    /// Kernel weights on the grid, reporting where they reach 1.
    pub fn weights(&self, g: &Grid) -> Result<KernelWeights> {
        kernel_weights(self, g)
    }
}

impl InteractionKernel for DomainKernel {
    fn arity(&self) -> usize {
        self.species
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[[f64; 2]]) -> f64 {
        let mut v = self.constant;
        for f in self.factors() {
            v *= self.factor_value(&f, x);
            if v == 0.0 {
                return 0.0;
            }
        }
        v
    }

    fn gradient(&self, x: &[[f64; 2]], k: usize) -> [f64; 2] {
        let fs = self.factors();
        let vals: Vec<f64> = fs.iter().map(|f| self.factor_value(f, x)).collect();
        let mut g = [0.0; 2];
        for (m, f) in fs.iter().enumerate() {
            let dm = self.factor_gradient(f, x, k);
            if dm == [0.0; 2] {
                continue;
            }
            let rest: f64 = vals.iter().enumerate().filter(|(l, _)| *l != m).map(|(_, v)| v).product();
            g[0] += rest * dm[0];
            g[1] += rest * dm[1];
        }
        [self.constant * g[0], self.constant * g[1]]
    }

    fn mixed_trace(&self, x: &[[f64; 2]], i: usize, j: usize) -> f64 {
        debug_assert_ne!(i, j);
        let fs = self.factors();
        let vals: Vec<f64> = fs.iter().map(|f| self.factor_value(f, x)).collect();
        let gi: Vec<[f64; 2]> = fs.iter().map(|f| self.factor_gradient(f, x, i)).collect();
        let gj: Vec<[f64; 2]> = fs.iter().map(|f| self.factor_gradient(f, x, j)).collect();
        let mut total = 0.0;
        for m in 0..fs.len() {
            let rest_m = |skip: &[usize]| -> f64 {
                vals.iter()
                    .enumerate()
                    .filter(|(l, _)| !skip.contains(l))
                    .map(|(_, v)| v)
                    .product()
            };
            let own = self.factor_mixed(&fs[m], x, i, j);
            if own != 0.0 {
                total += own * rest_m(&[m]);
            }
            for mp in 0..fs.len() {
                if mp == m {
                    continue;
                }
                let dot = gi[m][0] * gj[mp][0] + gi[m][1] * gj[mp][1];
                if dot != 0.0 {
                    total += dot * rest_m(&[m, mp]);
                }
            }
        }
        self.constant * total
    }
}

/// Builds the product-bump kernel on the box of `g`, normalised so that the
/// largest quadrature weight equals 1.
pub fn make_domain_kernel(
    g: &Grid,
    species: usize,
    diag_radius: f64,
    boundary_margin: f64,
    ramp_width: f64,
) -> Result<DomainKernel> {
    if g.is_periodic() {
        return Err(invalid("domain kernels live on bounded (Neumann) grids"));
    }
    if !(2..=3).contains(&species) || (g.dim() == 2 && species != 2) {
        return Err(Error::Unsupported(format!(
            "domain kernels support 2 or 3 species in 1D and 2 species in 2D, got {species} in {}D",
            g.dim()
        )));
    }
    let h = g.cell_size();
    if !(diag_radius >= 2.0 * h) {
        return Err(invalid(format!("diag_radius {diag_radius} is below 2h = {}", 2.0 * h)));
    }
    if !(boundary_margin >= h) {
        return Err(invalid(format!("boundary_margin {boundary_margin} is below h = {h}")));
    }
    if !(ramp_width > 0.0) || !(boundary_margin + ramp_width < 0.5 * g.length()) {
        return Err(invalid(format!(
            "ramp_width must be positive with margin + ramp below L/2 (got {ramp_width})"
        )));
    }
    let mut k = DomainKernel {
        species,
        dim: g.dim(),
        length: g.length(),
        diag_radius,
        boundary_margin,
        ramp_width,
        constant: 1.0,
    };
    let w = raw_weights(&k, g);
    let max = w.iter().flatten().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(invalid("domain kernel has no interior mass on this grid"));
    }
    k.constant = 1.0 / max;
    Ok(k)
}

/// Marginal weights `w_i(x_i) = ∫ K dx_{j≠i}` with per-species reports.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelWeights {
    pub fields: Vec<Field>,
    /// Points with `w_i ≥ 1 − 10⁻⁶`.
    pub interior: Vec<Vec<bool>>,
    /// `sup |1 − w_i|` over the points farther than margin + ramp + diag_radius
    /// from the walls, when that region is nonempty.
    pub interior_deviation: Vec<Option<f64>>,
}

pub(crate) fn for_each_tuple(len: usize, count: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; count];
    if count == 0 {
        f(&idx);
        return;
    }
    loop {
        f(&idx);
        let mut a = 0;
        loop {
            idx[a] += 1;
            if idx[a] < len {
                break;
            }
            idx[a] = 0;
            a += 1;
            if a == count {
                return;
            }
        }
    }
}

fn raw_weights(k: &dyn InteractionKernel, g: &Grid) -> Vec<Vec<f64>> {
    let n = k.arity();
    let vol = g.cell_volume().powi(n as i32 - 1);
    let pts: Vec<[f64; 2]> = (0..g.len()).map(|p| g.point(p)).collect();
    (0..n)
        .map(|i| {
            pts.iter()
                .map(|&xi| {
                    let mut sum = 0.0;
                    let mut args = vec![[0.0; 2]; n];
                    args[i] = xi;
                    for_each_tuple(pts.len(), n - 1, |t| {
                        let mut c = 0;
                        for (s, a) in args.iter_mut().enumerate() {
                            if s != i {
                                *a = pts[t[c]];
                                c += 1;
                            }
                        }
                        sum += k.eval(&args);
                    });
                    vol * sum
                })
                .collect()
        })
        .collect()
}

/// Midpoint tensor quadrature of the kernel marginals on `g`.
pub fn kernel_weights(k: &dyn InteractionKernel, g: &Grid) -> Result<KernelWeights> {
    if k.dim() != g.dim() {
        return Err(Error::GridMismatch);
    }
    let raw = raw_weights(k, g);
    let fields: Vec<Field> = raw.into_iter().map(|w| Field::new(*g, w)).collect::<Result<_>>()?;
    let interior = fields
        .iter()
        .map(|f| f.values().iter().map(|w| *w >= 1.0 - 1e-6).collect())
        .collect();
    let n = fields.len();
    Ok(KernelWeights {
        fields,
        interior,
        interior_deviation: vec![None; n],
    })
}

/// [`kernel_weights`] for a domain kernel, with the designated interior region.
pub fn domain_kernel_weights(k: &DomainKernel, g: &Grid) -> Result<KernelWeights> {
    let mut w = kernel_weights(k, g)?;
    let inset = k.boundary_margin + k.ramp_width + k.diag_radius;
    let inside = |p: usize| {
        let x = g.point(p);
        (0..g.dim()).all(|a| x[a] >= inset && x[a] <= g.length() - inset)
    };
    w.interior_deviation = w
        .fields
        .iter()
        .map(|f| {
            let devs: Vec<f64> = (0..g.len())
                .filter(|&p| inside(p))
                .map(|p| (1.0 - f.values()[p]).abs())
                .collect();
            if devs.is_empty() {
                None
            } else {
                Some(devs.into_iter().fold(0.0, f64::max))
            }
        })
        .collect();
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{circular_convolve, integrate, reflect};
    use std::f64::consts::PI;

    #[test]
    fn mollifiers_are_normalised_and_nonnegative() {
        for g in [Grid::torus(1, 64).unwrap(), Grid::torus(2, 32).unwrap()] {
            for shape in [MollifierShape::Bump, MollifierShape::Gaussian, MollifierShape::UniformCap] {
                let m = make_torus_mollifier(&g, 0.3, shape).unwrap();
                assert!((integrate(m.field()) - 1.0).abs() < 1e-12);
                assert!(m.field().values().iter().all(|v| *v >= 0.0));
                assert_eq!(&reflect(m.field()), m.field(), "{shape:?}");
                // Mass outside the support radius (one extra cell for the cap).
                let outside: f64 = (0..g.len())
                    .filter(|&p| {
                        let o = g.signed_offset(p);
                        let d = ((o[0] * o[0] + o[1] * o[1]) as f64).sqrt() * g.cell_size();
                        d > m.radius() + g.cell_size()
                    })
                    .map(|p| m.field().values()[p] * g.cell_volume())
                    .sum();
                assert!(outside < 1e-4, "{shape:?} {outside}");
            }
        }
    }

    #[test]
    fn half_period_cap_fills_32_cells() {
        let g = Grid::torus(1, 64).unwrap();
        let m = make_torus_mollifier(&g, 0.5, MollifierShape::UniformCap).unwrap();
        let vals = m.field().values();
        let full = vals.iter().filter(|v| (**v - vals[0]).abs() < 1e-15).count();
        let half = vals.iter().filter(|v| (**v - 0.5 * vals[0]).abs() < 1e-15).count();
        assert_eq!((full, half), (31, 2));
        assert!((vals.iter().sum::<f64>() / vals[0] - 32.0).abs() < 1e-12);
        assert!((integrate(m.field()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resolution_is_enforced() {
        let g = Grid::torus(1, 64).unwrap();
        assert!(make_torus_mollifier(&g, 1.5 / 64.0, MollifierShape::Bump).is_err());
        assert!(make_torus_mollifier(&g, 2.0 / 64.0, MollifierShape::Bump).is_ok());
        assert!(make_torus_mollifier(&g, 1.0, MollifierShape::Bump).is_err());
        assert!(make_torus_mollifier(&Grid::unit_box(1, 64).unwrap(), 0.2, MollifierShape::Bump).is_err());
    }

    #[test]
    fn mollification_converges_to_identity() {
        let g = Grid::torus(1, 256).unwrap();
        let phi = Field::from_fn(g, |x| (2.0 * PI * x[0]).cos());
        for shape in [MollifierShape::Bump, MollifierShape::Gaussian, MollifierShape::UniformCap] {
            let errs: Vec<f64> = [0.4, 0.2, 0.1, 0.05]
                .iter()
                .map(|&w| {
                    let m = make_torus_mollifier(&g, w, shape).unwrap();
                    let c = circular_convolve(&phi, m.field()).unwrap();
                    c.zip_map(&phi, |a, b| a - b).unwrap().sup_norm()
                })
                .collect();
            assert!(errs.windows(2).all(|w| w[1] < w[0]), "{shape:?} {errs:?}");
            let k = Field::constant(g, 2.5);
            let m = make_torus_mollifier(&g, 0.1, shape).unwrap();
            let c = circular_convolve(&k, m.field()).unwrap();
            assert!(c.values().iter().all(|v| (v - 2.5).abs() < 1e-13));
        }
    }

    #[test]
    fn smooth_density_derivatives_match_finite_differences() {
        for g in [Grid::torus(1, 32).unwrap(), Grid::torus(2, 16).unwrap()] {
            for shape in [MollifierShape::Bump, MollifierShape::Gaussian] {
                let m = make_torus_mollifier(&g, 0.6, shape).unwrap();
                let z = [0.07, if g.dim() == 2 { -0.05 } else { 0.0 }];
                let (v, grad, lap) = m.density_parts(z).unwrap();
                let e = 1e-5;
                let mut fd_lap = 0.0;
                for a in 0..g.dim() {
                    let mut zp = z;
                    let mut zm = z;
                    zp[a] += e;
                    zm[a] -= e;
                    let vp = m.density(zp).unwrap();
                    let vm = m.density(zm).unwrap();
                    assert!(((vp - vm) / (2.0 * e) - grad[a]).abs() < 1e-5 * (1.0 + grad[a].abs()));
                    fd_lap += (vp - 2.0 * v + vm) / (e * e);
                }
                assert!((fd_lap - lap).abs() < 1e-3 * (1.0 + lap.abs()), "{fd_lap} {lap}");
                // The sampled field is the analytic density at the nodes.
                assert_eq!(m.field().values()[1], m.density(g.point(1)).unwrap());
            }
        }
        let g = Grid::torus(1, 32).unwrap();
        let cap = make_torus_mollifier(&g, 0.5, MollifierShape::UniformCap).unwrap();
        assert!(cap.density([0.0; 2]).is_err());
        assert!(ConvolutionKernel::new(cap).is_err());
    }

    #[test]
    fn convolution_kernel_weights_are_one() {
        let g = Grid::torus(1, 32).unwrap();
        let m = make_torus_mollifier(&g, 0.3, MollifierShape::Bump).unwrap();
        let k = ConvolutionKernel::new(m).unwrap();
        let w = kernel_weights(&k, &g).unwrap();
        for f in &w.fields {
            assert!(f.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
        // ∂_x K + ∂_y K ≡ 0.
        let x = [[0.3, 0.0], [0.41, 0.0]];
        let s = k.gradient(&x, 0)[0] + k.gradient(&x, 1)[0];
        assert_eq!(s, 0.0);
    }

    #[test]
    fn zero_kernel_weights_vanish() {
        let g = Grid::unit_box(1, 16).unwrap();
        let w = kernel_weights(&ZeroKernel { arity: 2, dim: 1 }, &g).unwrap();
        assert!(w.fields.iter().all(|f| f.values().iter().all(|v| *v == 0.0)));
    }

    fn kernel_1d(n: usize) -> (Grid, DomainKernel) {
        let g = Grid::unit_box(1, n).unwrap();
        let k = make_domain_kernel(&g, 2, 0.1, 0.05, 0.2).unwrap();
        (g, k)
    }

    #[test]
    fn domain_kernel_support_and_boundary() {
        let (_, k) = kernel_1d(64);
        assert!(k.eval(&[[0.5, 0.0], [0.5, 0.0]]) > 0.0);
        assert_eq!(k.eval(&[[0.3, 0.0], [0.4, 0.0]]), 0.0);
        assert_eq!(k.eval(&[[0.3, 0.0], [0.45, 0.0]]), 0.0);
        assert_eq!(k.eval(&[[0.0, 0.0], [0.02, 0.0]]), 0.0);
        assert_eq!(k.eval(&[[0.04, 0.0], [0.06, 0.0]]), 0.0);
        assert_eq!(k.eval(&[[0.97, 0.0], [0.99, 0.0]]), 0.0);
        let g2 = Grid::unit_box(2, 16).unwrap();
        let k2 = make_domain_kernel(&g2, 2, 0.2, 0.07, 0.15).unwrap();
        assert!(k2.eval(&[[0.5, 0.5], [0.55, 0.5]]) > 0.0);
        assert_eq!(k2.eval(&[[0.5, 0.03], [0.5, 0.05]]), 0.0);
    }

    #[test]
    fn domain_kernel_derivatives_match_finite_differences() {
        let g = Grid::unit_box(1, 32).unwrap();
        let k3 = make_domain_kernel(&g, 3, 0.3, 0.05, 0.2).unwrap();
        let x = [[0.31, 0.0], [0.4, 0.0], [0.22, 0.0]];
        let e = 1e-5;
        for kk in 0..3 {
            let mut p = x;
            let mut m = x;
            p[kk][0] += e;
            m[kk][0] -= e;
            let fd = (k3.eval(&p) - k3.eval(&m)) / (2.0 * e);
            let an = k3.gradient(&x, kk)[0];
            assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "{kk}: {fd} {an}");
        }
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            let eval = |di: f64, dj: f64| {
                let mut y = x;
                y[i][0] += di;
                y[j][0] += dj;
                k3.eval(&y)
            };
            let e = 1e-4;
            let fd = (eval(e, e) - eval(e, -e) - eval(-e, e) + eval(-e, -e)) / (4.0 * e * e);
            let an = k3.mixed_trace(&x, i, j);
            assert!((fd - an).abs() < 1e-4 * (1.0 + an.abs()), "{i}{j}: {fd} {an}");
        }
        let g2 = Grid::unit_box(2, 16).unwrap();
        let k2 = make_domain_kernel(&g2, 2, 0.3, 0.07, 0.15).unwrap();
        let x = [[0.2, 0.25], [0.3, 0.17]];
        let e = 1e-4;
        let mut fd = 0.0;
        for a in 0..2 {
            let eval = |di: f64, dj: f64| {
                let mut y = x;
                y[0][a] += di;
                y[1][a] += dj;
                k2.eval(&y)
            };
            fd += (eval(e, e) - eval(e, -e) - eval(-e, e) + eval(-e, -e)) / (4.0 * e * e);
        }
        let an = k2.mixed_trace(&x, 0, 1);
        assert!((fd - an).abs() < 1e-4 * (1.0 + an.abs()), "{fd} {an}");
    }

    #[test]
    fn domain_weights_bounded_with_plateau() {
        let (g, k) = kernel_1d(64);
        let w = domain_kernel_weights(&k, &g).unwrap();
        for (f, inside) in w.fields.iter().zip(&w.interior) {
            for (p, v) in f.values().iter().enumerate() {
                assert!(*v >= 0.0 && *v <= 1.0 + 1e-12);
                let x = g.point(p)[0];
                if x <= 0.05 || x >= 0.95 {
                    assert_eq!(*v, 0.0);
                }
            }
            assert!(inside.iter().filter(|b| **b).count() > 10);
        }
        assert!(w.interior_deviation[0].unwrap() < 1e-6);
    }

    #[test]
    fn domain_weights_match_fine_quadrature() {
        // Oracle: the same marginal integral by midpoint rule on a 16× finer
        // partition of [0, 1] in the free variable.
        let (g, k) = kernel_1d(256);
        let w = kernel_weights(&k, &g).unwrap();
        let fine = 256 * 16;
        let hf = 1.0 / fine as f64;
        for p in [14, 25, 51, 76, 128] {
            let x = g.point(p);
            let oracle: f64 = (0..fine)
                .map(|m| hf * k.eval(&[x, [(m as f64 + 0.5) * hf, 0.0]]))
                .sum();
            assert!((oracle - w.fields[0].values()[p]).abs() < 1e-6, "{p}");
        }
    }

    #[test]
    fn shrinking_diag_radius_shrinks_support() {
        let g = Grid::unit_box(1, 64).unwrap();
        let big = make_domain_kernel(&g, 2, 0.2, 0.05, 0.2).unwrap();
        let small = make_domain_kernel(&g, 2, 0.1, 0.05, 0.2).unwrap();
        for p in 0..64 {
            for q in 0..64 {
                let x = [g.point(p), g.point(q)];
                if small.eval(&x) > 0.0 {
                    assert!(big.eval(&x) > 0.0);
                }
            }
        }
    }

    #[test]
    fn domain_kernel_rejects_unresolvable_parameters() {
        let g = Grid::unit_box(1, 32).unwrap();
        assert!(make_domain_kernel(&g, 2, 0.01, 0.05, 0.2).is_err());
        assert!(make_domain_kernel(&g, 2, 0.1, 0.01, 0.2).is_err());
        assert!(make_domain_kernel(&g, 2, 0.1, 0.2, 0.4).is_err());
        assert!(make_domain_kernel(&g, 4, 0.1, 0.05, 0.2).is_err());
        assert!(make_domain_kernel(&Grid::torus(1, 32).unwrap(), 2, 0.1, 0.05, 0.2).is_err());
    }
}
