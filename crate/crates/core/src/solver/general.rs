use rayon::prelude::*;

use super::{check_dt, KernelChoice, SolverState, SystemSpec};
use crate::entropy::{default_sample_grid, EntropyStructure};
use crate::error::{invalid, Error, Result};
use crate::grid::{Field, Grid};
use crate::kernels::{for_each_tuple, InteractionKernel};
use crate::linalg::FluxOperator;
use crate::rates::DiffusionRates;

/// Coefficients of `∂_t u_i = div((ε + ā_i)∇u_i) − b̄_i·∇u_i − c̄_i u_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralCoefficients {
    pub a_bar: Vec<Field>,
    /// `b̄_i` per axis.
    pub b_bar: Vec<Vec<Field>>,
    pub c_bar: Vec<Field>,
}

fn domain_kernel(spec: &SystemSpec) -> Result<&dyn InteractionKernel> {
    match &spec.kernel {
        KernelChoice::Domain { kernel, .. } => Ok(kernel.as_ref()),
        _ => Err(invalid("the general-domain scheme needs a domain kernel")),
    }
}

fn check_cost(g: &Grid, n: usize) -> Result<()> {
    if (g.dim() == 1 && n <= 3) || (g.dim() == 2 && n == 2) {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "kernel quadrature supports n ≤ 3 in 1D and n = 2 in 2D, got n = {n} in {}D",
            g.dim()
        )))
    }
}

fn antiderivative(rates: &dyn DiffusionRates, i: usize, j: usize, v: &[f64]) -> Result<f64> {
    rates.antiderivative(i, j, v).ok_or_else(|| {
        Error::Unsupported("the general-domain scheme needs rate antiderivatives".into())
    })
}

fn self_partial(rates: &dyn DiffusionRates, i: usize, j: usize, v: &[f64]) -> Result<f64> {
    rates.antiderivative_self_partial(i, j, v).ok_or_else(|| {
        Error::Unsupported("the general-domain scheme needs rate antiderivatives".into())
    })
}

/// Visits every placement of cells for the species other than `fixed`,
/// writing positions into `args` and values into `v`.
fn for_each_others(
    state: &SolverState,
    pts: &[[f64; 2]],
    fixed: &[usize],
    args: &mut [[f64; 2]],
    v: &mut [f64],
    mut f: impl FnMut(&[[f64; 2]], &[f64]),
) {
    let n = args.len();
    let free: Vec<usize> = (0..n).filter(|s| !fixed.contains(s)).collect();
    for_each_tuple(pts.len(), free.len(), |t| {
        for (c, &s) in free.iter().enumerate() {
            args[s] = pts[t[c]];
            v[s] = state.fields[s].values()[t[c]];
        }
        f(args, v);
    });
}

/// `ā_i`, `b̄_i` and `c̄_i` by midpoint tensor quadrature of `K`, `∇_j K`
/// and the mixed traces against `a_ii`, `∂_i ã_ij` and `ã_ij / u_i`.
pub fn assemble_general_coefficients(state: &SolverState, spec: &SystemSpec) -> Result<GeneralCoefficients> {
    state.check_against(spec)?;
    let k = domain_kernel(spec)?;
    let g = spec.grid;
    let n = spec.species();
    check_cost(&g, n)?;
    let rates = spec.rates.as_ref();
    antiderivative(rates, 0, 1, &vec![1.0; n])?;
    let pts: Vec<[f64; 2]> = (0..g.len()).map(|p| g.point(p)).collect();
    let vol = g.cell_volume().powi(n as i32 - 1);
    let dim = g.dim();

    let mut a_bar = Vec::with_capacity(n);
    let mut b_bar = Vec::with_capacity(n);
    let mut c_bar = Vec::with_capacity(n);
    for i in 0..n {
        let cells: Vec<(f64, [f64; 2], f64)> = (0..g.len())
            .into_par_iter()
            .map(|p| {
                let mut args = vec![[0.0; 2]; n];
                let mut v = vec![0.0; n];
                args[i] = pts[p];
                v[i] = state.fields[i].values()[p];
                let ui = v[i];
                let (mut a, mut b, mut c) = (0.0, [0.0; 2], 0.0);
                for_each_others(state, &pts, &[i], &mut args, &mut v, |x, w| {
                    if k.eval(x) == 0.0 {
                        return;
                    }
                    a += k.eval(x) * rates.entry(i, i, w);
                    for j in (0..n).filter(|&j| j != i) {
                        let grad = k.gradient(x, j);
                        let dai = rates.antiderivative_self_partial(i, j, w).unwrap_or(f64::NAN);
                        b[0] += grad[0] * dai;
                        b[1] += grad[1] * dai;
                        let at = rates.antiderivative(i, j, w).unwrap_or(f64::NAN);
                        c += k.mixed_trace(x, i, j) * at / ui;
                    }
                });
                (vol * a, [vol * b[0], vol * b[1]], vol * c)
            })
            .collect();
        a_bar.push(Field::new(g, cells.iter().map(|c| c.0).collect())?);
        b_bar.push(
            (0..dim)
                .map(|axis| Field::new(g, cells.iter().map(|c| c.1[axis]).collect()))
                .collect::<Result<Vec<_>>>()?,
        );
        c_bar.push(Field::new(g, cells.iter().map(|c| c.2).collect())?);
    }
    Ok(GeneralCoefficients { a_bar, b_bar, c_bar })
}

fn face_point(g: &Grid, p: usize, axis: usize) -> [f64; 2] {
    let mut x = g.point(p);
    x[axis] += 0.5 * g.cell_size();
    x
}

/// `B(z) = z / (e^z − 1)`
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

/// Face coefficients of the frozen flux `(ε + ā) ∇u_i + β u_i` for every
/// species, together with `ā_i`.
///
/// `ā` is the cell quadrature of `K a_ii` averaged onto faces. The drift is
/// `β_f = G_f / ū_f` with
/// `G_f = Σ_j ∫ K(x_f, y) ∂_y ã_ij(ū_f, u_j(y)) dy`, where the derivative is
/// the difference of `ã_ij` across the `y` faces on the same axis. Faces use
/// central weights while they keep both coefficients nonnegative and switch
/// to exponential fitting otherwise.
pub(crate) fn general_fluxes_with_a_bar(
    state: &SolverState,
    spec: &SystemSpec,
) -> Result<(Vec<FluxOperator>, Vec<Field>)> {
    state.check_against(spec)?;
    let k = domain_kernel(spec)?;
    let g = spec.grid;
    let n = spec.species();
    check_cost(&g, n)?;
    if !(spec.epsilon > 0.0) {
        return Err(invalid("the general-domain scheme needs epsilon > 0"));
    }
    let rates = spec.rates.as_ref();
    antiderivative(rates, 0, 1, &vec![1.0; n])?;
    self_partial(rates, 0, 1, &vec![1.0; n])?;
    let h = g.cell_size();
    let dim = g.dim();
    let pts: Vec<[f64; 2]> = (0..g.len()).map(|p| g.point(p)).collect();
    let faces: Vec<Vec<(usize, usize, [f64; 2])>> = (0..dim)
        .map(|axis| {
            (0..g.len())
                .filter(|&p| !g.is_boundary_face(p, axis))
                .map(|p| (p, g.neighbour(p, axis, 1), face_point(&g, p, axis)))
                .collect()
        })
        .collect();

    let mut ops = Vec::with_capacity(n);
    let mut a_bars = Vec::with_capacity(n);
    for i in 0..n {
        let vol = g.cell_volume().powi(n as i32 - 1);
        let a_bar: Vec<f64> = (0..g.len())
            .into_par_iter()
            .map(|p| {
                let mut args = vec![[0.0; 2]; n];
                let mut v = vec![0.0; n];
                args[i] = pts[p];
                v[i] = state.fields[i].values()[p];
                let mut a = 0.0;
                for_each_others(state, &pts, &[i], &mut args, &mut v, |x, w| {
                    let kv = k.eval(x);
                    if kv != 0.0 {
                        a += kv * rates.entry(i, i, w);
                    }
                });
                vol * a
            })
            .collect();
        let drift_weight = h.powi(dim as i32 - 1) * g.cell_volume().powi(n as i32 - 2);
        let ui = state.fields[i].values();
        let mut op = FluxOperator::zeros(g);
        for (axis, axis_faces) in faces.iter().enumerate() {
            let coeffs: Vec<(f64, f64)> = axis_faces
                .par_iter()
                .map(|&(p, q, xf)| {
                    let ubar = 0.5 * (ui[p] + ui[q]);
                    let mut args = vec![[0.0; 2]; n];
                    let mut v = vec![0.0; n];
                    args[i] = xf;
                    v[i] = ubar;
                    let mut drift = 0.0;
                    for j in (0..n).filter(|&j| j != i) {
                        let uj = state.fields[j].values();
                        for &(r, s, yg) in &axis_faces[..] {
                            args[j] = yg;
                            for_each_others(state, &pts, &[i, j], &mut args, &mut v, |x, w| {
                                let kv = k.eval(x);
                                if kv == 0.0 {
                                    return;
                                }
                                let mut w = w.to_vec();
                                w[j] = uj[s];
                                let hi = rates.antiderivative(i, j, &w).unwrap_or(f64::NAN);
                                w[j] = uj[r];
                                let lo = rates.antiderivative(i, j, &w).unwrap_or(f64::NAN);
                                drift += kv * (hi - lo);
                            });
                        }
                    }
                    let d = spec.epsilon + 0.5 * (a_bar[p] + a_bar[q]);
                    let beta = drift_weight * drift / ubar;
                    if 0.5 * beta.abs() <= d / h {
                        (d / h + 0.5 * beta, d / h - 0.5 * beta)
                    } else {
                        let z = beta * h / d;
                        (d / h * bernoulli(-z), d / h * bernoulli(z))
                    }
                })
                .collect();
            for (&(p, _, _), (a, b)) in axis_faces.iter().zip(coeffs) {
                op.set_face(axis, p, a, b);
            }
        }
        ops.push(op);
        a_bars.push(Field::new(g, a_bar)?);
    }
    Ok((ops, a_bars))
}

/// Frozen face-flux operators of the general-domain scheme, one per species.
pub fn general_fluxes(state: &SolverState, spec: &SystemSpec) -> Result<Vec<FluxOperator>> {
    Ok(general_fluxes_with_a_bar(state, spec)?.0)
}

pub(crate) fn step_general_with_a_bar(
    state: &SolverState,
    spec: &SystemSpec,
    dt: f64,
) -> Result<(SolverState, Vec<Field>)> {
    check_dt(dt)?;
    let (ops, a_bar) = general_fluxes_with_a_bar(state, spec)?;
    let mut out = Vec::with_capacity(ops.len());
    for (op, u) in ops.iter().zip(&state.fields) {
        let x = op.solve_implicit(dt, None, u.values())?;
        out.push(Field::new(*u.grid(), x)?);
    }
    let next = state.advanced(out, dt);
    next.check_positive().map_err(|e| Error::Aborted {
        step: next.step,
        reason: e.to_string(),
    })?;
    Ok((next, a_bar))
}

/// One semi-implicit step of the general-domain scheme with no-flux walls.
pub fn step_general_domain(state: &SolverState, spec: &SystemSpec, dt: f64) -> Result<SolverState> {
    Ok(step_general_with_a_bar(state, spec, dt)?.0)
}

/// Sampled growth constants `A` of the coefficient bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowthConstants {
    /// `sup μ_i(v) / (1 + Σ h_k(v_k))`, when the rates have a Laplace form.
    pub laplace: Option<f64>,
    /// `sup max(a_ii, |ã_ij|/v_i, |∂_i ã_ij|) / (1 + Σ h_k(v_k))`, when the
    /// rates have antiderivatives.
    pub general: Option<f64>,
    pub samples: usize,
}

pub fn growth_constants(rates: &dyn DiffusionRates, structure: &EntropyStructure) -> Result<GrowthConstants> {
    let n = rates.species();
    if structure.species() != n {
        return Err(invalid("entropy structure and rates disagree on the species count"));
    }
    let samples = default_sample_grid(n);
    let mut laplace = Some(0.0f64);
    let mut general = Some(0.0f64);
    for v in &samples {
        let weight = 1.0
            + structure
                .densities
                .iter()
                .zip(v)
                .map(|(h, z)| h.value(*z))
                .sum::<f64>();
        for i in 0..n {
            laplace = match (laplace, rates.laplace_rate(i, v)) {
                (Some(a), Some(mu)) => Some(a.max(mu.abs() / weight)),
                _ => None,
            };
            if let Some(a) = general {
                let mut m = rates.entry(i, i, v).abs();
                let mut ok = true;
                for j in (0..n).filter(|&j| j != i) {
                    match (rates.antiderivative(i, j, v), rates.antiderivative_self_partial(i, j, v)) {
                        (Some(t), Some(dt)) => m = m.max((t / v[i]).abs()).max(dt.abs()),
                        _ => ok = false,
                    }
                }
                general = ok.then_some(a.max(m / weight));
            }
        }
    }
    Ok(GrowthConstants {
        laplace,
        general,
        samples: samples.len(),
    })
}

/// Sup norms of a kernel and its derivatives over cell-centred tuples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelNorms {
    pub value: f64,
    pub gradient: f64,
    pub mixed: f64,
}

impl KernelNorms {
    pub fn of_kernel(k: &dyn InteractionKernel, g: &Grid) -> Result<Self> {
        if k.dim() != g.dim() {
            return Err(Error::GridMismatch);
        }
        check_cost(g, k.arity())?;
        let n = k.arity();
        let pts: Vec<[f64; 2]> = (0..g.len()).map(|p| g.point(p)).collect();
        let norms = (0..pts.len())
            .into_par_iter()
            .map(|first| {
                let mut out = [0.0f64; 3];
                let mut args = vec![pts[first]; n];
                for_each_tuple(pts.len(), n - 1, |t| {
                    for (s, &c) in t.iter().enumerate() {
                        args[s + 1] = pts[c];
                    }
                    out[0] = out[0].max(k.eval(&args).abs());
                    for j in 0..n {
                        let gr = k.gradient(&args, j);
                        out[1] = out[1].max(gr[0].hypot(gr[1]));
                        for i in (j + 1)..n {
                            out[2] = out[2].max(k.mixed_trace(&args, i, j).abs());
                        }
                    }
                });
                out
            })
            .reduce(|| [0.0; 3], |a, b| [a[0].max(b[0]), a[1].max(b[1]), a[2].max(b[2])]);
        Ok(Self {
            value: norms[0],
            gradient: norms[1],
            mixed: norms[2],
        })
    }

    pub fn max(&self) -> f64 {
        self.value.max(self.gradient).max(self.mixed)
    }
}
