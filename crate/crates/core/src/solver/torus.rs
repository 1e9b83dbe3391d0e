use rayon::prelude::*;

use super::{check_dt, KernelChoice, SolverState, SystemSpec};
use crate::error::{invalid, Error, Result};
use crate::grid::Field;
use crate::kernels::TorusMollifier;
use crate::linalg::FluxOperator;
use crate::rates::DiffusionRates;

fn laplace_rate(rates: &dyn DiffusionRates, i: usize, w: &[f64]) -> Result<f64> {
    rates.laplace_rate(i, w).ok_or_else(|| {
        Error::Unsupported("the torus schemes need rates with a Laplace form".into())
    })
}

fn local_coefficients(state: &SolverState, rates: &dyn DiffusionRates) -> Result<Vec<Field>> {
    let g = *state.fields[0].grid();
    (0..rates.species())
        .map(|i| {
            let vals = (0..g.len())
                .map(|p| laplace_rate(rates, i, &state.at(p)))
                .collect::<Result<Vec<f64>>>()?;
            Field::new(g, vals)
        })
        .collect()
}

/// `c_i(x) = Σ_y h^d ρ(y) μ_i(w)` with `w_i = u_i(x)`. Species 1 sees every
/// other species at `x − y`; every other species sees species 1 at `x + y`
/// and the rest at `x`. For two species this is `μ_1(u_2) ⋆ ρ` and
/// `μ_2(u_1) ⋆ ρ̌`.
fn convolved_coefficients(
    state: &SolverState,
    rates: &dyn DiffusionRates,
    m: &TorusMollifier,
) -> Result<Vec<Field>> {
    let g = *m.grid();
    let n = rates.species();
    let vol = g.cell_volume();
    let support: Vec<([isize; 2], f64)> = m
        .field()
        .values()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(p, v)| (g.signed_offset(p), vol * v))
        .collect();
    if rates.laplace_rate(0, &vec![1.0; n]).is_none() {
        return Err(Error::Unsupported(
            "the torus schemes need rates with a Laplace form".into(),
        ));
    }
    let vals = &state.fields;
    (0..n)
        .map(|i| {
            let c: Vec<f64> = (0..g.len())
                .into_par_iter()
                .map(|p| {
                    let mut w = vec![0.0; n];
                    let mut acc = 0.0;
                    for &(y, weight) in &support {
                        let minus = g.shifted(p, [-y[0], -y[1]]);
                        let plus = g.shifted(p, y);
                        for (j, slot) in w.iter_mut().enumerate() {
                            let q = if j == i {
                                p
                            } else if i == 0 {
                                minus
                            } else if j == 0 {
                                plus
                            } else {
                                p
                            };
                            *slot = vals[j].values()[q];
                        }
                        acc += weight * rates.laplace_rate(i, &w).unwrap_or(f64::NAN);
                    }
                    acc
                })
                .collect();
            Field::new(g, c)
        })
        .collect()
}

/// Frozen coefficients `c_i` of the Laplace-form schemes (`μ_i(u)` when local).
pub fn laplace_coefficients(state: &SolverState, spec: &SystemSpec) -> Result<Vec<Field>> {
    state.check_against(spec)?;
    match &spec.kernel {
        KernelChoice::Local => local_coefficients(state, spec.rates.as_ref()),
        KernelChoice::Torus(m) => convolved_coefficients(state, spec.rates.as_ref(), m),
        KernelChoice::Domain { .. } => Err(Error::Unsupported(
            "Laplace-form coefficients are defined for local and torus kernels".into(),
        )),
    }
}

/// Semi-discrete right-hand side `Δ_d(c_i u_i)` at the given state.
pub fn laplace_rhs(state: &SolverState, spec: &SystemSpec) -> Result<Vec<Field>> {
    let c = laplace_coefficients(state, spec)?;
    Ok(c.iter()
        .zip(&state.fields)
        .map(|(ci, ui)| {
            let g = *ui.grid();
            Field::new(g, FluxOperator::laplace_form(ci).divergence(ui.values()))
                .expect("finite divergence")
        })
        .collect())
}

fn implicit_laplace_step(
    state: &SolverState,
    coeffs: &[Field],
    dt: f64,
    sink: Option<(&[f64], &[f64])>,
) -> Result<SolverState> {
    let mut out = Vec::with_capacity(coeffs.len());
    for (i, (c, u)) in coeffs.iter().zip(&state.fields).enumerate() {
        if let Some(k) = c.values().iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::Aborted {
                step: state.step + 1,
                reason: format!("negative diffusion coefficient for species {} at {k}", i + 1),
            });
        }
        let op = FluxOperator::laplace_form(c);
        let (s, rhs) = match sink {
            Some((mask_rate, targets)) => {
                let rhs: Vec<f64> = u
                    .values()
                    .iter()
                    .zip(mask_rate)
                    .map(|(v, m)| v + dt * m * targets[i])
                    .collect();
                (Some(mask_rate), rhs)
            }
            None => (None, u.values().to_vec()),
        };
        let x = op.solve_implicit(dt, s, &rhs)?;
        out.push(Field::new(*u.grid(), x)?);
    }
    let next = state.advanced(out, dt);
    next.check_positive().map_err(|e| Error::Aborted {
        step: next.step,
        reason: e.to_string(),
    })?;
    Ok(next)
}

fn require_periodic(spec: &SystemSpec) -> Result<()> {
    if spec.grid.is_periodic() {
        Ok(())
    } else {
        Err(invalid("the torus schemes need a periodic grid"))
    }
}

/// `(I − dt Δ_d(c_i ·)) u_i^{k+1} = u_i^k` with convolved frozen coefficients.
pub fn step_torus_nonlocal(state: &SolverState, spec: &SystemSpec, dt: f64) -> Result<SolverState> {
    check_dt(dt)?;
    require_periodic(spec)?;
    state.check_against(spec)?;
    let m = match &spec.kernel {
        KernelChoice::Torus(m) => m,
        _ => return Err(invalid("step_torus_nonlocal needs a torus mollifier")),
    };
    let c = convolved_coefficients(state, spec.rates.as_ref(), m)?;
    implicit_laplace_step(state, &c, dt, None)
}

/// The same step with pointwise coefficients `μ_i(u(x))`.
pub fn step_local(state: &SolverState, spec: &SystemSpec, dt: f64) -> Result<SolverState> {
    check_dt(dt)?;
    require_periodic(spec)?;
    state.check_against(spec)?;
    let c = local_coefficients(state, spec.rates.as_ref())?;
    implicit_laplace_step(state, &c, dt, None)
}

/// Torus (or local) step with the implicit relaxation
/// `−(u_i − b_i) 1_mask / ε_pen` added.
pub fn apply_dirichlet_penalisation(
    state: &SolverState,
    spec: &SystemSpec,
    dt: f64,
) -> Result<SolverState> {
    check_dt(dt)?;
    require_periodic(spec)?;
    state.check_against(spec)?;
    let p = spec
        .penalisation
        .as_ref()
        .ok_or_else(|| invalid("no penalisation configured"))?;
    if !(p.epsilon > 0.0) {
        return Err(invalid(format!("penalisation epsilon must be positive, got {}", p.epsilon)));
    }
    let c = laplace_coefficients(state, spec)?;
    let rate: Vec<f64> = p.mask.values().iter().map(|m| m / p.epsilon).collect();
    implicit_laplace_step(state, &c, dt, Some((&rate, &p.targets)))
}
