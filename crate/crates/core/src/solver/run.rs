use std::path::Path;

use super::general::step_general_with_a_bar;
use super::{
    assemble_general_coefficients, growth_constants, laplace_coefficients, step, GrowthConstants,
    KernelChoice, KernelNorms, SolverState, SystemSpec,
};
use crate::diagnostics::entropy_and_dissipation;
use crate::error::{invalid, Error, Result};
use crate::grid::{integrate, Field, Grid};

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub t_final: f64,
    pub dt: f64,
    /// Snapshot and full coefficient-check interval in steps.
    pub cadence: usize,
    /// Abort when `H` rises by more than `10⁻⁸ (1 + |H⁰|)` in one step.
    pub monitor_entropy: bool,
    /// Abort when coefficients exceed twice their growth bound.
    pub monitor_coefficients: bool,
}

impl RunOptions {
    /// `dt = T / 1000`, snapshots every 10 steps, all monitors on.
    pub fn new(t_final: f64) -> Self {
        Self {
            t_final,
            dt: t_final / 1000.0,
            cadence: 10,
            monitor_entropy: true,
            monitor_coefficients: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(invalid(format!("final time must be positive, got {}", self.t_final)));
        }
        if !(self.dt > 0.0) || self.dt > self.t_final * (1.0 + 1e-12) {
            return Err(invalid(format!("need 0 < dt <= T, got dt = {}", self.dt)));
        }
        if self.cadence == 0 {
            return Err(invalid("cadence must be at least 1"));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        ((self.t_final / self.dt) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Quantities recorded after every step (and for the initial state).
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    pub mass: Vec<f64>,
    pub entropy: f64,
    pub dissipation: f64,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// `∫ Σ_i c_i u_i Σ_j u_j` for Laplace-form systems.
    pub duality_integrand: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub fields: Vec<Field>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub grid: Grid,
    pub species: usize,
    pub cadence: usize,
    /// `min(1, min u⁰, 1 / max u⁰)`
    pub gamma: f64,
    pub growth: GrowthConstants,
    pub diagnostics: Vec<StepDiagnostics>,
    pub snapshots: Vec<Snapshot>,
}

impl TrajectoryRecord {
    pub fn initial_entropy(&self) -> f64 {
        self.diagnostics[0].entropy
    }

    pub fn final_state(&self) -> &Snapshot {
        self.snapshots.last().expect("record holds the initial snapshot")
    }

    /// Step lengths `t_k − t_{k−1}`, one per recorded step.
    pub fn step_lengths(&self) -> Vec<f64> {
        self.diagnostics.windows(2).map(|w| w[1].t - w[0].t).collect()
    }

    pub fn write_diagnostics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["step".to_string(), "t".to_string()];
        for i in 1..=self.species {
            header.push(format!("mass_{i}"));
        }
        header.push("entropy".into());
        header.push("dissipation".into());
        for i in 1..=self.species {
            header.push(format!("min_{i}"));
            header.push(format!("max_{i}"));
        }
        header.push("duality_integrand".into());
        w.write_record(&header)?;
        for d in &self.diagnostics {
            let mut row = vec![d.step.to_string(), d.t.to_string()];
            row.extend(d.mass.iter().map(|m| m.to_string()));
            row.push(d.entropy.to_string());
            row.push(d.dissipation.to_string());
            for (lo, hi) in d.min.iter().zip(&d.max) {
                row.push(lo.to_string());
                row.push(hi.to_string());
            }
            row.push(d.duality_integrand.map(|v| v.to_string()).unwrap_or_default());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `snapshot_<step>_u<i>.csv` files into `dir`.
    pub fn write_snapshots(&self, dir: &Path, binary: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for s in &self.snapshots {
            for (i, f) in s.fields.iter().enumerate() {
                let stem = format!("snapshot_{:06}_u{}", s.step, i + 1);
                if binary {
                    f.write_binary(&dir.join(format!("{stem}.bin")))?;
                } else {
                    f.write_csv(&dir.join(format!("{stem}.csv")))?;
                }
            }
        }
        Ok(())
    }
}

fn record(state: &SolverState, spec: &SystemSpec) -> Result<StepDiagnostics> {
    let (entropy, dissipation) = entropy_and_dissipation(state, spec)?;
    let duality_integrand = match spec.kernel {
        KernelChoice::Domain { .. } => None,
        _ => {
            let c = laplace_coefficients(state, spec)?;
            let g = spec.grid;
            let total: Vec<f64> = (0..g.len()).map(|p| state.fields.iter().map(|f| f.values()[p]).sum()).collect();
            let mut acc = 0.0;
            for (ci, ui) in c.iter().zip(&state.fields) {
                for p in 0..g.len() {
                    acc += ci.values()[p] * ui.values()[p] * total[p];
                }
            }
            Some(acc * g.cell_volume())
        }
    };
    Ok(StepDiagnostics {
        step: state.step,
        t: state.t,
        mass: state.fields.iter().map(integrate).collect(),
        entropy,
        dissipation,
        min: state.fields.iter().map(Field::min).collect(),
        max: state.fields.iter().map(Field::max).collect(),
        duality_integrand,
    })
}

fn snapshot(state: &SolverState) -> Snapshot {
    Snapshot {
        step: state.step,
        t: state.t,
        fields: state.fields.clone(),
    }
}

/// Pointwise coefficient bounds `A (1 + Σ_k h_k(u_k(x)) + κ (|Ω| + H))` with
/// the kernel factor `κ`, doubled before they trigger an abort.
struct Monitor {
    a: f64,
    kappa: f64,
    volume: f64,
}

impl Monitor {
    fn bound(&self, spec: &SystemSpec, state: &SolverState, p: usize, h_total: f64) -> f64 {
        let local: f64 = spec
            .structure
            .densities
            .iter()
            .zip(&state.fields)
            .map(|(h, f)| h.value(f.values()[p]))
            .sum();
        self.a * (1.0 + local + self.kappa * (self.volume + h_total))
    }

    fn check(
        &self,
        spec: &SystemSpec,
        state: &SolverState,
        h_total: f64,
        what: &str,
        fields: &[Field],
    ) -> Result<()> {
        for (i, f) in fields.iter().enumerate() {
            for (p, v) in f.values().iter().enumerate() {
                let b = self.bound(spec, state, p, h_total);
                if v.abs() > 2.0 * b {
                    return Err(Error::Aborted {
                        step: state.step + 1,
                        reason: format!(
                            "coefficient {what} of species {} reached {v:e} at {p}, twice the bound is {:e}",
                            i + 1,
                            2.0 * b
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

fn monitor(spec: &SystemSpec, growth: &GrowthConstants) -> Result<Option<Monitor>> {
    let g = spec.grid;
    let volume = g.length().powi(g.dim() as i32);
    Ok(match &spec.kernel {
        KernelChoice::Local => growth.laplace.map(|a| Monitor { a, kappa: 0.0, volume }),
        KernelChoice::Torus(m) => growth.laplace.map(|a| Monitor {
            a,
            kappa: m.field().sup_norm().max(1.0),
            volume,
        }),
        KernelChoice::Domain { kernel, .. } => match growth.general {
            Some(a) => {
                let norms = KernelNorms::of_kernel(kernel.as_ref(), &g)?;
                let n = spec.species() as i32;
                Some(Monitor {
                    a,
                    kappa: norms.max().max(1.0) * volume.max(1.0).powi(n - 1),
                    volume,
                })
            }
            None => None,
        },
    })
}

fn wrap(step: usize, e: Error) -> Error {
    match e {
        Error::Aborted { .. } => e,
        other => Error::Aborted {
            step,
            reason: other.to_string(),
        },
    }
}

/// Iterates the stepper selected by `spec` from `initial` to `t_final`.
pub fn run(spec: &SystemSpec, initial: Vec<Field>, opts: &RunOptions) -> Result<TrajectoryRecord> {
    opts.validate()?;
    let mut state = SolverState::new(initial)?;
    state.check_against(spec)?;
    let gamma = state
        .fields
        .iter()
        .map(|f| f.min().min(1.0 / f.max()))
        .fold(1.0, f64::min);
    let growth = growth_constants(spec.rates.as_ref(), &spec.structure)?;
    let mon = if opts.monitor_coefficients {
        monitor(spec, &growth)?
    } else {
        None
    };

    let first = record(&state, spec)?;
    let h0 = first.entropy;
    let tol = 1e-8 * (1.0 + h0.abs());
    let mut diagnostics = vec![first];
    let mut snapshots = vec![snapshot(&state)];
    let steps = opts.steps();
    for k in 0..steps {
        let dt = if k + 1 == steps {
            opts.t_final - state.t
        } else {
            opts.dt
        };
        let h_prev = diagnostics.last().expect("nonempty").entropy;
        let full_check = (k + 1) % opts.cadence == 0;
        let next = match &spec.kernel {
            KernelChoice::Domain { .. } if spec.penalisation.is_none() => {
                let (next, a_bar) = step_general_with_a_bar(&state, spec, dt).map_err(|e| wrap(k + 1, e))?;
                if let Some(m) = &mon {
                    m.check(spec, &state, h_prev, "a", &a_bar)?;
                    if full_check {
                        let c = assemble_general_coefficients(&state, spec).map_err(|e| wrap(k + 1, e))?;
                        m.check(spec, &state, h_prev, "c", &c.c_bar)?;
                        for b in &c.b_bar {
                            m.check(spec, &state, h_prev, "b", b)?;
                        }
                    }
                }
                next
            }
            _ => {
                if let Some(m) = &mon {
                    let c = laplace_coefficients(&state, spec).map_err(|e| wrap(k + 1, e))?;
                    m.check(spec, &state, h_prev, "mu", &c)?;
                }
                step(&state, spec, dt).map_err(|e| wrap(k + 1, e))?
            }
        };
        state = next;
        let d = record(&state, spec).map_err(|e| wrap(state.step, e))?;
        if opts.monitor_entropy && d.entropy > h_prev + tol {
            return Err(Error::Aborted {
                step: state.step,
                reason: format!("entropy rose from {h_prev:e} to {:e}", d.entropy),
            });
        }
        diagnostics.push(d);
        if full_check || k + 1 == steps {
            snapshots.push(snapshot(&state));
        }
    }
    Ok(TrajectoryRecord {
        grid: spec.grid,
        species: spec.species(),
        cadence: opts.cadence,
        gamma,
        growth,
        diagnostics,
        snapshots,
    })
}
