//! Lagged-coefficient semi-implicit time steppers.
//!
//! Every stepper freezes its coefficients at the old state and solves one
//! linear system per species whose matrix is a column diagonally dominant
//! M-matrix, so mass is conserved up to the solve and positivity is kept.

mod general;
mod kolmogorov;
mod run;
mod torus;

use std::sync::Arc;

pub use general::{
    assemble_general_coefficients, general_fluxes, growth_constants, step_general_domain,
    GeneralCoefficients, GrowthConstants, KernelNorms,
};
pub use kolmogorov::step_kolmogorov;
pub use run::{run, RunOptions, Snapshot, StepDiagnostics, TrajectoryRecord};
pub use torus::{
    apply_dirichlet_penalisation, laplace_coefficients, laplace_rhs, step_local,
    step_torus_nonlocal,
};

use crate::entropy::EntropyStructure;
use crate::error::{invalid, Error, Result};
use crate::grid::{Boundary, Field, Grid};
use crate::kernels::{InteractionKernel, KernelWeights, TorusMollifier};
use crate::rates::DiffusionRates;

/// Interaction used by the system.
#[derive(Clone)]
pub enum KernelChoice {
    /// Pointwise coefficients.
    Local,
    /// Convolution with a torus mollifier (Laplace form).
    Torus(TorusMollifier),
    /// Multi-argument kernel for the general divergence-form scheme.
    Domain {
        kernel: Arc<dyn InteractionKernel>,
        weights: KernelWeights,
    },
}

impl std::fmt::Debug for KernelChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Local => write!(f, "Local"),
            Self::Torus(m) => write!(f, "Torus({} width {})", m.shape().name(), m.width()),
            Self::Domain { kernel, .. } => write!(f, "Domain(arity {})", kernel.arity()),
        }
    }
}

/// Relaxation `−(u_i − b_i)/ε_pen` on the masked region.
#[derive(Clone, Debug, PartialEq)]
pub struct Penalisation {
    pub epsilon: f64,
    pub targets: Vec<f64>,
    pub mask: Field,
}

#[derive(Clone)]
pub struct SystemSpec {
    pub grid: Grid,
    pub rates: Arc<dyn DiffusionRates>,
    pub structure: EntropyStructure,
    pub kernel: KernelChoice,
    pub epsilon: f64,
    pub penalisation: Option<Penalisation>,
}

impl std::fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemSpec")
            .field("grid", &self.grid)
            .field("species", &self.species())
            .field("kernel", &self.kernel)
            .field("epsilon", &self.epsilon)
            .field("penalisation", &self.penalisation.is_some())
            .finish()
    }
}

impl SystemSpec {
    pub fn new(
        grid: Grid,
        rates: Arc<dyn DiffusionRates>,
        structure: EntropyStructure,
        kernel: KernelChoice,
        epsilon: f64,
        penalisation: Option<Penalisation>,
    ) -> Result<Self> {
        let spec = Self {
            grid,
            rates,
            structure,
            kernel,
            epsilon,
            penalisation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn species(&self) -> usize {
        self.rates.species()
    }

    fn validate(&self) -> Result<()> {
        let n = self.species();
        if self.structure.species() != n {
            return Err(invalid(format!(
                "entropy structure has {} species, rates have {n}",
                self.structure.species()
            )));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(invalid(format!("epsilon must be nonnegative, got {}", self.epsilon)));
        }
        match &self.kernel {
            KernelChoice::Local => {
                if self.grid.boundary() == Boundary::Neumann {
                    return Err(invalid("Neumann boundaries require a domain kernel"));
                }
            }
            KernelChoice::Torus(m) => {
                if m.grid() != &self.grid {
                    return Err(Error::GridMismatch);
                }
            }
            KernelChoice::Domain { kernel, weights } => {
                if kernel.arity() != n {
                    return Err(invalid(format!(
                        "domain kernel has arity {}, system has {n} species",
                        kernel.arity()
                    )));
                }
                if kernel.dim() != self.grid.dim()
                    || weights.fields.len() != n
                    || weights.fields.iter().any(|w| w.grid() != &self.grid)
                {
                    return Err(Error::GridMismatch);
                }
                if !(self.epsilon > 0.0) {
                    return Err(invalid("the general-domain scheme needs epsilon > 0"));
                }
            }
        }
        if let Some(p) = &self.penalisation {
            if !(p.epsilon > 0.0) {
                return Err(invalid(format!("penalisation epsilon must be positive, got {}", p.epsilon)));
            }
            if p.targets.len() != n || p.targets.iter().any(|b| !(*b > 0.0)) {
                return Err(invalid("penalisation needs one positive target per species"));
            }
            if p.mask.grid() != &self.grid || !self.grid.is_periodic() {
                return Err(invalid("penalisation mask must live on the periodic system grid"));
            }
            if matches!(self.kernel, KernelChoice::Domain { .. }) {
                return Err(Error::Unsupported(
                    "penalisation is defined for the torus schemes".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub t: f64,
    pub fields: Vec<Field>,
    pub step: usize,
}

impl SolverState {
    pub fn new(fields: Vec<Field>) -> Result<Self> {
        let s = Self {
            t: 0.0,
            fields,
            step: 0,
        };
        s.check_positive()?;
        Ok(s)
    }

    pub fn check_positive(&self) -> Result<()> {
        for (species, f) in self.fields.iter().enumerate() {
            if let Some((index, &value)) = f.values().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(Error::NonPositiveState {
                    species,
                    index,
                    value,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn check_against(&self, spec: &SystemSpec) -> Result<()> {
        if self.fields.len() != spec.species() {
            return Err(invalid(format!(
                "state has {} species, system has {}",
                self.fields.len(),
                spec.species()
            )));
        }
        if self.fields.iter().any(|f| f.grid() != &spec.grid) {
            return Err(Error::GridMismatch);
        }
        self.check_positive()
    }

    /// Species values at flat index `p`.
    pub(crate) fn at(&self, p: usize) -> Vec<f64> {
        self.fields.iter().map(|f| f.values()[p]).collect()
    }

    pub(crate) fn advanced(&self, fields: Vec<Field>, dt: f64) -> Self {
        Self {
            t: self.t + dt,
            fields,
            step: self.step + 1,
        }
    }
}

/// One step of the stepper matching the kernel choice.
pub fn step(state: &SolverState, spec: &SystemSpec, dt: f64) -> Result<SolverState> {
    match (&spec.kernel, &spec.penalisation) {
        (KernelChoice::Domain { .. }, _) => step_general_domain(state, spec, dt),
        (_, Some(_)) => apply_dirichlet_penalisation(state, spec, dt),
        (KernelChoice::Torus(_), None) => step_torus_nonlocal(state, spec, dt),
        (KernelChoice::Local, None) => step_local(state, spec, dt),
    }
}

pub(crate) fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("time step must be positive, got {dt}")))
    }
}
