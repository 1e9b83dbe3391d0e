//! Entropy, dissipation, maximum-principle and duality diagnostics, and the
//! nonlocal-to-local convergence study.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::{centred_gradient, gradient_norm_squared, integrate, l2_norm, laplacian, Field};
use crate::kernels::{make_torus_mollifier, MollifierShape};
use crate::solver::{
    general_fluxes, run, step_kolmogorov, KernelChoice, RunOptions, SolverState,
    SystemSpec, TrajectoryRecord,
};

/// `H = Σ_i ∫ h_i(u_i)` and the dissipation lower bound `D`.
///
/// On the torus `D = Σ_i ∫ α_i(u_i)² |∇u_i|²`; with a domain kernel
/// `D = Σ_i ∫ (ε h_i''(u_i) + α_i(u_i)² w_i) |∇u_i|²`.
pub fn entropy_and_dissipation(state: &SolverState, spec: &SystemSpec) -> Result<(f64, f64)> {
    state.check_positive()?;
    if state.fields.len() != spec.species() {
        return Err(invalid("state and system disagree on the species count"));
    }
    let mut h = 0.0;
    let mut d = 0.0;
    for (i, u) in state.fields.iter().enumerate() {
        let density = &spec.structure.densities[i];
        let alpha = &spec.structure.dissipations[i];
        h += integrate(&u.map(|z| density.value(z)));
        let grad2 = gradient_norm_squared(u);
        let weight: Vec<f64> = match &spec.kernel {
            KernelChoice::Domain { weights, .. } => u
                .values()
                .iter()
                .zip(weights.fields[i].values())
                .map(|(&z, &w)| spec.epsilon * density.second_derivative(z) + alpha.squared(z) * w)
                .collect(),
            _ => u.values().iter().map(|&z| alpha.squared(z)).collect(),
        };
        d += u.grid().cell_volume() * weight.iter().zip(grad2.values()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok((h, d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyCheck {
    /// `H_k + Σ_{j≤k} dt_j D_j ≤ H⁰ + k·10⁻⁸(1 + |H⁰|)` for every `k`.
    pub inequality_passed: bool,
    /// `H_k ≤ H_{k−1} + 10⁻⁸(1 + |H⁰|)` for every `k`.
    pub monotone_passed: bool,
    /// Largest value of `H_k + Σ dt D − H⁰ − tol_k` (negative when passing).
    pub worst_margin: f64,
    pub worst_step: usize,
    /// Largest single-step increase of `H`.
    pub worst_increase: f64,
    /// `D_k ≥ 0` for every recorded step.
    pub dissipation_passed: bool,
}

impl EntropyCheck {
    pub fn passed(&self) -> bool {
        self.inequality_passed && self.monotone_passed && self.dissipation_passed
    }
}

pub fn check_entropy_inequality(record: &TrajectoryRecord) -> EntropyCheck {
    let diag = &record.diagnostics;
    let h0 = diag[0].entropy;
    let unit = 1e-8 * (1.0 + h0.abs());
    let mut cumulative = 0.0;
    let mut worst_margin = f64::NEG_INFINITY;
    let mut worst_step = 0;
    let mut worst_increase = f64::NEG_INFINITY;
    for (k, w) in diag.windows(2).enumerate() {
        let dt = w[1].t - w[0].t;
        cumulative += dt * w[1].dissipation;
        let margin = w[1].entropy + cumulative - h0 - (k + 1) as f64 * unit;
        if margin > worst_margin {
            worst_margin = margin;
            worst_step = w[1].step;
        }
        worst_increase = worst_increase.max(w[1].entropy - w[0].entropy);
    }
    if diag.len() < 2 {
        worst_margin = -unit;
        worst_increase = 0.0;
    }
    EntropyCheck {
        inequality_passed: worst_margin <= 0.0,
        monotone_passed: worst_increase <= unit,
        worst_margin,
        worst_step,
        worst_increase,
        dissipation_passed: diag.iter().all(|d| d.dissipation >= 0.0),
    }
}

/// `(γ e^{−A B λ}, γ⁻¹ e^{A B λ})` with `B = T (1 + H_init)` and
/// `λ = ‖Δρ‖∞`.
pub fn max_principle_envelope(gamma: f64, a_const: f64, t: f64, h_init: f64, lap_rho_inf: f64) -> Result<(f64, f64)> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    for (name, v) in [("A", a_const), ("T", t), ("H_init", h_init), ("lap_rho_inf", lap_rho_inf)] {
        if !(v >= 0.0) {
            return Err(invalid(format!("{name} must be nonnegative, got {v}")));
        }
    }
    let e = a_const * t * (1.0 + h_init) * lap_rho_inf;
    Ok((gamma * (-e).exp(), e.exp() / gamma))
}

/// Envelope of a recorded torus run with slack `η`: `(lower (1 − η), upper (1 + η))`.
pub fn run_envelope(record: &TrajectoryRecord, spec: &SystemSpec, slack: f64) -> Result<(f64, f64)> {
    let lambda = match &spec.kernel {
        KernelChoice::Torus(m) => m.laplacian_sup(),
        _ => return Err(Error::Unsupported("the envelope is defined for torus runs".into())),
    };
    let a = record
        .growth
        .laplace
        .ok_or_else(|| Error::Unsupported("the envelope needs Laplace-form rates".into()))?;
    let t = record.diagnostics.last().expect("nonempty").t;
    let (lo, hi) = max_principle_envelope(record.gamma, a, t, record.initial_entropy().max(0.0), lambda)?;
    Ok((lo * (1.0 - slack), hi * (1.0 + slack)))
}

/// Observed extrema over the whole record against an envelope.
pub fn envelope_contains(record: &TrajectoryRecord, envelope: (f64, f64)) -> bool {
    record.diagnostics.iter().all(|d| {
        d.min.iter().all(|m| *m >= envelope.0) && d.max.iter().all(|m| *m <= envelope.1)
    })
}

/// Cross-diffusion duality functional and the bound it is compared with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualityReport {
    /// `Σ_k dt ∫ (c_1 u_1 + c_2 u_2)(u_1 + u_2)` at `t_k`, `k ≥ 1`.
    pub lhs: f64,
    /// `(1 + 2 A B)(∫ (u_1⁰)² + ∫ (u_2⁰)²)`
    pub rhs: f64,
}

impl DualityReport {
    pub fn ratio(&self) -> f64 {
        self.lhs / self.rhs
    }
}

pub fn duality_functional(record: &TrajectoryRecord, spec: &SystemSpec) -> Result<DualityReport> {
    if spec.species() != 2 {
        return Err(Error::Unsupported("the duality functional is defined for two species".into()));
    }
    let a = record
        .growth
        .laplace
        .ok_or_else(|| Error::Unsupported("the duality functional needs Laplace-form rates".into()))?;
    let mut lhs = 0.0;
    for w in record.diagnostics.windows(2) {
        let v = w[1]
            .duality_integrand
            .ok_or_else(|| Error::Unsupported("record has no duality integrand".into()))?;
        lhs += (w[1].t - w[0].t) * v;
    }
    let t = record.diagnostics.last().expect("nonempty").t;
    let b = t * (1.0 + record.initial_entropy().max(0.0));
    let u0 = &record.snapshots[0].fields;
    let l2: f64 = u0.iter().map(|u| l2_norm(u).powi(2)).sum();
    Ok(DualityReport {
        lhs,
        rhs: (1.0 + 2.0 * a * b) * l2,
    })
}

/// Kolmogorov duality quotient `Σ_k dt ∫ μ z_k² / ((1 + T ∫ μ) ∫ (z⁰)²)` for a
/// fixed `μ` and `G = 0`.
pub fn kolmogorov_duality_ratio(z0: &Field, mu: &Field, t_final: f64, steps: usize) -> Result<f64> {
    if steps == 0 {
        return Err(invalid("need at least one step"));
    }
    let dt = t_final / steps as f64;
    let zero = Field::zeros(*z0.grid());
    let mut z = z0.clone();
    let mut lhs = 0.0;
    for _ in 0..steps {
        z = step_kolmogorov(&z, mu, dt, &zero)?;
        lhs += dt * integrate(&mu.zip_map(&z, |m, v| m * v * v)?);
    }
    Ok(lhs / ((1.0 + t_final * integrate(mu)) * l2_norm(z0).powi(2)))
}

/// Per-step diagnostics together with the envelope and pass flags.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub mass: Vec<f64>,
    pub entropy: f64,
    pub dissipation: f64,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub duality_integrand: Option<f64>,
    pub envelope: Option<(f64, f64)>,
    pub entropy_ok: bool,
    pub envelope_ok: bool,
}

/// Flags every recorded step against the entropy inequality and (on torus
/// runs) the maximum-principle envelope with slack `0.1`.
pub fn diagnostics_records(record: &TrajectoryRecord, spec: &SystemSpec) -> Vec<DiagnosticsRecord> {
    let envelope = run_envelope(record, spec, 0.1).ok();
    let h0 = record.initial_entropy();
    let unit = 1e-8 * (1.0 + h0.abs());
    let mut cumulative = 0.0;
    let mut prev_t = record.diagnostics[0].t;
    record
        .diagnostics
        .iter()
        .enumerate()
        .map(|(k, d)| {
            if k > 0 {
                cumulative += (d.t - prev_t) * d.dissipation;
            }
            prev_t = d.t;
            let envelope_ok = envelope
                .map(|(lo, hi)| d.min.iter().all(|m| *m >= lo) && d.max.iter().all(|m| *m <= hi))
                .unwrap_or(true);
            DiagnosticsRecord {
                t: d.t,
                mass: d.mass.clone(),
                entropy: d.entropy,
                dissipation: d.dissipation,
                min: d.min.clone(),
                max: d.max.clone(),
                duality_integrand: d.duality_integrand,
                envelope,
                entropy_ok: d.entropy + cumulative <= h0 + k as f64 * unit,
                envelope_ok,
            }
        })
        .collect()
}

/// Relative mass drift `max_k |∫u_i(t_k) − ∫u_i⁰| / |∫u_i⁰|` per species.
pub fn mass_drift(record: &TrajectoryRecord) -> Vec<f64> {
    let m0 = &record.diagnostics[0].mass;
    (0..record.species)
        .map(|i| {
            record
                .diagnostics
                .iter()
                .map(|d| (d.mass[i] - m0[i]).abs() / m0[i].abs().max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceEntry {
    pub width: f64,
    /// `Σ_snapshots Δt h^d Σ_i Σ |u_i − u_i^ref|`
    pub l1_qt: f64,
    /// `(Σ_i ‖u_i(T) − u_i^ref(T)‖²)^{1/2}`
    pub l2_final: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub shape: MollifierShape,
    pub entries: Vec<ConvergenceEntry>,
    /// `d_{k+1} ≤ 1.05 d_k` for consecutive widths.
    pub monotone: bool,
}

impl ConvergenceReport {
    /// `d_last / d_first`
    pub fn last_over_first(&self) -> f64 {
        let first = self.entries.first().map(|e| e.l1_qt).unwrap_or(f64::NAN);
        let last = self.entries.last().map(|e| e.l1_qt).unwrap_or(f64::NAN);
        last / first
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["width", "L1_QT", "L2_final"])?;
        for e in &self.entries {
            w.write_record([e.width.to_string(), e.l1_qt.to_string(), e.l2_final.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "nonlocal to local convergence ({} kernel)", self.shape.name());
        let _ = writeln!(s, "{:>10} {:>14} {:>14}", "width", "L1(Q_T)", "L2(T)");
        for e in &self.entries {
            let _ = writeln!(s, "{:>10.4} {:>14.6e} {:>14.6e}", e.width, e.l1_qt, e.l2_final);
        }
        let _ = writeln!(s, "last/first: {:.4}", self.last_over_first());
        let _ = writeln!(
            s,
            "verdict: {}",
            if self.monotone {
                "monotone nonincreasing (5% slack)"
            } else {
                "NOT monotone"
            }
        );
        s
    }

    /// Gnuplot script plotting the CSV written by [`Self::write_csv`].
    pub fn gnuplot_script(&self, csv_name: &str) -> String {
        format!(
            "set datafile separator ','\nset logscale xy\nset xlabel 'kernel width'\nset ylabel 'distance'\n\
             plot '{csv_name}' using 1:2 skip 1 with linespoints title 'L1(Q_T)', \\\n     \
             '{csv_name}' using 1:3 skip 1 with linespoints title 'L2(T)'\n"
        )
    }
}

fn distances(a: &TrajectoryRecord, b: &TrajectoryRecord) -> Result<(f64, f64)> {
    if a.snapshots.len() != b.snapshots.len() {
        return Err(invalid("trajectories were recorded at different cadences"));
    }
    let mut l1 = 0.0;
    for (k, (sa, sb)) in a.snapshots.iter().zip(&b.snapshots).enumerate().skip(1) {
        let dt = sa.t - a.snapshots[k - 1].t;
        for (fa, fb) in sa.fields.iter().zip(&sb.fields) {
            l1 += dt * integrate(&fa.zip_map(fb, |x, y| (x - y).abs())?);
        }
    }
    let fa = &a.final_state().fields;
    let fb = &b.final_state().fields;
    let mut l2 = 0.0;
    for (x, y) in fa.iter().zip(fb) {
        l2 += l2_norm(&x.zip_map(y, |p, q| p - q)?).powi(2);
    }
    Ok((l1, l2.sqrt()))
}

/// Runs the torus scheme for each width (strictly decreasing) and the local
/// reference on the same data, in parallel, and compares them in `L¹(Q_T)`.
pub fn convergence_study(
    base: &SystemSpec,
    shape: MollifierShape,
    widths: &[f64],
    initial: &[Field],
    opts: &RunOptions,
) -> Result<ConvergenceReport> {
    if widths.is_empty() || widths.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(invalid("widths must be nonempty and strictly decreasing"));
    }
    if !base.grid.is_periodic() {
        return Err(invalid("the convergence study runs on the torus"));
    }
    let with_kernel = |kernel: KernelChoice| -> Result<SystemSpec> {
        SystemSpec::new(
            base.grid,
            base.rates.clone(),
            base.structure.clone(),
            kernel,
            base.epsilon,
            base.penalisation.clone(),
        )
    };
    let mut specs = vec![with_kernel(KernelChoice::Local)?];
    for &w in widths {
        specs.push(with_kernel(KernelChoice::Torus(make_torus_mollifier(&base.grid, w, shape)?))?);
    }
    let records: Vec<TrajectoryRecord> = specs
        .par_iter()
        .map(|s| run(s, initial.to_vec(), opts))
        .collect::<Result<_>>()?;
    let reference = &records[0];
    let entries = widths
        .iter()
        .zip(&records[1..])
        .map(|(&width, r)| {
            let (l1_qt, l2_final) = distances(r, reference)?;
            Ok(ConvergenceEntry {
                width,
                l1_qt,
                l2_final,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let monotone = entries.windows(2).all(|w| w[1].l1_qt <= 1.05 * w[0].l1_qt);
    Ok(ConvergenceReport {
        shape,
        entries,
        monotone,
    })
}

/// `L²` norm of the difference between the divergence-form right-hand side
/// of the general scheme and its Laplace form with correctors,
/// `εΔu_1 + Δ(u_1 ∫K μ_1 dy) − ∇(u_1 ∫(∂_x K + ∂_y K) μ_1 dy)` and the
/// analogue for species 2, summed over both species.
pub fn laplace_form_consistency(state: &SolverState, spec: &SystemSpec) -> Result<f64> {
    let kernel = match &spec.kernel {
        KernelChoice::Domain { kernel, .. } => kernel.clone(),
        _ => return Err(invalid("laplace_form_consistency needs a domain kernel")),
    };
    let g = spec.grid;
    if spec.species() != 2 || g.dim() != 1 {
        return Err(Error::Unsupported("laplace_form_consistency is defined for n = 2 in 1D".into()));
    }
    state.check_against(spec)?;
    let ops = general_fluxes(state, spec)?;
    let h = g.cell_size();
    let pts: Vec<[f64; 2]> = (0..g.len()).map(|p| g.point(p)).collect();
    let mut total = 0.0;
    for i in 0..2 {
        let u = &state.fields[i];
        let other = &state.fields[1 - i];
        let mut s = vec![0.0; g.len()];
        let mut q = vec![0.0; g.len()];
        for p in 0..g.len() {
            let (mut sa, mut qa) = (0.0, 0.0);
            for r in 0..g.len() {
                let args = if i == 0 { [pts[p], pts[r]] } else { [pts[r], pts[p]] };
                let mut v = [0.0; 2];
                v[i] = u.values()[p];
                v[1 - i] = other.values()[r];
                let mu = spec
                    .rates
                    .laplace_rate(i, &v)
                    .ok_or_else(|| Error::Unsupported("rates have no Laplace form".into()))?;
                sa += kernel.eval(&args) * mu;
                qa += (kernel.gradient(&args, 0)[0] + kernel.gradient(&args, 1)[0]) * mu;
            }
            s[p] = h * sa * u.values()[p];
            q[p] = h * qa * u.values()[p];
        }
        let lap_u = laplacian(u);
        let lap_s = laplacian(&Field::new(g, s)?);
        let dq = centred_gradient(&Field::new(g, q)?, 0);
        let form_a = ops[i].divergence(u.values());
        let diff: Vec<f64> = (0..g.len())
            .map(|p| form_a[p] - (spec.epsilon * lap_u.values()[p] + lap_s.values()[p] - dq.values()[p]))
            .collect();
        total += l2_norm(&Field::new(g, diff)?).powi(2);
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::laplace_coefficients;
    use crate::entropy::{make_skt_structure, make_skt_structure_with, EntropyDensity, EntropyStructure, SktCoefficients, SktDissipation};
    use crate::grid::{Boundary, Grid};
    use crate::kernels::{domain_kernel_weights, kernel_weights, make_domain_kernel, ConvolutionKernel, InteractionKernel, ZeroKernel};
    use crate::rates::ConstantRates;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn torus_spec(n: usize, c: SktCoefficients, dissipation: SktDissipation) -> SystemSpec {
        let g = Grid::torus(1, n).unwrap();
        let s = make_skt_structure_with(&c, dissipation).unwrap();
        let m = make_torus_mollifier(&g, 0.2, MollifierShape::Bump).unwrap();
        SystemSpec::new(g, Arc::new(c), s, KernelChoice::Torus(m), 0.0, None).unwrap()
    }

    fn cosine(g: Grid) -> Vec<Field> {
        vec![
            Field::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos()),
            Field::from_fn(g, |x| 1.0 + 0.4 * (4.0 * PI * x[0]).cos()),
        ]
    }

    #[test]
    fn unit_state_has_no_entropy() {
        let sp = torus_spec(16, SktCoefficients::two_species(0.1, 0.1, 1.0, 1.0), SktDissipation::Derived);
        let g = sp.grid;
        let st = SolverState::new(vec![Field::constant(g, 1.0), Field::constant(g, 1.0)]).unwrap();
        assert_eq!(entropy_and_dissipation(&st, &sp).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn entropy_matches_fine_quadrature() {
        let sp = torus_spec(128, SktCoefficients::two_species(0.1, 0.1, 1.0, 1.0), SktDissipation::Derived);
        let g = sp.grid;
        let st = SolverState::new(vec![
            Field::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos()),
            Field::constant(g, 1.0),
        ])
        .unwrap();
        let (h, _) = entropy_and_dissipation(&st, &sp).unwrap();
        // Fine composite Simpson oracle for ∫ ψ(1 + 0.5 cos 2πx).
        let m = 20000;
        let f = |x: f64| {
            let z: f64 = 1.0 + 0.5 * (2.0 * PI * x).cos();
            z * z.ln() - z + 1.0
        };
        let hh = 1.0 / m as f64;
        let mut acc = f(0.0) + f(1.0);
        for k in 1..m {
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * hh);
        }
        let oracle = acc * hh / 3.0;
        assert!((h - oracle).abs() < 1e-6, "{h} {oracle}");
    }

    #[test]
    fn doubling_densities_doubles_entropy() {
        let mut sp = torus_spec(32, SktCoefficients::two_species(0.1, 0.1, 1.0, 1.0), SktDissipation::Derived);
        let st = SolverState::new(cosine(sp.grid)).unwrap();
        let (h1, _) = entropy_and_dissipation(&st, &sp).unwrap();
        sp.structure.densities = sp.structure.densities.iter().map(|d| d.scaled(2.0)).collect();
        let (h2, _) = entropy_and_dissipation(&st, &sp).unwrap();
        assert_eq!(h2, 2.0 * h1);
    }

    fn heat_record(n: usize, t: f64) -> (SystemSpec, TrajectoryRecord) {
        let c = SktCoefficients {
            d: vec![0.3, 0.3],
            d_cross: vec![vec![0.0; 2]; 2],
            pi: vec![1.0, 1.0],
        };
        let sp = torus_spec(n, c, SktDissipation::Derived);
        let mut o = RunOptions::new(t);
        o.dt = 1e-3;
        let r = run(&sp, cosine(sp.grid), &o).unwrap();
        (sp, r)
    }

    #[test]
    fn entropy_inequality_holds_for_heat_and_flags_fault() {
        let (_, r) = heat_record(64, 0.1);
        let c = check_entropy_inequality(&r);
        assert!(c.passed(), "{c:?}");
        assert!(c.worst_margin < 0.0);
        let mut bad = r.clone();
        for d in bad.diagnostics.iter_mut().skip(1) {
            d.dissipation = -d.dissipation - 1.0;
        }
        let mut worse = r;
        for d in worse.diagnostics.iter_mut().skip(1) {
            d.dissipation *= 1e3;
        }
        assert!(check_entropy_inequality(&worse).worst_margin > 0.0);
        let flagged = check_entropy_inequality(&bad);
        assert!(!flagged.dissipation_passed && !flagged.passed());
    }

    #[test]
    fn constant_trajectory_has_equality() {
        let sp = torus_spec(16, SktCoefficients::two_species(0.1, 0.1, 1.0, 1.0), SktDissipation::Derived);
        let g = sp.grid;
        let r = run(&sp, vec![Field::constant(g, 1.0), Field::constant(g, 1.0)], &RunOptions::new(0.1)).unwrap();
        let c = check_entropy_inequality(&r);
        assert!(c.passed());
        assert!(r.diagnostics.iter().all(|d| d.entropy == 0.0 && d.dissipation == 0.0));
    }

    #[test]
    fn envelope_examples() {
        assert_eq!(max_principle_envelope(0.5, 2.0, 1.0, 3.0, 0.0).unwrap(), (0.5, 2.0));
        let (lo, hi) = max_principle_envelope(1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        assert!((lo - (-1.0f64).exp()).abs() < 1e-15);
        assert!((hi - 1.0f64.exp()).abs() < 1e-15);
        assert!(max_principle_envelope(0.0, 1.0, 1.0, 0.0, 1.0).is_err());
        assert!(max_principle_envelope(1.5, 1.0, 1.0, 0.0, 1.0).is_err());
        let a = max_principle_envelope(0.5, 1.0, 1.0, 1.0, 1.0).unwrap();
        for b in [
            max_principle_envelope(0.5, 2.0, 1.0, 1.0, 1.0).unwrap(),
            max_principle_envelope(0.5, 1.0, 2.0, 1.0, 1.0).unwrap(),
            max_principle_envelope(0.5, 1.0, 1.0, 2.0, 1.0).unwrap(),
            max_principle_envelope(0.5, 1.0, 1.0, 1.0, 2.0).unwrap(),
        ] {
            assert!(b.0 < a.0 && b.1 > a.1);
        }
    }

    #[test]
    fn envelope_contains_compliant_run() {
        let sp = torus_spec(64, SktCoefficients::two_species(0.1, 0.1, 1.0, 1.0), SktDissipation::Derived);
        let mut o = RunOptions::new(0.2);
        o.dt = 1e-3;
        let r = run(&sp, cosine(sp.grid), &o).unwrap();
        let env = run_envelope(&r, &sp, 0.1).unwrap();
        assert!(envelope_contains(&r, env));
        assert!(diagnostics_records(&r, &sp).iter().all(|d| d.envelope_ok && d.entropy_ok));
    }

    #[test]
    fn duality_constant_closed_form() {
        // μ_i ≡ 1 via d_i = 1 and no cross terms; u ≡ 1 gives integrand 4 per unit time.
        let sp = torus_spec(16, SktCoefficients::two_species(1.0, 1.0, 0.0, 0.0), SktDissipation::Derived);
        let g = sp.grid;
        let mut o = RunOptions::new(1.0);
        o.dt = 0.01;
        let r = run(&sp, vec![Field::constant(g, 1.0), Field::constant(g, 1.0)], &o).unwrap();
        let d = duality_functional(&r, &sp).unwrap();
        assert!((d.lhs - 4.0).abs() < 1e-12);
        // Second route: quadrature of the integrand from the recorded states.
        let c = laplace_coefficients(&SolverState::new(r.final_state().fields.clone()).unwrap(), &sp).unwrap();
        let integrand = integrate(&c[0].zip_map(&c[1], |a, b| 2.0 * (a + b)).unwrap());
        assert!((integrand - 4.0).abs() < 1e-12);
        let mut zero = r.clone();
        zero.diagnostics.truncate(1);
        assert_eq!(duality_functional(&zero, &sp).unwrap().lhs, 0.0);
    }

    #[test]
    fn duality_is_invariant_under_relabelling() {
        let g = Grid::torus(1, 32).unwrap();
        let rho = Field::from_fn(g, |x| {
            let z = if x[0] > 0.5 { x[0] - 1.0 } else { x[0] };
            if z.abs() < 0.15 {
                (0.15 - z.abs()) * (1.0 + 3.0 * z)
            } else {
                0.0
            }
        });
        let rho = rho.scaled(1.0 / integrate(&rho));
        let make = |d1: f64, d2: f64, d12: f64, d21: f64, kernel: Field| {
            let c = SktCoefficients::two_species(d1, d2, d12, d21);
            let s = make_skt_structure(&c).unwrap();
            let m = crate::kernels::TorusMollifier::from_field(kernel).unwrap();
            SystemSpec::new(g, Arc::new(c), s, KernelChoice::Torus(m), 0.0, None).unwrap()
        };
        let a = make(0.1, 0.2, 1.0, 2.0, rho.clone());
        let b = make(0.2, 0.1, 2.0, 1.0, crate::grid::reflect(&rho));
        let init = cosine(g);
        let swapped = vec![init[1].clone(), init[0].clone()];
        let mut o = RunOptions::new(0.05);
        o.dt = 1e-3;
        let ra = run(&a, init, &o).unwrap();
        let rb = run(&b, swapped, &o).unwrap();
        let da = duality_functional(&ra, &a).unwrap();
        let db = duality_functional(&rb, &b).unwrap();
        assert!((da.lhs - db.lhs).abs() < 1e-10 * da.lhs);
    }

    #[test]
    fn kolmogorov_duality_is_stable_under_refinement() {
        let ratios: Vec<f64> = [32, 64, 128]
            .iter()
            .map(|&n| {
                let g = Grid::torus(1, n).unwrap();
                let mu = Field::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).sin());
                let z0 = Field::from_fn(g, |x| 1.0 + 0.8 * (2.0 * PI * x[0]).cos());
                kolmogorov_duality_ratio(&z0, &mu, 0.5, 500).unwrap()
            })
            .collect();
        for r in &ratios {
            assert!((r / ratios[0] - 1.0).abs() < 0.2);
        }
    }

    #[test]
    fn convergence_study_is_deterministic_and_delta_closes() {
        let sp = torus_spec(32, SktCoefficients::two_species(0.1, 0.1, 1.0, 1.0), SktDissipation::Derived);
        let mut o = RunOptions::new(0.05);
        o.dt = 1e-3;
        let init = cosine(sp.grid);
        let widths = [0.3, 0.2, 2.0 / 32.0];
        let r = convergence_study(&sp, MollifierShape::Bump, &widths, &init, &o).unwrap();
        assert!(r.entries[2].l1_qt <= 1e-12, "{:?}", r.entries);
        let again = convergence_study(&sp, MollifierShape::Bump, &widths, &init, &o).unwrap();
        assert_eq!(r, again);
        assert!(convergence_study(&sp, MollifierShape::Bump, &[0.1, 0.2], &init, &o).is_err());
        assert!(r.to_text().contains("verdict"));
    }

    fn domain_spec(n: usize, kernel: Arc<dyn InteractionKernel>, weights: crate::kernels::KernelWeights, g: Grid) -> SystemSpec {
        let c = SktCoefficients::two_species(0.1, 0.1, 1.0, 1.0);
        let s = make_skt_structure_with(&c, SktDissipation::Derived).unwrap();
        let _ = n;
        SystemSpec::new(g, Arc::new(c), s, KernelChoice::Domain { kernel, weights }, 1e-2, None).unwrap()
    }

    #[test]
    fn consistency_vanishes_for_convolution_and_zero_kernels() {
        let g = Grid::torus(1, 32).unwrap();
        let m = make_torus_mollifier(&g, 0.3, MollifierShape::Bump).unwrap();
        let k: Arc<dyn InteractionKernel> = Arc::new(ConvolutionKernel::new(m).unwrap());
        let w = kernel_weights(k.as_ref(), &g).unwrap();
        let sp = domain_spec(32, k, w, g);
        let st = SolverState::new(cosine(g)).unwrap();
        assert!(laplace_form_consistency(&st, &sp).unwrap() <= 1e-10);

        let gb = Grid::unit_box(1, 32).unwrap();
        let z: Arc<dyn InteractionKernel> = Arc::new(ZeroKernel { arity: 2, dim: 1 });
        let w = kernel_weights(z.as_ref(), &gb).unwrap();
        let mut sp = domain_spec(32, z, w, gb);
        sp.epsilon = 1e-2;
        // Both sides reduce to εΔ_d u.
        let st = SolverState::new(cosine(gb)).unwrap();
        assert!(laplace_form_consistency(&st, &sp).unwrap() <= 1e-10);
    }

    #[test]
    fn consistency_residual_is_second_order() {
        let res: Vec<f64> = [32, 64]
            .iter()
            .map(|&n| {
                let g = Grid::new(1, n, 1.0, Boundary::Neumann).unwrap();
                let k = make_domain_kernel(&g, 2, 0.1, 0.05, 0.44).unwrap();
                let w = domain_kernel_weights(&k, &g).unwrap();
                let sp = domain_spec(n, Arc::new(k), w, g);
                let st = SolverState::new(cosine(g)).unwrap();
                laplace_form_consistency(&st, &sp).unwrap()
            })
            .collect();
        let ratio = res[0] / res[1];
        assert!((3.0..=5.0).contains(&ratio), "{res:?} ratio {ratio}");
    }

    #[test]
    fn general_dissipation_uses_viscosity_and_weights() {
        let gb = Grid::unit_box(1, 16).unwrap();
        let z: Arc<dyn InteractionKernel> = Arc::new(ZeroKernel { arity: 2, dim: 1 });
        let w = kernel_weights(z.as_ref(), &gb).unwrap();
        let rates = ConstantRates(nalgebra::DMatrix::identity(2, 2));
        let s = EntropyStructure::without_dissipation(vec![EntropyDensity::Quadratic { weight: 1.0 }; 2]).unwrap();
        let sp = SystemSpec::new(gb, Arc::new(rates), s, KernelChoice::Domain { kernel: z, weights: w }, 0.5, None).unwrap();
        let st = SolverState::new(vec![Field::from_fn(gb, |x| 1.0 + x[0]), Field::constant(gb, 1.0)]).unwrap();
        let (_, d) = entropy_and_dissipation(&st, &sp).unwrap();
        // ε h'' |∇u|² with h'' = 1; the zero kernel has zero weights.
        let g2 = gradient_norm_squared(&st.fields[0]);
        let expected = 0.5 * integrate(&g2);
        assert!(expected > 0.4);
        assert!((d - expected).abs() < 1e-12);
    }
}
