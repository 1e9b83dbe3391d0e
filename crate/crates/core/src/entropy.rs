//! Additive entropy structures `H(u) = Σ_i ∫ h_i(u_i)` and their certificates.
//!
//! A structure is certified by sampling the matrix map
//! `M(v) = diag(h_1''(v_1), …, h_n''(v_n)) · A(v)` on strictly positive states
//! and checking that its symmetric part is positive semi-definite, and that
//! it dominates `diag(α_i(v_i)²)` when dissipations are supplied.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::rates::DiffusionRates;

/// `ψ(z) = z log z − z + 1`, continuously extended by `ψ(0) = 1`.
pub fn psi(z: f64) -> Result<f64> {
    if !(z >= 0.0) {
        return Err(invalid(format!("psi requires z >= 0, got {z}")));
    }
    if z == 0.0 {
        return Ok(1.0);
    }
    Ok(z * z.ln() - z + 1.0)
}

#[inline]
fn psi_unchecked(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        z * z.ln() - z + 1.0
    }
}

/// Convex entropy density `h`, normalised so that `h(1) = h'(1) = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EntropyDensity {
    /// `weight · ψ(z)`
    Boltzmann { weight: f64 },
    /// `weight · (z^p − 1 − p (z − 1)) / (p (p − 1))` for `p > 0`, `p != 1`.
    Power { weight: f64, exponent: f64 },
    /// `weight · (z − 1)² / 2`
    Quadratic { weight: f64 },
}

impl EntropyDensity {
    pub fn weight(&self) -> f64 {
        match *self {
            Self::Boltzmann { weight } | Self::Power { weight, .. } | Self::Quadratic { weight } => {
                weight
            }
        }
    }

    /// Entropy density with `h'' = weight · z^(p−2)`; the Boltzmann density when `p = 1`.
    pub fn power_family(weight: f64, exponent: f64) -> Self {
        if exponent == 1.0 {
            Self::Boltzmann { weight }
        } else if exponent == 2.0 {
            Self::Quadratic { weight }
        } else {
            Self::Power { weight, exponent }
        }
    }

    pub fn value(&self, z: f64) -> f64 {
        match *self {
            Self::Boltzmann { weight } => weight * psi_unchecked(z),
            Self::Power { weight, exponent: p } => {
                weight * (z.powf(p) - 1.0 - p * (z - 1.0)) / (p * (p - 1.0))
            }
            Self::Quadratic { weight } => 0.5 * weight * (z - 1.0) * (z - 1.0),
        }
    }

    pub fn value_at_zero(&self) -> f64 {
        self.value(0.0)
    }

    pub fn first_derivative(&self, z: f64) -> f64 {
        match *self {
            Self::Boltzmann { weight } => weight * z.ln(),
            Self::Power { weight, exponent: p } => weight * (z.powf(p - 1.0) - 1.0) / (p - 1.0),
            Self::Quadratic { weight } => weight * (z - 1.0),
        }
    }

    pub fn second_derivative(&self, z: f64) -> f64 {
        match *self {
            Self::Boltzmann { weight } => weight / z,
            Self::Power { weight, exponent: p } => weight * z.powf(p - 2.0),
            Self::Quadratic { weight } => weight,
        }
    }

    /// The same density scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            Self::Boltzmann { weight } => Self::Boltzmann { weight: weight * factor },
            Self::Power { weight, exponent } => Self::Power { weight: weight * factor, exponent },
            Self::Quadratic { weight } => Self::Quadratic { weight: weight * factor },
        }
    }

    fn validate(&self) -> Result<()> {
        let w = self.weight();
        if !(w >= 0.0) || !w.is_finite() {
            return Err(invalid(format!("entropy weight must be nonnegative, got {w}")));
        }
        if let Self::Power { exponent, .. } = *self {
            if !(exponent > 0.0) || exponent == 1.0 {
                return Err(invalid(format!(
                    "power entropy exponent must be positive and != 1, got {exponent}"
                )));
            }
        }
        Ok(())
    }
}

/// Dissipation rate `α(z) ≥ 0` in the quantified bound `zᵀ M z ≥ Σ α_i² z_i²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dissipation {
    Constant(f64),
    /// `sqrt(over_z / z + constant)`
    InverseSqrt { over_z: f64, constant: f64 },
}

impl Dissipation {
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            Self::Constant(c) => c,
            Self::InverseSqrt { over_z, constant } => (over_z / z + constant).max(0.0).sqrt(),
        }
    }

    /// `α(z)²`
    pub fn squared(&self, z: f64) -> f64 {
        match *self {
            Self::Constant(c) => c * c,
            Self::InverseSqrt { over_z, constant } => (over_z / z + constant).max(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyStructure {
    pub densities: Vec<EntropyDensity>,
    pub dissipations: Vec<Dissipation>,
}

impl EntropyStructure {
    pub fn new(densities: Vec<EntropyDensity>, dissipations: Vec<Dissipation>) -> Result<Self> {
        if densities.len() != dissipations.len() || densities.is_empty() {
            return Err(invalid(format!(
                "entropy structure needs one density and one dissipation per species ({} vs {})",
                densities.len(),
                dissipations.len()
            )));
        }
        for d in &densities {
            d.validate()?;
        }
        for a in &dissipations {
            let bad = match *a {
                Dissipation::Constant(c) => !(c >= 0.0),
                Dissipation::InverseSqrt { over_z, constant } => !(over_z >= 0.0 && constant >= 0.0),
            };
            if bad {
                return Err(invalid(format!("dissipation must be nonnegative: {a:?}")));
            }
        }
        Ok(Self {
            densities,
            dissipations,
        })
    }

    /// Structure without dissipation bounds (`α_i ≡ 0`).
    pub fn without_dissipation(densities: Vec<EntropyDensity>) -> Result<Self> {
        let n = densities.len();
        Self::new(densities, vec![Dissipation::Constant(0.0); n])
    }

    pub fn species(&self) -> usize {
        self.densities.len()
    }
}

fn check_positive(v: &[f64]) -> Result<()> {
    for (index, &x) in v.iter().enumerate() {
        if !(x > 0.0) {
            return Err(Error::NonPositiveState {
                species: index,
                index: 0,
                value: x,
            });
        }
    }
    Ok(())
}

/// `M(v) = diag(h_i''(v_i)) · A(v)`.
pub fn build_m(
    structure: &EntropyStructure,
    rates: &dyn DiffusionRates,
    v: &[f64],
) -> Result<DMatrix<f64>> {
    let n = structure.species();
    if rates.species() != n || v.len() != n {
        return Err(invalid(format!(
            "species mismatch: structure {n}, rates {}, state {}",
            rates.species(),
            v.len()
        )));
    }
    check_positive(v)?;
    let mut m = rates.matrix(v);
    for i in 0..n {
        let h2 = structure.densities[i].second_derivative(v[i]);
        for j in 0..n {
            m[(i, j)] *= h2;
        }
    }
    Ok(m)
}

fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::NonFinite(format!("eigenvalue of {m}")));
    }
    Ok(min)
}

/// Positive semi-definiteness tolerance `10⁻¹⁰ (1 + ‖M‖_∞)`.
pub fn psd_tolerance(m: &DMatrix<f64>) -> f64 {
    let norm = m
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    1e-10 * (1.0 + norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport {
    pub point: Vec<f64>,
    /// Smallest eigenvalue of `sym(M(v))`.
    pub min_eigenvalue: f64,
    /// Smallest eigenvalue of `sym(M(v)) − diag(α_i(v_i)²)`.
    pub min_eigenvalue_dissipation: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub samples: Vec<SampleReport>,
    pub psd_passed: bool,
    pub dissipation_passed: bool,
    /// Index of the sample with the smallest `min_eigenvalue`.
    pub worst_psd: usize,
    /// Index of the sample with the smallest `min_eigenvalue_dissipation`.
    pub worst_dissipation: usize,
}

impl Certificate {
    pub fn passed(&self) -> bool {
        self.psd_passed && self.dissipation_passed
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let verdict = |b: bool| if b { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "entropy structure certificate");
        let _ = writeln!(s, "samples: {}", self.samples.len());
        let w = &self.samples[self.worst_psd];
        let _ = writeln!(
            s,
            "positive semi-definite: {} (worst min eigenvalue {:.6e} at {:?})",
            verdict(self.psd_passed),
            w.min_eigenvalue,
            w.point
        );
        let w = &self.samples[self.worst_dissipation];
        let _ = writeln!(
            s,
            "dissipation bound: {} (worst min eigenvalue {:.6e} at {:?})",
            verdict(self.dissipation_passed),
            w.min_eigenvalue_dissipation,
            w.point
        );
        let _ = writeln!(s, "overall: {}", verdict(self.passed()));
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let n = self.samples.first().map_or(0, |s| s.point.len());
        let mut header: Vec<String> = (1..=n).map(|i| format!("v{i}")).collect();
        header.push("min_eigenvalue".into());
        header.push("min_eigenvalue_dissipation".into());
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.point.iter().map(|x| format!("{x:e}")).collect();
            row.push(format!("{:e}", s.min_eigenvalue));
            row.push(format!("{:e}", s.min_eigenvalue_dissipation));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Logarithmic sample grid over `[lo, hi]^n` with `per_axis` points per axis.
pub fn log_sample_grid(n: usize, lo: f64, hi: f64, per_axis: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..per_axis)
        .map(|k| {
            let t = if per_axis == 1 { 0.5 } else { k as f64 / (per_axis - 1) as f64 };
            (lo.ln() + t * (hi.ln() - lo.ln())).exp()
        })
        .collect();
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|_| {
                    let a = axis[idx % per_axis];
                    idx /= per_axis;
                    a
                })
                .collect()
        })
        .collect()
}

/// Log grid on `[10⁻³, 10³]^n`, 10 points per axis.
pub fn default_sample_grid(n: usize) -> Vec<Vec<f64>> {
    log_sample_grid(n, 1e-3, 1e3, 10)
}

pub fn certify_structure(
    structure: &EntropyStructure,
    rates: &dyn DiffusionRates,
    samples: &[Vec<f64>],
) -> Result<Certificate> {
    if samples.is_empty() {
        return Err(invalid("certify_structure needs at least one sample"));
    }
    let n = structure.species();
    let mut reports = Vec::with_capacity(samples.len());
    for v in samples {
        let m = build_m(structure, rates, v)?;
        let tolerance = psd_tolerance(&m);
        let min_eigenvalue = min_symmetric_eigenvalue(&m)?;
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] -= structure.dissipations[i].squared(v[i]);
        }
        let min_eigenvalue_dissipation = min_symmetric_eigenvalue(&shifted)?;
        reports.push(SampleReport {
            point: v.clone(),
            min_eigenvalue,
            min_eigenvalue_dissipation,
            tolerance,
        });
    }
    let argmin = |key: &dyn Fn(&SampleReport) -> f64| {
        reports
            .iter()
            .enumerate()
            .min_by(|a, b| key(a.1).total_cmp(&key(b.1)))
            .map(|(k, _)| k)
            .unwrap_or(0)
    };
    let worst_psd = argmin(&|r| r.min_eigenvalue + r.tolerance);
    let worst_dissipation = argmin(&|r| r.min_eigenvalue_dissipation + r.tolerance);
    let psd_passed = reports.iter().all(|r| r.min_eigenvalue >= -r.tolerance);
    let dissipation_passed = reports.iter().all(|r| r.min_eigenvalue_dissipation >= -r.tolerance);
    Ok(Certificate {
        samples: reports,
        psd_passed,
        dissipation_passed,
        worst_psd,
        worst_dissipation,
    })
}

/// Coefficients of the n-species SKT system
/// `∂_t u_i = Δ(d_i u_i + Σ_j d_ij u_j u_i)` with detailed-balance weights `π`.
#[derive(Clone, Debug, PartialEq)]
pub struct SktCoefficients {
    pub d: Vec<f64>,
    pub d_cross: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
}

impl SktCoefficients {
    /// Two-species system with the weights `π = (d_21, d_12)` that symmetrise it.
    pub fn two_species(d1: f64, d2: f64, d12: f64, d21: f64) -> Self {
        Self {
            d: vec![d1, d2],
            d_cross: vec![vec![0.0, d12], vec![d21, 0.0]],
            pi: vec![d21, d12],
        }
    }

    pub fn species(&self) -> usize {
        self.d.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.d.len();
        if n == 0 || self.d_cross.len() != n || self.pi.len() != n {
            return Err(invalid("SKT coefficient arrays must all have the species count"));
        }
        if self.d_cross.iter().any(|row| row.len() != n) {
            return Err(invalid("d_cross must be square"));
        }
        let all = self.d.iter().chain(self.pi.iter()).chain(self.d_cross.iter().flatten());
        if all.clone().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(invalid("SKT coefficients and weights must be finite and nonnegative"));
        }
        Ok(())
    }

    /// `π_i d_ij = π_j d_ji` for all pairs, to a few ulps.
    pub fn check_detailed_balance(&self) -> Result<()> {
        self.validate()?;
        let n = self.species();
        for i in 0..n {
            for j in (i + 1)..n {
                let lhs = self.pi[i] * self.d_cross[i][j];
                let rhs = self.pi[j] * self.d_cross[j][i];
                if (lhs - rhs).abs() > 4.0 * f64::EPSILON * lhs.abs().max(rhs.abs()) {
                    return Err(Error::DetailedBalance { i, j, lhs, rhs });
                }
            }
        }
        Ok(())
    }
}

/// Which dissipation rates accompany the SKT entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SktDissipation {
    /// `α_i = π_i d_ii` (constant).
    Stated,
    /// `α_i(z)² = π_i d_i / z + 2 π_i d_ii`, the diagonal part left after
    /// completing squares in each detailed-balance pair.
    Derived,
}

impl SktDissipation {
    pub fn rates(&self, c: &SktCoefficients) -> Vec<Dissipation> {
        (0..c.species())
            .map(|i| match self {
                Self::Stated => Dissipation::Constant(c.pi[i] * c.d_cross[i][i]),
                Self::Derived => Dissipation::InverseSqrt {
                    over_z: c.pi[i] * c.d[i],
                    constant: 2.0 * c.pi[i] * c.d_cross[i][i],
                },
            })
            .collect()
    }
}

/// SKT entropy `h_i = π_i ψ` with the stated dissipations `α_i = π_i d_ii`.
pub fn make_skt_structure(c: &SktCoefficients) -> Result<EntropyStructure> {
    make_skt_structure_with(c, SktDissipation::Stated)
}

pub fn make_skt_structure_with(
    c: &SktCoefficients,
    dissipation: SktDissipation,
) -> Result<EntropyStructure> {
    c.check_detailed_balance()?;
    let densities = c.pi.iter().map(|&w| EntropyDensity::Boltzmann { weight: w }).collect();
    EntropyStructure::new(densities, dissipation.rates(c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SktDissipationReport {
    pub stated: Certificate,
    pub derived: Certificate,
}

impl SktDissipationReport {
    pub fn to_text(&self) -> String {
        let v = |b: bool| if b { "PASS" } else { "FAIL" };
        format!(
            "stated dissipation alpha_i = pi_i d_ii: {}\nderived dissipation alpha_i^2 = pi_i d_i / z + 2 pi_i d_ii: {}\n",
            v(self.stated.dissipation_passed),
            v(self.derived.dissipation_passed)
        )
    }
}

/// Certifies both candidate SKT dissipations on the same samples.
pub fn compare_skt_dissipations(
    c: &SktCoefficients,
    samples: &[Vec<f64>],
) -> Result<SktDissipationReport> {
    let stated = make_skt_structure_with(c, SktDissipation::Stated)?;
    let derived = make_skt_structure_with(c, SktDissipation::Derived)?;
    Ok(SktDissipationReport {
        stated: certify_structure(&stated, c, samples)?,
        derived: certify_structure(&derived, c, samples)?,
    })
}

/// Scalar rate `κ(z)` with derivative, used for self-diffusion.
pub trait ScalarRate {
    fn value(&self, z: f64) -> f64;
    fn derivative(&self, z: f64) -> f64;
}

/// `κ(z) = coefficient · z^exponent`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerRate {
    pub coefficient: f64,
    pub exponent: f64,
}

impl ScalarRate for PowerRate {
    fn value(&self, z: f64) -> f64 {
        self.coefficient * z.powf(self.exponent)
    }

    fn derivative(&self, z: f64) -> f64 {
        if self.exponent == 0.0 {
            0.0
        } else {
            self.coefficient * self.exponent * z.powf(self.exponent - 1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfDiffusionReport {
    pub passed: bool,
    /// `(a, b, smallest eigenvalue of sym(N))` for every failing pair.
    pub offenders: Vec<(f64, f64, f64)>,
    pub worst_eigenvalue: f64,
}

/// Self-diffusion matrix
/// `N = diag(h''(a), h''(b)) · [[κ(b), a κ'(b)], [b κ'(a), κ(a)]]`.
pub fn self_diffusion_matrix(h: &EntropyDensity, kappa: &dyn ScalarRate, a: f64, b: f64) -> DMatrix<f64> {
    let ha = h.second_derivative(a);
    let hb = h.second_derivative(b);
    DMatrix::from_row_slice(
        2,
        2,
        &[
            ha * kappa.value(b),
            ha * a * kappa.derivative(b),
            hb * b * kappa.derivative(a),
            hb * kappa.value(a),
        ],
    )
}

pub fn check_self_diffusion_compat(
    h: &EntropyDensity,
    kappa: &dyn ScalarRate,
    pairs: &[(f64, f64)],
) -> Result<SelfDiffusionReport> {
    if pairs.is_empty() {
        return Err(invalid("self-diffusion check needs at least one sample pair"));
    }
    let mut offenders = Vec::new();
    let mut worst = f64::INFINITY;
    for &(a, b) in pairs {
        if !(a > 0.0 && b > 0.0) {
            return Err(invalid(format!("sample pair ({a}, {b}) must be strictly positive")));
        }
        let n = self_diffusion_matrix(h, kappa, a, b);
        let tol = psd_tolerance(&n);
        let min = min_symmetric_eigenvalue(&n)?;
        worst = worst.min(min);
        if min < -tol {
            offenders.push((a, b, min));
        }
    }
    Ok(SelfDiffusionReport {
        passed: offenders.is_empty(),
        offenders,
        worst_eigenvalue: worst,
    })
}

/// Entropy densities and self rates of the two-species power-law family
/// `μ_1 = d_1 + d_12 u_2^α + d_11 u_1^β`, `μ_2 = d_2 + d_21 u_1^β + d_22 u_2^α`.
///
/// The entropy pairing `h_1'' ∝ z^(β−2)`, `h_2'' ∝ z^(α−2)` with weights
/// `β d_21` and `α d_12` symmetrises the cross-diffusion part.
pub fn power_law_family(
    d12: f64,
    d21: f64,
    d11: f64,
    d22: f64,
    alpha: f64,
    beta: f64,
) -> [(EntropyDensity, PowerRate); 2] {
    [
        (
            EntropyDensity::power_family(beta * d21, beta),
            PowerRate {
                coefficient: d11,
                exponent: beta,
            },
        ),
        (
            EntropyDensity::power_family(alpha * d12, alpha),
            PowerRate {
                coefficient: d22,
                exponent: alpha,
            },
        ),
    ]
}

/// Sample pairs `(a, b)` on a log grid over `[lo, hi]²`.
pub fn log_sample_pairs(lo: f64, hi: f64, per_axis: usize) -> Vec<(f64, f64)> {
    log_sample_grid(2, lo, hi, per_axis)
        .into_iter()
        .map(|v| (v[0], v[1]))
        .collect()
}
