use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crossdiff::diagnostics::{
    check_entropy_inequality, convergence_study, duality_functional, envelope_contains, mass_drift,
    run_envelope,
};
use crossdiff::entropy::{
    certify_structure, check_self_diffusion_compat, log_sample_grid, log_sample_pairs,
    make_skt_structure_with, power_law_family, EntropyStructure, SktCoefficients, SktDissipation,
};
use crossdiff::grid::{integrate, l2_norm, Boundary, Field, Grid};
use crossdiff::kernels::{domain_kernel_weights, make_domain_kernel, make_torus_mollifier, MollifierShape};
use crossdiff::particle::{make_rate_table, meanfield_reference, particle_vs_meanfield, scaled_run, RateTable};
use crossdiff::rates::{DiffusionRates, PowerLawRates};
use crossdiff::solver::{run, step_kolmogorov, KernelChoice, Penalisation, RunOptions, SystemSpec};

use crate::config::{
    BoundaryKind, DissipationChoice, InitialKind, RateFamily, RunConfig, Scenario, ShapeName, SnapshotFormat,
};

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Library(#[from] crossdiff::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot serialise: {0}")]
    Serialise(#[from] toml::ser::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub check: Vec<Check>,
}

impl Report {
    pub fn from_checks(checks: Vec<Check>) -> Self {
        let ok = checks.iter().all(|c| c.passed);
        Self {
            status: if ok { "pass" } else { "fail" }.into(),
            error: None,
            check: checks,
        }
    }

    pub fn from_error(kind: &str, message: String) -> Self {
        Self {
            status: kind.into(),
            error: Some(message),
            check: Vec::new(),
        }
    }

    /// 0 pass, 1 failed check, 2 rejected config, 3 runtime error.
    pub fn exit_code(&self) -> i32 {
        match self.status.as_str() {
            "pass" => 0,
            "fail" => 1,
            "config-error" => 2,
            _ => 3,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serialises")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub scenario: String,
    pub seed: u64,
    pub crossdiff_version: String,
    pub cli_version: String,
    pub wall_time_seconds: f64,
    pub status: String,
    /// Every artifact written, relative to the output directory.
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run: RunInfo,
    pub config: RunConfig,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, ExecError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| ExecError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
    }
}

/// Artifacts written under the output directory, in write order.
struct Outputs {
    root: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.root.join(name)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), ExecError> {
        let p = self.path(name);
        std::fs::write(p, text)?;
        Ok(())
    }

    fn add_dir(&mut self, name: &str) -> Result<(), ExecError> {
        let mut entries: Vec<String> = std::fs::read_dir(self.root.join(name))?
            .map(|e| e.map(|e| format!("{name}/{}", e.file_name().to_string_lossy())))
            .collect::<Result<_, _>>()?;
        entries.sort();
        self.files.extend(entries);
        Ok(())
    }
}

fn grid_of(cfg: &RunConfig) -> crossdiff::Result<Grid> {
    let b = match cfg.boundary() {
        BoundaryKind::Periodic => Boundary::Periodic,
        BoundaryKind::Neumann => Boundary::Neumann,
    };
    Grid::new(cfg.grid.dim, cfg.grid.n, cfg.grid.length, b)
}

fn shape_of(s: ShapeName) -> MollifierShape {
    match s {
        ShapeName::Bump => MollifierShape::Bump,
        ShapeName::Gaussian => MollifierShape::Gaussian,
        ShapeName::UniformCap => MollifierShape::UniformCap,
    }
}

fn rates_and_structure(cfg: &RunConfig) -> crossdiff::Result<(Arc<dyn DiffusionRates>, EntropyStructure)> {
    let s = &cfg.system;
    match s.rates {
        RateFamily::Skt => {
            let c = SktCoefficients {
                d: s.d.clone(),
                d_cross: s.cross(),
                pi: s.weights(),
            };
            let diss = match s.dissipation {
                DissipationChoice::Derived => SktDissipation::Derived,
                DissipationChoice::Stated => SktDissipation::Stated,
            };
            let structure = make_skt_structure_with(&c, diss)?;
            Ok((Arc::new(c), structure))
        }
        RateFamily::PowerLaw => {
            let m = s.power_matrix();
            let fam = power_law_family(m[0][1], m[1][0], m[0][0], m[1][1], s.alpha, s.beta);
            let structure = EntropyStructure::without_dissipation(vec![fam[0].0.clone(), fam[1].0.clone()])?;
            let rates = PowerLawRates {
                d: [s.d[0], s.d[1]],
                d_matrix: m,
                alpha: s.alpha,
                beta: s.beta,
            };
            Ok((Arc::new(rates), structure))
        }
    }
}

fn read_field(path: &Path, g: Grid) -> crossdiff::Result<Field> {
    if path.extension().is_some_and(|e| e == "bin") {
        let f = Field::read_binary(path)?;
        if f.grid() != &g {
            return Err(crossdiff::Error::GridMismatch);
        }
        return Ok(f);
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let last = rec.iter().last().unwrap_or("");
        values.push(
            last.trim()
                .parse::<f64>()
                .map_err(|e| crossdiff::Error::InvalidArgument(format!("{}: bad value {last:?}: {e}", path.display())))?,
        );
    }
    Field::new(g, values)
}

fn initial_fields(cfg: &RunConfig, g: Grid) -> crossdiff::Result<Vec<Field>> {
    let n = cfg.system.species();
    let ini = &cfg.initial;
    if ini.kind == InitialKind::File {
        return ini.files.iter().map(|p| read_field(p, g)).collect();
    }
    let base = ini.base(n);
    let amp = if ini.kind == InitialKind::Cosine { ini.amplitude(n) } else { vec![0.0; n] };
    let modes = ini.modes(n);
    let l = g.length();
    Ok((0..n)
        .map(|i| {
            let k = 2.0 * PI * modes[i] as f64 / l;
            let dim = g.dim();
            Field::from_fn(g, |x| {
                let wave = if dim == 1 { (k * x[0]).cos() } else { (k * x[0]).cos() * (k * x[1]).cos() };
                base[i] + amp[i] * wave
            })
        })
        .collect())
}

fn system_spec(cfg: &RunConfig, g: Grid) -> crossdiff::Result<SystemSpec> {
    let (rates, structure) = rates_and_structure(cfg)?;
    let kernel = match cfg.scenario() {
        Scenario::NonlocalTorus | Scenario::ConvergenceStudy => {
            KernelChoice::Torus(make_torus_mollifier(&g, cfg.kernel.width, shape_of(cfg.kernel.shape))?)
        }
        Scenario::GeneralDomain => {
            let k = make_domain_kernel(&g, cfg.system.species(), cfg.kernel.diag_radius, cfg.kernel.margin, cfg.kernel.ramp)?;
            let weights = domain_kernel_weights(&k, &g)?;
            KernelChoice::Domain {
                kernel: Arc::new(k),
                weights,
            }
        }
        _ => KernelChoice::Local,
    };
    let penalisation = cfg.penalisation.as_ref().map(|p| Penalisation {
        epsilon: p.epsilon,
        targets: p.targets.clone(),
        mask: Field::from_fn(g, |x| if x[0] >= p.mask[0] && x[0] < p.mask[1] { 1.0 } else { 0.0 }),
    });
    SystemSpec::new(g, rates, structure, kernel, cfg.epsilon, penalisation)
}

fn run_options(cfg: &RunConfig) -> RunOptions {
    let mut o = RunOptions::new(cfg.time.t_final);
    o.dt = cfg.time.step();
    o.cadence = cfg.time.cadence;
    o.monitor_entropy = cfg.checks.entropy && cfg.penalisation.is_none();
    o
}

fn sup_gap(fields: &[Field], p: &Penalisation) -> f64 {
    fields
        .iter()
        .zip(&p.targets)
        .flat_map(|(f, b)| {
            f.values()
                .iter()
                .zip(p.mask.values())
                .filter(|(_, m)| **m > 0.0)
                .map(move |(u, _)| (u - b).abs())
        })
        .fold(0.0, f64::max)
}

fn run_scenario(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>, ExecError> {
    let g = grid_of(cfg)?;
    let spec = system_spec(cfg, g)?;
    let init = initial_fields(cfg, g)?;
    let record = match run(&spec, init, &run_options(cfg)) {
        Ok(r) => r,
        Err(crossdiff::Error::Aborted { step, reason }) => {
            return Ok(vec![check("monitor", false, format!("run aborted at step {step}: {reason}"))]);
        }
        Err(e) => return Err(e.into()),
    };
    record.write_diagnostics_csv(&out.path("diagnostics.csv"))?;
    std::fs::create_dir_all(out.root.join("snapshots"))?;
    record.write_snapshots(&out.root.join("snapshots"), cfg.snapshots == SnapshotFormat::Bin)?;
    out.add_dir("snapshots")?;

    let mut checks = vec![check("monitor", true, format!("{} steps completed", record.diagnostics.len() - 1))];
    let ch = &cfg.checks;
    if let Some(p) = &spec.penalisation {
        let start = sup_gap(&record.snapshots[0].fields, p);
        let end = sup_gap(&record.final_state().fields, p);
        checks.push(check(
            "penalisation",
            end <= start,
            format!("sup gap on mask {start:.6e} -> {end:.6e}"),
        ));
        return Ok(checks);
    }
    if ch.entropy {
        let e = check_entropy_inequality(&record);
        checks.push(check(
            "entropy",
            e.passed(),
            format!(
                "worst step increase {:.3e}, worst margin {:.3e} at step {}",
                e.worst_increase, e.worst_margin, e.worst_step
            ),
        ));
    }
    if ch.mass {
        let d = mass_drift(&record);
        let worst = d.iter().copied().fold(0.0, f64::max);
        checks.push(check(
            "mass",
            worst <= ch.mass_tolerance,
            format!("max relative drift {worst:.3e} (tolerance {:.1e})", ch.mass_tolerance),
        ));
    }
    if ch.envelope && matches!(spec.kernel, KernelChoice::Torus(_)) {
        if let Ok(env) = run_envelope(&record, &spec, ch.envelope_slack) {
            checks.push(check(
                "envelope",
                envelope_contains(&record, env),
                format!("envelope [{:.6e}, {:.6e}]", env.0, env.1),
            ));
        }
        if let Ok(d) = duality_functional(&record, &spec) {
            checks.push(check(
                "duality",
                d.lhs <= d.rhs,
                format!("lhs {:.6e}, bound {:.6e}, ratio {:.6e}", d.lhs, d.rhs, d.ratio()),
            ));
        }
    }
    Ok(checks)
}

fn kolmogorov_scenario(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>, ExecError> {
    let g = grid_of(cfg)?;
    let q = &cfg.kolmogorov;
    let l = g.length();
    let mu = Field::from_fn(g, |x| 1.0 + q.mu_amplitude * (2.0 * PI * x[0] / l).sin());
    let z0 = Field::from_fn(g, |x| 1.0 + q.z_amplitude * (2.0 * PI * x[0] / l).cos());
    let zero = Field::zeros(g);
    let t_final = cfg.time.t_final;
    let steps = ((t_final / cfg.time.step()) - 1e-9).ceil().max(1.0) as usize;
    let dt = t_final / steps as f64;

    let dir = out.root.join("snapshots");
    std::fs::create_dir_all(&dir)?;
    let snap = |z: &Field, k: usize| -> crossdiff::Result<()> {
        if cfg.snapshots == SnapshotFormat::Bin {
            z.write_binary(&dir.join(format!("snapshot_{k:06}_z.bin")))
        } else {
            z.write_csv(&dir.join(format!("snapshot_{k:06}_z.csv")))
        }
    };
    let mut w = csv::Writer::from_path(out.path("diagnostics.csv"))?;
    w.write_record(["step", "t", "mass", "min", "max", "duality_sum"])?;
    let m0 = integrate(&z0);
    let mut z = z0.clone();
    let mut lhs = 0.0;
    let mut min_seen = z.min();
    let mut drift: f64 = 0.0;
    let row = |w: &mut csv::Writer<std::fs::File>, k: usize, z: &Field, lhs: f64| {
        w.write_record([
            k.to_string(),
            (k as f64 * dt).to_string(),
            integrate(z).to_string(),
            z.min().to_string(),
            z.max().to_string(),
            lhs.to_string(),
        ])
    };
    row(&mut w, 0, &z, 0.0)?;
    snap(&z, 0)?;
    for k in 1..=steps {
        z = step_kolmogorov(&z, &mu, dt, &zero)?;
        lhs += dt * integrate(&mu.zip_map(&z, |m, v| m * v * v)?);
        min_seen = min_seen.min(z.min());
        drift = drift.max((integrate(&z) - m0).abs() / m0.abs().max(f64::MIN_POSITIVE));
        row(&mut w, k, &z, lhs)?;
        if k % cfg.time.cadence == 0 || k == steps {
            snap(&z, k)?;
        }
    }
    w.flush()?;
    out.add_dir("snapshots")?;
    let ratio = lhs / ((1.0 + t_final * integrate(&mu)) * l2_norm(&z0).powi(2));
    let mut checks = vec![
        check("positivity", min_seen >= 0.0, format!("minimum over the run {min_seen:.6e}")),
        check("duality", ratio <= 1.0, format!("duality ratio {ratio:.6e}")),
    ];
    if cfg.checks.mass {
        checks.push(check(
            "mass",
            drift <= cfg.checks.mass_tolerance,
            format!("max relative drift {drift:.3e}"),
        ));
    }
    Ok(checks)
}

fn study_scenario(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>, ExecError> {
    let g = grid_of(cfg)?;
    let spec = system_spec(cfg, g)?;
    let init = initial_fields(cfg, g)?;
    let report = convergence_study(&spec, shape_of(cfg.kernel.shape), &cfg.study.widths, &init, &run_options(cfg))?;
    report.write_csv(&out.path("convergence.csv"))?;
    out.write("convergence.txt", &report.to_text())?;
    out.write("convergence.gp", &report.gnuplot_script("convergence.csv"))?;
    let ratio = report.last_over_first();
    if !cfg.checks.convergence {
        return Ok(Vec::new());
    }
    Ok(vec![
        check("monotone", report.monotone, "distances nonincreasing with 5% slack".into()),
        check("contraction", ratio < 0.5, format!("last/first distance ratio {ratio:.6e}")),
    ])
}

fn certify_scenario(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>, ExecError> {
    let (rates, structure) = match rates_and_structure(cfg) {
        Ok(x) => x,
        Err(e @ crossdiff::Error::DetailedBalance { .. }) => {
            return Ok(vec![check("detailed-balance", false, e.to_string())]);
        }
        Err(e) => return Err(e.into()),
    };
    let c = &cfg.certify;
    let n = cfg.system.species();
    let cert = certify_structure(&structure, rates.as_ref(), &log_sample_grid(n, c.lo, c.hi, c.per_axis))?;
    out.write("certificate.txt", &cert.to_text())?;
    cert.write_csv(&out.path("certificate.csv"))?;
    let mut checks = Vec::new();
    if cfg.system.rates == RateFamily::Skt {
        checks.push(check("detailed-balance", true, "pi_i d_ij = pi_j d_ji for all pairs".into()));
    }
    checks.push(check("psd", cert.psd_passed, format!("{} samples", cert.samples.len())));
    checks.push(check("dissipation", cert.dissipation_passed, "rates bound below by the dissipation".into()));
    if cfg.system.rates == RateFamily::PowerLaw {
        let s = &cfg.system;
        let m = s.power_matrix();
        let pairs = log_sample_pairs(c.lo, c.hi, c.per_axis);
        let mut text = String::new();
        for (i, (h, k)) in power_law_family(m[0][1], m[1][0], m[0][0], m[1][1], s.alpha, s.beta).iter().enumerate() {
            let r = check_self_diffusion_compat(h, k, &pairs)?;
            text.push_str(&format!(
                "species {}: {} (worst eigenvalue {:.6e}, {} offending pairs)\n",
                i + 1,
                if r.passed { "PASS" } else { "FAIL" },
                r.worst_eigenvalue,
                r.offenders.len()
            ));
            checks.push(check(
                &format!("self-diffusion-{}", i + 1),
                r.passed,
                format!("worst eigenvalue {:.6e}", r.worst_eigenvalue),
            ));
        }
        out.write("self_diffusion.txt", &text)?;
    }
    Ok(checks)
}

fn particle_scenario(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>, ExecError> {
    let p = &cfg.particle;
    let n = p.sites;
    let table: RateTable = match &p.rates {
        Some(path) => RateTable::read_csv(path)?,
        None => make_rate_table(n, |i, j| {
            1.0 + p.rate_amplitude * (2.0 * PI * i as f64 / n as f64).sin() * (2.0 * PI * j as f64 / n as f64).cos()
        })?,
    };
    let n = table.sites();
    table.write_csv(&out.path("rates.csv"))?;
    let profile = [0, 1].map(|s| {
        (0..n)
            .map(|i| 1.0 + p.profile_amplitude[s] * (2.0 * PI * (p.profile_modes[s] * i) as f64 / n as f64).cos())
            .collect::<Vec<f64>>()
    });
    let seeds: Vec<u64> = (0..p.runs as u64).map(|r| cfg.seed.wrapping_add(r)).collect();
    let errors = particle_vs_meanfield(&table, &profile, &p.ks, p.t_final, &seeds)?;
    errors.write_csv(&out.path("particle_errors.csv"))?;

    let truth = meanfield_reference(&table, &profile, p.t_final)?;
    let mut w = csv::Writer::from_path(out.path("meanfield.csv"))?;
    w.write_record(["site", "u1", "u2"])?;
    for i in 0..n {
        w.write_record([i.to_string(), truth.u[0][i].to_string(), truth.u[1][i].to_string()])?;
    }
    w.flush()?;

    if p.event_log {
        let first = scaled_run(&table, &profile, p.ks[0], p.t_final, seeds[0])?;
        first.write_event_log(&out.path("events.csv"))?;
        let mut w = csv::Writer::from_path(out.path("occupation.csv"))?;
        w.write_record(["site", "species1", "species2"])?;
        for i in 0..n {
            w.write_record([
                i.to_string(),
                first.time_averaged[0][i].to_string(),
                first.time_averaged[1][i].to_string(),
            ])?;
        }
        w.flush()?;
    }

    let means = errors.mean_by_k();
    let summary: Vec<String> = means.iter().map(|(k, e)| format!("K={k}: {e:.4e}")).collect();
    let mut checks = vec![check(
        "reversibility",
        table.is_reversible(),
        "R_r(i,j) = R_l(i+1,j+1)".into(),
    )];
    if cfg.checks.particle {
        checks.push(check(
            "particle-convergence",
            means.windows(2).all(|w| w[1].1 < w[0].1),
            format!("mean L1 error {}", summary.join(", ")),
        ));
    }
    Ok(checks)
}

/// Runs the configured scenario into `out_dir` and writes `report.txt` and
/// `manifest.txt` next to the artifacts.
pub fn execute(cfg: &RunConfig, command: &str, out_dir: &Path) -> Result<Report, ExecError> {
    let start = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    let mut out = Outputs {
        root: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    let result = match cfg.scenario() {
        Scenario::Local | Scenario::NonlocalTorus | Scenario::GeneralDomain => run_scenario(cfg, &mut out),
        Scenario::Kolmogorov => kolmogorov_scenario(cfg, &mut out),
        Scenario::ConvergenceStudy => study_scenario(cfg, &mut out),
        Scenario::Certify => certify_scenario(cfg, &mut out),
        Scenario::Particle => particle_scenario(cfg, &mut out),
    };
    let report = match result {
        Ok(checks) => Report::from_checks(checks),
        Err(e) => Report::from_error("error", e.to_string()),
    };
    out.write("report.txt", &report.to_toml())?;
    let manifest = Manifest {
        run: RunInfo {
            command: command.into(),
            scenario: cfg.scenario().name().into(),
            seed: cfg.seed,
            crossdiff_version: crossdiff::VERSION.into(),
            cli_version: env!("CARGO_PKG_VERSION").into(),
            wall_time_seconds: start.elapsed().as_secs_f64(),
            status: report.status.clone(),
            files: out.files.clone(),
        },
        config: cfg.clone(),
    };
    std::fs::write(out_dir.join("manifest.txt"), toml::to_string(&manifest)?)?;
    Ok(report)
}
