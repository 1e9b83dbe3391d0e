//! Run configuration: a TOML document with nested tables.
//!
//! ```toml
//! scenario = "nonlocal-torus"
//! seed = 7
//!
//! [grid]
//! n = 64
//!
//! [system]
//! d = [0.1, 0.1]
//! d_cross = [[0.0, 1.0], [1.0, 0.0]]
//!
//! [kernel]
//! shape = "bump"
//! width = 0.2
//!
//! [time]
//! t_final = 0.5
//! dt = 5e-4
//! ```
//!
//! Every table and key is optional except where a scenario needs it; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Local,
    NonlocalTorus,
    GeneralDomain,
    Kolmogorov,
    Particle,
    ConvergenceStudy,
    Certify,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::NonlocalTorus => "nonlocal-torus",
            Self::GeneralDomain => "general-domain",
            Self::Kolmogorov => "kolmogorov",
            Self::Particle => "particle",
            Self::ConvergenceStudy => "convergence-study",
            Self::Certify => "certify",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKind {
    Periodic,
    Neumann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateFamily {
    Skt,
    PowerLaw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DissipationChoice {
    Derived,
    Stated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeName {
    Bump,
    Gaussian,
    UniformCap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialKind {
    Constant,
    Cosine,
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotFormat {
    Csv,
    Bin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub dim: usize,
    pub n: usize,
    pub length: f64,
    /// Defaults to `neumann` for `general-domain`, `periodic` otherwise.
    pub boundary: Option<BoundaryKind>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            n: 64,
            length: 1.0,
            boundary: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub rates: RateFamily,
    /// Self-diffusion constants `d_i`; their length fixes the species count.
    pub d: Vec<f64>,
    /// SKT cross rates, diagonal entries are the quadratic self rates.
    pub d_cross: Option<Vec<Vec<f64>>>,
    /// Entropy weights; two-species SKT defaults to `(d_21, d_12)`.
    pub pi: Option<Vec<f64>>,
    pub dissipation: DissipationChoice,
    /// Power-law `[[d_11, d_12], [d_21, d_22]]`.
    pub d_matrix: Option<[[f64; 2]; 2]>,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            rates: RateFamily::Skt,
            d: vec![0.1, 0.1],
            d_cross: None,
            pi: None,
            dissipation: DissipationChoice::Derived,
            d_matrix: None,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl SystemConfig {
    pub fn species(&self) -> usize {
        self.d.len()
    }

    /// `d_cross` with the default `[[0, 1], [1, 0]]` pattern filled in.
    pub fn cross(&self) -> Vec<Vec<f64>> {
        self.d_cross.clone().unwrap_or_else(|| {
            let n = self.species();
            (0..n)
                .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
                .collect()
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        if let Some(p) = &self.pi {
            return p.clone();
        }
        let c = self.cross();
        if c.len() == 2 && c[0][1] > 0.0 && c[1][0] > 0.0 {
            vec![c[1][0], c[0][1]]
        } else {
            vec![1.0; self.species()]
        }
    }

    pub fn power_matrix(&self) -> [[f64; 2]; 2] {
        self.d_matrix.unwrap_or([[0.0, 1.0], [1.0, 0.0]])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub shape: ShapeName,
    /// Support diameter of the torus mollifier.
    pub width: f64,
    /// Domain kernel: diagonal concentration radius.
    pub diag_radius: f64,
    /// Domain kernel: distance to the boundary where the cutoff vanishes.
    pub margin: f64,
    /// Domain kernel: width of the cutoff ramp.
    pub ramp: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            shape: ShapeName::Bump,
            width: 0.2,
            diag_radius: 0.1,
            margin: 0.05,
            ramp: 0.44,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub t_final: f64,
    /// Defaults to `t_final / 1000`.
    pub dt: Option<f64>,
    pub cadence: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            t_final: 0.5,
            dt: None,
            cadence: 10,
        }
    }
}

impl TimeConfig {
    pub fn step(&self) -> f64 {
        self.dt.unwrap_or(self.t_final / 1000.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    pub kind: InitialKind,
    /// Per-species base level, default 1.
    pub base: Option<Vec<f64>>,
    /// Per-species perturbation amplitude, default 0.5, 0.4, 0.3, ...
    pub amplitude: Option<Vec<f64>>,
    /// Per-species cosine mode, default 1, 2, 3, ...
    pub modes: Option<Vec<usize>>,
    /// One field file per species (`.bin` or the snapshot CSV layout).
    pub files: Vec<PathBuf>,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            kind: InitialKind::Cosine,
            base: None,
            amplitude: None,
            modes: None,
            files: Vec::new(),
        }
    }
}

impl InitialConfig {
    pub fn base(&self, n: usize) -> Vec<f64> {
        self.base.clone().unwrap_or_else(|| vec![1.0; n])
    }

    pub fn amplitude(&self, n: usize) -> Vec<f64> {
        self.amplitude
            .clone()
            .unwrap_or_else(|| (0..n).map(|i| (0.5 - 0.1 * i as f64).max(0.1)).collect())
    }

    pub fn modes(&self, n: usize) -> Vec<usize> {
        self.modes.clone().unwrap_or_else(|| (1..=n).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenalisationConfig {
    pub epsilon: f64,
    pub targets: Vec<f64>,
    /// Interval `[lo, hi)` of the first coordinate where the mask is 1.
    pub mask: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub widths: Vec<f64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            widths: vec![0.4, 0.2, 0.1, 0.05],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleConfig {
    pub sites: usize,
    /// Particles per species, strictly increasing.
    pub ks: Vec<u64>,
    /// Independent runs per `K`, seeded from the run seed.
    pub runs: usize,
    pub t_final: f64,
    /// CSV table of `R_r`; when absent `R_r(i,j) = 1 + a sin(2πi/N) cos(2πj/N)`.
    pub rates: Option<PathBuf>,
    pub rate_amplitude: f64,
    /// Profiles `1 + a_s cos(2π m_s i / N)`.
    pub profile_amplitude: [f64; 2],
    pub profile_modes: [usize; 2],
    pub event_log: bool,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self {
            sites: 16,
            ks: vec![1_000, 10_000],
            runs: 4,
            t_final: 1.0,
            rates: None,
            rate_amplitude: 0.5,
            profile_amplitude: [0.6, 0.4],
            profile_modes: [1, 2],
            event_log: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KolmogorovConfig {
    /// `μ = 1 + a sin(2πx)`
    pub mu_amplitude: f64,
    /// `z⁰ = 1 + b cos(2πx)`
    pub z_amplitude: f64,
}

impl Default for KolmogorovConfig {
    fn default() -> Self {
        Self {
            mu_amplitude: 0.5,
            z_amplitude: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    pub lo: f64,
    pub hi: f64,
    pub per_axis: usize,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            lo: 1e-3,
            hi: 1e3,
            per_axis: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksConfig {
    pub entropy: bool,
    pub mass: bool,
    pub mass_tolerance: f64,
    pub envelope: bool,
    pub envelope_slack: f64,
    pub convergence: bool,
    pub particle: bool,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        Self {
            entropy: true,
            mass: true,
            mass_tolerance: 1e-10,
            envelope: true,
            envelope_slack: 0.1,
            convergence: true,
            particle: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Filled from the subcommand when absent.
    #[serde(default)]
    pub scenario: Option<Scenario>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_snapshots")]
    pub snapshots: SnapshotFormat,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub penalisation: Option<PenalisationConfig>,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default)]
    pub particle: ParticleConfig,
    #[serde(default)]
    pub kolmogorov: KolmogorovConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    #[serde(default)]
    pub checks: ChecksConfig,
}

fn default_snapshots() -> SnapshotFormat {
    SnapshotFormat::Csv
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, column)
}

/// Parses and validates a config; `default_scenario` fills a missing
/// `scenario` key.
pub fn parse_config(text: &str, default_scenario: Option<Scenario>) -> Result<RunConfig, ConfigError> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    if cfg.scenario.is_none() {
        cfg.scenario = default_scenario;
    }
    let errors = cfg.violations();
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(errors))
    }
}

pub fn load_config(path: &Path, default_scenario: Option<Scenario>) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, default_scenario)
}

impl RunConfig {
    pub fn scenario(&self) -> Scenario {
        self.scenario.expect("validated config has a scenario")
    }

    pub fn boundary(&self) -> BoundaryKind {
        self.grid.boundary.unwrap_or(match self.scenario {
            Some(Scenario::GeneralDomain) => BoundaryKind::Neumann,
            _ => BoundaryKind::Periodic,
        })
    }

    /// All semantic violations, each naming its key.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        let scenario = match self.scenario {
            Some(s) => s,
            None => {
                need(false, "scenario: missing".into());
                return v;
            }
        };
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        let pos = |x: f64| x > 0.0 && x.is_finite();

        let g = &self.grid;
        need((1..=2).contains(&g.dim), format!("grid.dim must be 1 or 2, got {}", g.dim));
        need(g.n >= 2, format!("grid.n must be at least 2, got {}", g.n));
        need(pos(g.length), format!("grid.length must be positive, got {}", g.length));
        let boundary = self.boundary();
        match scenario {
            Scenario::GeneralDomain => need(
                boundary == BoundaryKind::Neumann,
                "grid.boundary must be \"neumann\" for the general-domain scenario".into(),
            ),
            Scenario::Local | Scenario::NonlocalTorus | Scenario::Kolmogorov | Scenario::ConvergenceStudy => need(
                boundary == BoundaryKind::Periodic,
                format!("grid.boundary must be \"periodic\" for the {} scenario", scenario.name()),
            ),
            _ => {}
        }

        let s = &self.system;
        let n = s.species();
        need(n >= 1, "system.d needs at least one species".into());
        for (i, d) in s.d.iter().enumerate() {
            need(nonneg(*d), format!("system.d[{i}] must be nonnegative, got {d}"));
        }
        match s.rates {
            RateFamily::Skt => {
                let c = s.cross();
                need(c.len() == n, format!("system.d_cross must have {n} rows, got {}", c.len()));
                for (i, row) in c.iter().enumerate() {
                    need(row.len() == n, format!("system.d_cross[{i}] must have {n} entries, got {}", row.len()));
                    for (j, x) in row.iter().enumerate() {
                        need(nonneg(*x), format!("system.d_cross[{i}][{j}] must be nonnegative, got {x}"));
                    }
                }
                let w = s.weights();
                need(w.len() == n, format!("system.pi must have {n} entries, got {}", w.len()));
                for (i, p) in w.iter().enumerate() {
                    need(pos(*p), format!("system.pi[{i}] must be positive, got {p}"));
                }
            }
            RateFamily::PowerLaw => {
                need(n == 2, format!("system.rates = \"power-law\" needs exactly 2 species, got {n}"));
                for (i, row) in s.power_matrix().iter().enumerate() {
                    for (j, x) in row.iter().enumerate() {
                        need(nonneg(*x), format!("system.d_matrix[{i}][{j}] must be nonnegative, got {x}"));
                    }
                }
                let m = s.power_matrix();
                need(
                    m[0][1] > 0.0 && m[1][0] > 0.0,
                    "system.d_matrix cross entries must be positive for the power-law entropy".into(),
                );
                need(pos(s.alpha), format!("system.alpha must be positive, got {}", s.alpha));
                need(pos(s.beta), format!("system.beta must be positive, got {}", s.beta));
            }
        }
        need(nonneg(self.epsilon), format!("epsilon must be nonnegative, got {}", self.epsilon));
        if scenario == Scenario::GeneralDomain {
            need(self.epsilon > 0.0, "epsilon must be positive for the general-domain scenario".into());
            need(g.dim == 1 && n <= 3 || g.dim == 2 && n == 2, "general-domain supports n <= 3 in 1D and n = 2 in 2D".into());
        }

        let k = &self.kernel;
        if matches!(scenario, Scenario::NonlocalTorus | Scenario::ConvergenceStudy) {
            need(pos(k.width), format!("kernel.width must be positive, got {}", k.width));
        }
        if scenario == Scenario::GeneralDomain {
            need(pos(k.diag_radius), format!("kernel.diag_radius must be positive, got {}", k.diag_radius));
            need(pos(k.margin), format!("kernel.margin must be positive, got {}", k.margin));
            need(pos(k.ramp), format!("kernel.ramp must be positive, got {}", k.ramp));
        }

        let t = &self.time;
        need(pos(t.t_final), format!("time.t_final must be positive, got {}", t.t_final));
        let dt = t.step();
        need(pos(dt) && dt <= t.t_final, format!("time.dt must lie in (0, t_final], got {dt}"));
        need(t.cadence >= 1, "time.cadence must be at least 1".into());

        let ini = &self.initial;
        match ini.kind {
            InitialKind::File => need(
                ini.files.len() == n,
                format!("initial.files must list {n} files, got {}", ini.files.len()),
            ),
            InitialKind::Constant | InitialKind::Cosine => {
                let base = ini.base(n);
                let amp = ini.amplitude(n);
                need(base.len() == n, format!("initial.base must have {n} entries"));
                need(ini.modes(n).len() == n, format!("initial.modes must have {n} entries"));
                if ini.kind == InitialKind::Cosine {
                    need(amp.len() == n, format!("initial.amplitude must have {n} entries"));
                }
                for i in 0..n.min(base.len()) {
                    let a = if ini.kind == InitialKind::Cosine { amp.get(i).copied().unwrap_or(0.0) } else { 0.0 };
                    need(
                        base[i] - a.abs() > 0.0,
                        format!("initial.base[{i}] must exceed |amplitude[{i}]| to keep the data positive"),
                    );
                }
            }
        }

        if let Some(p) = &self.penalisation {
            need(pos(p.epsilon), format!("penalisation.epsilon must be positive, got {}", p.epsilon));
            need(p.targets.len() == n, format!("penalisation.targets must have {n} entries"));
            for (i, b) in p.targets.iter().enumerate() {
                need(pos(*b), format!("penalisation.targets[{i}] must be positive, got {b}"));
            }
            need(p.mask[0] < p.mask[1], "penalisation.mask must be an interval [lo, hi] with lo < hi".into());
            need(
                matches!(scenario, Scenario::Local | Scenario::NonlocalTorus),
                "penalisation applies to the local and nonlocal-torus scenarios".into(),
            );
        }

        if scenario == Scenario::ConvergenceStudy {
            let w = &self.study.widths;
            need(!w.is_empty(), "study.widths must not be empty".into());
            need(
                w.windows(2).all(|p| p[1] < p[0]),
                "study.widths must be strictly decreasing".into(),
            );
            for (i, x) in w.iter().enumerate() {
                need(pos(*x), format!("study.widths[{i}] must be positive, got {x}"));
            }
        }

        if scenario == Scenario::Particle {
            let p = &self.particle;
            need(p.sites >= 2, format!("particle.sites must be at least 2, got {}", p.sites));
            need(!p.ks.is_empty(), "particle.ks must not be empty".into());
            need(
                p.ks.first().is_some_and(|k| *k > 0) && p.ks.windows(2).all(|w| w[1] > w[0]),
                "particle.ks must be positive and strictly increasing".into(),
            );
            need(p.runs >= 1, "particle.runs must be at least 1".into());
            need(pos(p.t_final), format!("particle.t_final must be positive, got {}", p.t_final));
            need(
                p.rate_amplitude.abs() < 1.0,
                format!("particle.rate_amplitude must lie in (-1, 1), got {}", p.rate_amplitude),
            );
            for (i, a) in p.profile_amplitude.iter().enumerate() {
                need(a.abs() < 1.0, format!("particle.profile_amplitude[{i}] must lie in (-1, 1), got {a}"));
            }
        }

        if scenario == Scenario::Kolmogorov {
            let q = &self.kolmogorov;
            need(q.mu_amplitude.abs() < 1.0, format!("kolmogorov.mu_amplitude must lie in (-1, 1), got {}", q.mu_amplitude));
            need(q.z_amplitude.abs() <= 1.0, format!("kolmogorov.z_amplitude must lie in [-1, 1], got {}", q.z_amplitude));
        }

        if scenario == Scenario::Certify {
            let c = &self.certify;
            need(pos(c.lo) && c.lo < c.hi, "certify.lo must be positive and below certify.hi".into());
            need(c.per_axis >= 1, "certify.per_axis must be at least 1".into());
        }

        let ch = &self.checks;
        need(nonneg(ch.mass_tolerance), "checks.mass_tolerance must be nonnegative".into());
        need(nonneg(ch.envelope_slack), "checks.envelope_slack must be nonnegative".into());
        v
    }
}
