//! Reversible pair-jump chain on a periodic 1D lattice, its exact stochastic
//! simulation and its mean-field ODE.
//!
//! A species-1 particle at `i` and a species-2 particle at `j` jump together
//! to `(i+1, j+1)` with rate `R_r(i, j)` and to `(i−1, j−1)` with rate
//! `R_l(i, j)`; reversibility is `R_r(i, j) = R_l(i+1, j+1)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::entropy::psi;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RateTable {
    n: usize,
    r_r: Vec<f64>,
    r_l: Vec<f64>,
}

impl RateTable {
    pub fn sites(&self) -> usize {
        self.n
    }

    pub fn right(&self, i: usize, j: usize) -> f64 {
        self.r_r[i * self.n + j]
    }

    pub fn left(&self, i: usize, j: usize) -> f64 {
        self.r_l[i * self.n + j]
    }

    fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.n as isize) as usize
    }

    /// Every rate multiplied by `c ≥ 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        make_rate_table(self.n, |i, j| c * self.right(i, j))
    }

    /// `R_r(i, j) == R_l(i+1, j+1)` for all pairs, compared bitwise.
    pub fn is_reversible(&self) -> bool {
        (0..self.n).all(|i| {
            (0..self.n).all(|j| self.right(i, j) == self.left((i + 1) % self.n, (j + 1) % self.n))
        })
    }

    /// Reads an `N × N` table of `R_r` values, one row per species-1 site.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| invalid(format!("bad rate {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(invalid("rate table must be a square N × N matrix"));
        }
        make_rate_table(n, |i, j| rows[i][j])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for i in 0..self.n {
            w.write_record((0..self.n).map(|j| self.right(i, j).to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `R_r` from the generator and `R_l(i, j) := R_r(i−1, j−1)`.
pub fn make_rate_table(n: usize, generator: impl Fn(usize, usize) -> f64) -> Result<RateTable> {
    if n == 0 {
        return Err(invalid("the lattice needs at least one site"));
    }
    let mut r_r = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = generator(i, j);
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("rate at ({i}, {j}) must be nonnegative and finite, got {v}")));
            }
            r_r[i * n + j] = v;
        }
    }
    let mut r_l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            r_l[i * n + j] = r_r[((i + n - 1) % n) * n + (j + n - 1) % n];
        }
    }
    Ok(RateTable { n, r_r, r_l })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParticleState {
    pub counts: [Vec<u64>; 2],
}

impl ParticleState {
    pub fn new(counts_1: Vec<u64>, counts_2: Vec<u64>) -> Result<Self> {
        if counts_1.len() != counts_2.len() || counts_1.is_empty() {
            return Err(invalid("both species need one count per site"));
        }
        Ok(Self {
            counts: [counts_1, counts_2],
        })
    }

    pub fn total(&self, species: usize) -> u64 {
        self.counts[species].iter().sum()
    }

    /// `n_s / K_s`
    pub fn densities(&self) -> [Vec<f64>; 2] {
        let norm = |s: usize| {
            let k = self.total(s).max(1) as f64;
            self.counts[s].iter().map(|c| *c as f64 / k).collect()
        };
        [norm(0), norm(1)]
    }
}

/// Multinomial allocation of exactly `k` particles with probabilities
/// proportional to `profile`.
pub fn sample_counts(profile: &[f64], k: u64, rng: &mut impl Rng) -> Result<Vec<u64>> {
    if profile.is_empty() || profile.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(invalid("profile must be a nonempty nonnegative array"));
    }
    let mut remaining_mass: f64 = profile.iter().sum();
    if !(remaining_mass > 0.0) {
        return Err(invalid("profile has no mass"));
    }
    let mut left = k;
    let mut out = vec![0u64; profile.len()];
    for (i, &p) in profile.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == profile.len() {
            out[i] = left;
            break;
        }
        let prob = (p / remaining_mass).clamp(0.0, 1.0);
        let draw = Binomial::new(left, prob)
            .map_err(|e| invalid(format!("binomial draw failed: {e}")))?
            .sample(rng);
        out[i] = draw;
        left -= draw;
        remaining_mass -= p;
        if remaining_mass <= 0.0 {
            out[i] += left;
            left = 0;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JumpKind {
    Right,
    Left,
}

/// Jump of the pair that sat at `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub kind: JumpKind,
    pub i: usize,
    pub j: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GillespieResult {
    pub events: Vec<Event>,
    pub final_state: ParticleState,
    /// `(1 / (T K_s)) ∫_0^T n_s(i, t) dt`
    pub time_averaged: [Vec<f64>; 2],
    /// Time at which the total propensity vanished, if it did.
    pub absorbed_at: Option<f64>,
}

impl GillespieResult {
    pub fn write_event_log(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "type", "i", "j"])?;
        for e in &self.events {
            let kind = match e.kind {
                JumpKind::Right => "right",
                JumpKind::Left => "left",
            };
            w.write_record([e.t.to_string(), kind.to_string(), e.i.to_string(), e.j.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact simulation up to time `t_final` with propensities
/// `R_r(i,j) n_1(i) n_2(j)` and `R_l(i,j) n_1(i) n_2(j)`.
pub fn gillespie_run(initial: &ParticleState, rates: &RateTable, t_final: f64, seed: u64) -> Result<GillespieResult> {
    let n = rates.sites();
    if initial.counts[0].len() != n {
        return Err(invalid(format!(
            "state has {} sites, rate table has {n}",
            initial.counts[0].len()
        )));
    }
    if !(t_final > 0.0) || !t_final.is_finite() {
        return Err(invalid(format!("final time must be positive, got {t_final}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = initial.counts.clone();
    let totals = [initial.total(0), initial.total(1)];
    let mut occupation = [vec![0.0; n], vec![0.0; n]];
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut absorbed_at = None;
    let mut weights = vec![0.0; 2 * n * n];
    loop {
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let pair = (c[0][i] * c[1][j]) as f64;
                let r = rates.right(i, j) * pair;
                let l = rates.left(i, j) * pair;
                weights[2 * (i * n + j)] = r;
                weights[2 * (i * n + j) + 1] = l;
                total += r + l;
            }
        }
        let (dt, stop) = if total > 0.0 {
            let u: f64 = 1.0 - rng.random::<f64>();
            let tau = -u.ln() / total;
            if t + tau > t_final {
                (t_final - t, true)
            } else {
                (tau, false)
            }
        } else {
            absorbed_at = Some(t);
            (t_final - t, true)
        };
        for s in 0..2 {
            for (o, v) in occupation[s].iter_mut().zip(&c[s]) {
                *o += dt * *v as f64;
            }
        }
        if stop {
            break;
        }
        t += dt;
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (k, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                acc += w;
                chosen = Some(k);
                if acc > target {
                    break;
                }
            }
        }
        let k = chosen.expect("positive total propensity");
        let (pair, dir) = (k / 2, k % 2);
        let (i, j) = (pair / n, pair % n);
        let (kind, step) = if dir == 0 { (JumpKind::Right, 1) } else { (JumpKind::Left, -1) };
        let ni = rates.wrap(i as isize + step);
        let nj = rates.wrap(j as isize + step);
        c[0][i] -= 1;
        c[0][ni] += 1;
        c[1][j] -= 1;
        c[1][nj] += 1;
        events.push(Event { t, kind, i, j });
    }
    let time_averaged = [0, 1].map(|s| {
        let k = totals[s].max(1) as f64;
        occupation[s].iter().map(|o| o / (t_final * k)).collect()
    });
    Ok(GillespieResult {
        events,
        final_state: ParticleState { counts: c },
        time_averaged,
        absorbed_at,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldState {
    pub u: [Vec<f64>; 2],
    pub t: f64,
}

impl MeanFieldState {
    pub fn new(u1: Vec<f64>, u2: Vec<f64>) -> Result<Self> {
        if u1.len() != u2.len() || u1.is_empty() {
            return Err(invalid("both densities need one value per site"));
        }
        Ok(Self { u: [u1, u2], t: 0.0 })
    }

    fn check(&self, rates: &RateTable) -> Result<()> {
        if self.u[0].len() != rates.sites() {
            return Err(invalid("state and rate table disagree on the number of sites"));
        }
        Ok(())
    }

    fn check_positive(&self) -> Result<()> {
        for (species, u) in self.u.iter().enumerate() {
            if let Some((index, &value)) = u.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(Error::NonPositiveState { species, index, value });
            }
        }
        Ok(())
    }
}

/// Mean-field right-hand side:
/// `u_1'(i) = Σ_j R_r(i−1,j)u_1(i−1)u_2(j) + R_l(i+1,j)u_1(i+1)u_2(j) − (R_l+R_r)(i,j)u_1(i)u_2(j)`
/// and the analogue for `u_2` summed over `i`.
pub fn meanfield_rhs(state: &MeanFieldState, rates: &RateTable) -> Result<[Vec<f64>; 2]> {
    state.check(rates)?;
    let n = rates.sites();
    let [u1, u2] = &state.u;
    let m = |i: usize| (i + n - 1) % n;
    let p = |i: usize| (i + 1) % n;
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += rates.right(m(i), j) * u1[m(i)] * u2[j] + rates.left(p(i), j) * u1[p(i)] * u2[j]
                - (rates.left(i, j) + rates.right(i, j)) * u1[i] * u2[j];
        }
        d1[i] = acc;
    }
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            acc += rates.right(i, m(j)) * u1[i] * u2[m(j)] + rates.left(i, p(j)) * u1[i] * u2[p(j)]
                - (rates.left(i, j) + rates.right(i, j)) * u1[i] * u2[j];
        }
        d2[j] = acc;
    }
    Ok([d1, d2])
}

/// Classical fourth-order Runge–Kutta with fixed step `dt` up to `t_final`.
pub fn integrate_meanfield(initial: &MeanFieldState, rates: &RateTable, t_final: f64, dt: f64) -> Result<MeanFieldState> {
    if !(dt > 0.0) || !(t_final >= 0.0) {
        return Err(invalid("need dt > 0 and t_final >= 0"));
    }
    let steps = (t_final / dt).round().max(if t_final > 0.0 { 1.0 } else { 0.0 }) as usize;
    let h = if steps > 0 { t_final / steps as f64 } else { 0.0 };
    let axpy = |s: &MeanFieldState, k: &[Vec<f64>; 2], c: f64| MeanFieldState {
        u: [0, 1].map(|q| s.u[q].iter().zip(&k[q]).map(|(a, b)| a + c * b).collect()),
        t: s.t,
    };
    let mut s = initial.clone();
    for _ in 0..steps {
        let k1 = meanfield_rhs(&s, rates)?;
        let k2 = meanfield_rhs(&axpy(&s, &k1, 0.5 * h), rates)?;
        let k3 = meanfield_rhs(&axpy(&s, &k2, 0.5 * h), rates)?;
        let k4 = meanfield_rhs(&axpy(&s, &k3, h), rates)?;
        for q in 0..2 {
            for i in 0..s.u[q].len() {
                s.u[q][i] += h / 6.0 * (k1[q][i] + 2.0 * k2[q][i] + 2.0 * k3[q][i] + k4[q][i]);
            }
        }
        s.t += h;
    }
    Ok(s)
}

/// Entropy `H = Σ_i ψ(u_1(i)) + ψ(u_2(i))` and `dH/dt` by the chain rule and
/// by the bilinear reversible sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyRoutes {
    pub entropy: f64,
    /// `Σ_s Σ_i log u_s(i) · u_s'(i)`
    pub chain_rule: f64,
    /// `−Σ_{i,j} R_r(i,j) (a − b)(log a − log b)`, `a = u_1(i+1)u_2(j+1)`, `b = u_1(i)u_2(j)`.
    pub bilinear: f64,
}

pub fn discrete_entropy_dissipation(state: &MeanFieldState, rates: &RateTable) -> Result<EntropyRoutes> {
    state.check(rates)?;
    state.check_positive()?;
    let n = rates.sites();
    let mut entropy = 0.0;
    for u in &state.u {
        for &z in u {
            entropy += psi(z)?;
        }
    }
    let rhs = meanfield_rhs(state, rates)?;
    let chain_rule: f64 = (0..2)
        .map(|s| state.u[s].iter().zip(&rhs[s]).map(|(u, d)| u.ln() * d).sum::<f64>())
        .sum();
    let [u1, u2] = &state.u;
    let mut bilinear = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = u1[(i + 1) % n] * u2[(j + 1) % n];
            let b = u1[i] * u2[j];
            bilinear -= rates.right(i, j) * (a - b) * (a.ln() - b.ln());
        }
    }
    Ok(EntropyRoutes {
        entropy,
        chain_rule,
        bilinear,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceForm {
    pub derivative: [Vec<f64>; 2],
    /// `max |derivative − meanfield_rhs|`
    pub residual: f64,
}

/// `u_1'(i) = Δ_d(Σ_j ½(R_l + R_r)(i,j) u_1(i) u_2(j))
///   + ½ Σ_j {u_1(i+1)u_2(j)[R_l − R_r](i+1,j) + u_1(i−1)u_2(j)[R_r − R_l](i−1,j)}`
/// and the analogue for `u_2`.
pub fn discrete_laplace_form(state: &MeanFieldState, rates: &RateTable) -> Result<LaplaceForm> {
    state.check(rates)?;
    let n = rates.sites();
    let [u1, u2] = &state.u;
    let m = |i: usize| (i + n - 1) % n;
    let p = |i: usize| (i + 1) % n;
    let avg = |i: usize, j: usize| 0.5 * (rates.left(i, j) + rates.right(i, j));
    let diff = |i: usize, j: usize| rates.left(i, j) - rates.right(i, j);

    let a1: Vec<f64> = (0..n).map(|i| (0..n).map(|j| avg(i, j) * u1[i] * u2[j]).sum()).collect();
    let a2: Vec<f64> = (0..n).map(|j| (0..n).map(|i| avg(i, j) * u1[i] * u2[j]).sum()).collect();
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    for i in 0..n {
        let lap = a1[p(i)] + a1[m(i)] - 2.0 * a1[i];
        let corr: f64 = (0..n)
            .map(|j| u1[p(i)] * u2[j] * diff(p(i), j) - u1[m(i)] * u2[j] * diff(m(i), j))
            .sum();
        d1[i] = lap + 0.5 * corr;
    }
    for j in 0..n {
        let lap = a2[p(j)] + a2[m(j)] - 2.0 * a2[j];
        let corr: f64 = (0..n)
            .map(|i| u1[i] * u2[p(j)] * diff(i, p(j)) - u1[i] * u2[m(j)] * diff(i, m(j)))
            .sum();
        d2[j] = lap + 0.5 * corr;
    }
    let rhs = meanfield_rhs(state, rates)?;
    let residual = d1
        .iter()
        .zip(&rhs[0])
        .chain(d2.iter().zip(&rhs[1]))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(LaplaceForm {
        derivative: [d1, d2],
        residual,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub k: u64,
    pub seed: u64,
    /// `Σ_s Σ_i |n_s(i, T)/K − u_s(i, T)|`
    pub l1_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
}

impl ErrorTable {
    /// Mean error per `K`, in the order the `K` values were given.
    pub fn mean_by_k(&self) -> Vec<(u64, f64)> {
        let mut ks: Vec<u64> = Vec::new();
        for r in &self.rows {
            if !ks.contains(&r.k) {
                ks.push(r.k);
            }
        }
        ks.into_iter()
            .map(|k| {
                let e: Vec<f64> = self.rows.iter().filter(|r| r.k == k).map(|r| r.l1_error).collect();
                (k, e.iter().sum::<f64>() / e.len() as f64)
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["K", "seed", "L1_error"])?;
        for r in &self.rows {
            w.write_record([r.k.to_string(), r.seed.to_string(), r.l1_error.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn normalised_profiles(profile: &[Vec<f64>; 2], n: usize) -> Result<[Vec<f64>; 2]> {
    let out = [0, 1].map(|s| {
        let total: f64 = profile[s].iter().sum();
        profile[s].iter().map(|p| p / total).collect::<Vec<f64>>()
    });
    if out.iter().any(|u| u.len() != n || u.iter().any(|v| !v.is_finite() || *v < 0.0)) {
        return Err(invalid("profiles must be nonnegative with positive mass and one value per site"));
    }
    Ok(out)
}

/// Samples `K` particles per species from the profiles and simulates the
/// chain with rates `R/K` up to `T`.
pub fn scaled_run(rates: &RateTable, profile: &[Vec<f64>; 2], k: u64, t_final: f64, seed: u64) -> Result<GillespieResult> {
    if k == 0 {
        return Err(invalid("K must be positive"));
    }
    let normalised = normalised_profiles(profile, rates.sites())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c1 = sample_counts(&normalised[0], k, &mut rng)?;
    let c2 = sample_counts(&normalised[1], k, &mut rng)?;
    let scaled = rates.scaled(1.0 / k as f64)?;
    let run_seed = rng.random::<u64>();
    gillespie_run(&ParticleState::new(c1, c2)?, &scaled, t_final, run_seed)
}

/// Mean-field solution at `T` from the normalised profiles (RK4, `dt = 10⁻³ T`).
pub fn meanfield_reference(rates: &RateTable, profile: &[Vec<f64>; 2], t_final: f64) -> Result<MeanFieldState> {
    let normalised = normalised_profiles(profile, rates.sites())?;
    let [u1, u2] = normalised;
    integrate_meanfield(&MeanFieldState::new(u1, u2)?, rates, t_final, 1e-3 * t_final)
}

/// For each `K` and seed, [`scaled_run`] compared at `T` with
/// [`meanfield_reference`].
pub fn particle_vs_meanfield(
    rates: &RateTable,
    profile: &[Vec<f64>; 2],
    ks: &[u64],
    t_final: f64,
    seeds: &[u64],
) -> Result<ErrorTable> {
    if ks.is_empty() || ks.windows(2).any(|w| w[1] <= w[0]) || ks[0] == 0 {
        return Err(invalid("K values must be positive and strictly increasing"));
    }
    let truth = meanfield_reference(rates, profile, t_final)?;
    let jobs: Vec<(u64, u64)> = ks.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let out = scaled_run(rates, profile, k, t_final, seed)?;
            let dens = out.final_state.densities();
            let l1_error = (0..2)
                .map(|s| dens[s].iter().zip(&truth.u[s]).map(|(a, b)| (a - b).abs()).sum::<f64>())
                .sum();
            Ok(ErrorRow { k, seed, l1_error })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorTable { rows })
}
