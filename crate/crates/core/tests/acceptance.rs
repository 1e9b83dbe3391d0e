//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every check prints one PASS/FAIL line; exits nonzero if any check fails.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use crossdiff::diagnostics::{
    check_entropy_inequality, convergence_study, envelope_contains, kolmogorov_duality_ratio,
    laplace_form_consistency, mass_drift, run_envelope,
};
use crossdiff::entropy::{
    build_m, check_self_diffusion_compat, log_sample_pairs, make_skt_structure_with,
    power_law_family, SktCoefficients, SktDissipation,
};
use crossdiff::grid::{Boundary, Field, Grid};
use crossdiff::kernels::{domain_kernel_weights, make_domain_kernel, make_torus_mollifier, MollifierShape};
use crossdiff::particle::{
    discrete_entropy_dissipation, discrete_laplace_form, make_rate_table, meanfield_rhs,
    particle_vs_meanfield, MeanFieldState, RateTable,
};
use crossdiff::solver::{
    run, step_kolmogorov, step_local, step_torus_nonlocal, KernelChoice, Penalisation, RunOptions,
    SolverState, SystemSpec, TrajectoryRecord,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn skt() -> SktCoefficients {
    SktCoefficients::two_species(0.1, 0.1, 1.0, 1.0)
}

fn torus_spec(n: usize, width: f64) -> SystemSpec {
    let g = Grid::torus(1, n).unwrap();
    let c = skt();
    let s = make_skt_structure_with(&c, SktDissipation::Derived).unwrap();
    let m = make_torus_mollifier(&g, width, MollifierShape::Bump).unwrap();
    SystemSpec::new(g, Arc::new(c), s, KernelChoice::Torus(m), 0.0, None).unwrap()
}

fn cosine(g: Grid) -> Vec<Field> {
    vec![
        Field::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos()),
        Field::from_fn(g, |x| 1.0 + 0.4 * (4.0 * PI * x[0]).cos()),
    ]
}

fn m_matrix_symmetry() -> Outcome {
    let c = SktCoefficients::two_species(0.3, 0.7, 1.5, 2.5);
    let s = make_skt_structure_with(&c, SktDissipation::Derived).unwrap();
    let target = 1.5 * 2.5;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let v = [10f64.powf(rng.random_range(-3.0..3.0)), 10f64.powf(rng.random_range(-3.0..3.0))];
        let m = build_m(&s, &c, &v).unwrap();
        worst = worst.max(((m[(0, 1)] - target) / target).abs());
        worst = worst.max(((m[(1, 0)] - target) / target).abs());
    }
    outcome(worst <= 1e-12, format!("max relative deviation {worst:.2e}"))
}

fn torus_run() -> (SystemSpec, TrajectoryRecord) {
    let sp = torus_spec(64, 0.2);
    let mut o = RunOptions::new(0.5);
    o.dt = 5e-4;
    let r = run(&sp, cosine(sp.grid), &o).unwrap();
    (sp, r)
}

fn entropy_monotonicity(r: &TrajectoryRecord) -> Outcome {
    let c = check_entropy_inequality(r);
    outcome(
        c.passed(),
        format!(
            "worst step increase {:.2e}, worst inequality margin {:.2e}",
            c.worst_increase, c.worst_margin
        ),
    )
}

fn mass_conservation(r: &TrajectoryRecord) -> Outcome {
    let d = mass_drift(r);
    let worst = d.iter().copied().fold(0.0, f64::max);
    outcome(worst <= 1e-10, format!("relative drift [{}]", sci(&d)))
}

fn maximum_principle(sp: &SystemSpec, r: &TrajectoryRecord) -> Outcome {
    let env = run_envelope(r, sp, 0.1).unwrap();
    let lo = r.diagnostics.iter().flat_map(|d| d.min.iter().copied()).fold(f64::INFINITY, f64::min);
    let hi = r.diagnostics.iter().flat_map(|d| d.max.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let lambda = match &sp.kernel {
        KernelChoice::Torus(m) => m.laplacian_sup(),
        _ => unreachable!(),
    };
    let a = r.growth.laplace.unwrap_or(0.0);
    let t = r.diagnostics.last().unwrap().t;
    let exponent = a * t * (1.0 + r.initial_entropy().max(0.0)) * lambda;
    outcome(
        envelope_contains(r, env),
        format!(
            "observed [{lo:.4}, {hi:.4}] inside [{:.4e}, {:.4e}] (gamma {:.3}, exponent {exponent:.3e})",
            env.0, env.1, r.gamma
        ),
    )
}

fn nonlocal_to_local() -> Outcome {
    let sp = torus_spec(128, 0.2);
    let widths = [0.4, 0.2, 0.1, 0.05];
    let report = convergence_study(&sp, MollifierShape::Bump, &widths, &cosine(sp.grid), &RunOptions::new(0.2)).unwrap();
    let ratio = report.last_over_first();
    let dists: Vec<String> = report.entries.iter().map(|e| format!("{:.3e}", e.l1_qt)).collect();
    outcome(
        report.monotone && ratio < 0.5,
        format!("L1(Q_T) distances [{}], last/first {ratio:.3}", dists.join(", ")),
    )
}

fn delta_kernel_reduction() -> Outcome {
    let n = 32;
    let g = Grid::torus(1, n).unwrap();
    let delta = make_torus_mollifier(&g, 2.0 / n as f64, MollifierShape::Bump).unwrap();
    let c = skt();
    let s = make_skt_structure_with(&c, SktDissipation::Derived).unwrap();
    let nonlocal = SystemSpec::new(g, Arc::new(c.clone()), s.clone(), KernelChoice::Torus(delta), 0.0, None).unwrap();
    let local = SystemSpec::new(g, Arc::new(c), s, KernelChoice::Local, 0.0, None).unwrap();
    let mut a = SolverState::new(cosine(g)).unwrap();
    let mut b = a.clone();
    for _ in 0..100 {
        a = step_torus_nonlocal(&a, &nonlocal, 1e-3).unwrap();
        b = step_local(&b, &local, 1e-3).unwrap();
    }
    let diff = a
        .fields
        .iter()
        .zip(&b.fields)
        .flat_map(|(x, y)| x.values().iter().zip(y.values()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    outcome(diff <= 1e-10, format!("sup-norm difference {diff:.2e}"))
}

fn kolmogorov() -> Outcome {
    let g = Grid::torus(1, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..1000 {
        let mu = Field::new(g, (0..64).map(|_| rng.random_range(1e-3..10.0)).collect()).unwrap();
        let z = Field::new(g, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let out = step_kolmogorov(&z, &mu, rng.random_range(1e-4..1.0), &Field::zeros(g)).unwrap();
        violations += out.values().iter().filter(|v| **v < 0.0).count();
    }
    let ratios: Vec<f64> = [32, 64, 128]
        .iter()
        .map(|&n| {
            let g = Grid::torus(1, n).unwrap();
            let mu = Field::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).sin());
            let z0 = Field::from_fn(g, |x| 1.0 + 0.8 * (2.0 * PI * x[0]).cos());
            kolmogorov_duality_ratio(&z0, &mu, 0.5, 500).unwrap()
        })
        .collect();
    let spread = ratios.iter().map(|r| (r / ratios[0] - 1.0).abs()).fold(0.0, f64::max);
    outcome(
        violations == 0 && spread <= 0.2,
        format!("{violations} sign violations, duality ratios {ratios:.4?} (spread {:.1}%)", 100.0 * spread),
    )
}

fn general_domain() -> Outcome {
    let domain_spec = |n: usize| {
        let g = Grid::new(1, n, 1.0, Boundary::Neumann).unwrap();
        let k = make_domain_kernel(&g, 2, 0.1, 0.05, 0.44).unwrap();
        let w = domain_kernel_weights(&k, &g).unwrap();
        let c = skt();
        let s = make_skt_structure_with(&c, SktDissipation::Derived).unwrap();
        SystemSpec::new(g, Arc::new(c), s, KernelChoice::Domain { kernel: Arc::new(k), weights: w }, 1e-2, None).unwrap()
    };
    let sp = domain_spec(64);
    let mut o = RunOptions::new(0.1);
    o.dt = 1e-3;
    let r = run(&sp, cosine(sp.grid), &o).unwrap();
    let drift = mass_drift(&r).into_iter().fold(0.0, f64::max);
    let ent = check_entropy_inequality(&r);
    let res: Vec<f64> = [32, 64]
        .iter()
        .map(|&n| {
            let sp = domain_spec(n);
            laplace_form_consistency(&SolverState::new(cosine(sp.grid)).unwrap(), &sp).unwrap()
        })
        .collect();
    let ratio = res[0] / res[1];
    outcome(
        drift <= 1e-10 && ent.passed() && (3.0..=5.0).contains(&ratio),
        format!(
            "mass drift {drift:.2e}, entropy margin {:.2e}, consistency residuals [{}] ratio {ratio:.2}",
            ent.worst_margin,
            sci(&res)
        ),
    )
}

fn random_table(n: usize, rng: &mut ChaCha8Rng) -> RateTable {
    let vals: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..2.0)).collect();
    make_rate_table(n, |i, j| vals[i * n + j]).unwrap()
}

/// Every pair and both jump directions applied as explicit moves.
fn brute_force_rhs(s: &MeanFieldState, r: &RateTable) -> [Vec<f64>; 2] {
    let n = r.sites();
    let mut d = [vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        for j in 0..n {
            let fr = r.right(i, j) * s.u[0][i] * s.u[1][j];
            let fl = r.left(i, j) * s.u[0][i] * s.u[1][j];
            d[0][i] -= fr + fl;
            d[0][(i + 1) % n] += fr;
            d[0][(i + n - 1) % n] += fl;
            d[1][j] -= fr + fl;
            d[1][(j + 1) % n] += fr;
            d[1][(j + n - 1) % n] += fl;
        }
    }
    d
}

fn pair_jump_identities() -> Outcome {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut worst_rel, mut worst_sign, mut worst_lap, mut worst_oracle) = (0.0f64, f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let r = random_table(n, &mut rng);
        let s = MeanFieldState::new(
            (0..n).map(|_| rng.random_range(0.05..3.0)).collect(),
            (0..n).map(|_| rng.random_range(0.05..3.0)).collect(),
        )
        .unwrap();
        let e = discrete_entropy_dissipation(&s, &r).unwrap();
        let scale = e.chain_rule.abs().max(e.bilinear.abs()).max(f64::MIN_POSITIVE);
        worst_rel = worst_rel.max((e.chain_rule - e.bilinear).abs() / scale);
        worst_sign = worst_sign.max(e.bilinear);
        let lf = discrete_laplace_form(&s, &r).unwrap();
        worst_lap = worst_lap.max(lf.residual);
        let oracle = brute_force_rhs(&s, &r);
        let rhs = meanfield_rhs(&s, &r).unwrap();
        for q in 0..2 {
            for (a, b) in lf.derivative[q].iter().zip(&oracle[q]) {
                worst_oracle = worst_oracle.max((a - b).abs());
            }
            for (a, b) in rhs[q].iter().zip(&oracle[q]) {
                worst_oracle = worst_oracle.max((a - b).abs());
            }
        }
    }
    outcome(
        worst_rel <= 1e-12 && worst_sign <= 0.0 && worst_lap <= 1e-12 && worst_oracle <= 1e-12,
        format!(
            "route mismatch {worst_rel:.2e} (relative), max route-2 value {worst_sign:.2e}, Laplace-form residual {:.2e}",
            worst_lap.max(worst_oracle)
        ),
    )
}

fn particle_limit() -> Outcome {
    let n = 16;
    let r = make_rate_table(n, |i, j| {
        1.0 + 0.5 * (2.0 * PI * i as f64 / n as f64).sin() * (2.0 * PI * j as f64 / n as f64).cos()
    })
    .unwrap();
    let profile = [
        (0..n).map(|i| 1.0 + 0.6 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
        (0..n).map(|i| 1.0 + 0.4 * (4.0 * PI * i as f64 / n as f64).sin()).collect(),
    ];
    let per_batch = 4u64;
    let mut decreasing = 0;
    let mut ratios = Vec::new();
    for batch in 0..10u64 {
        let seeds: Vec<u64> = (0..per_batch).map(|s| 1000 * batch + s).collect();
        let table = particle_vs_meanfield(&r, &profile, &[1_000, 10_000], 1.0, &seeds).unwrap();
        let means = table.mean_by_k();
        if means[1].1 < means[0].1 {
            decreasing += 1;
        }
        ratios.push(means[0].1 / means[1].1);
    }
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[4] + sorted[5]);
    outcome(
        decreasing >= 8 && (1.5..=6.0).contains(&median),
        format!("error decreased in {decreasing}/10 batches, median ratio {median:.2}"),
    )
}

fn self_diffusion() -> Outcome {
    let pairs = log_sample_pairs(0.1, 10.0, 10);
    let check = |alpha: f64, beta: f64| {
        power_law_family(1.0, 1.0, 1.0, 1.0, alpha, beta)
            .iter()
            .all(|(h, k)| check_self_diffusion_compat(h, k, &pairs).unwrap().passed)
    };
    let at_one = check(1.0, 1.0);
    let at_one_and_half = check(1.0, 1.5);
    outcome(
        at_one && !at_one_and_half,
        format!("alpha*beta = 1 passes: {at_one}, alpha*beta = 1.5 passes: {at_one_and_half}"),
    )
}

fn penalisation() -> Outcome {
    let n = 64;
    let g = Grid::torus(1, n).unwrap();
    let mask = Field::from_fn(g, |x| if (0.4..0.6).contains(&x[0]) { 1.0 } else { 0.0 });
    let targets = [0.5, 1.5];
    let gaps: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&eps| {
            let mut sp = torus_spec(n, 0.2);
            sp = SystemSpec::new(
                sp.grid,
                sp.rates.clone(),
                sp.structure.clone(),
                sp.kernel.clone(),
                0.0,
                Some(Penalisation {
                    epsilon: eps,
                    targets: targets.to_vec(),
                    mask: mask.clone(),
                }),
            )
            .unwrap();
            let mut o = RunOptions::new(0.1);
            o.monitor_entropy = false;
            let r = run(&sp, cosine(g), &o).unwrap();
            let fin = &r.final_state().fields;
            (0..2)
                .flat_map(|i| {
                    fin[i]
                        .values()
                        .iter()
                        .zip(mask.values())
                        .filter(|(_, m)| **m > 0.0)
                        .map(move |(u, _)| (u - targets[i]).abs())
                })
                .fold(0.0, f64::max)
        })
        .collect();
    outcome(
        gaps.windows(2).all(|w| w[1] < w[0]),
        format!("sup gap on mask [{}]", sci(&gaps)),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, start: Instant, o: Outcome| {
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        if !o.passed {
            failures += 1;
        }
        println!("[{verdict}] {id:>2} {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
    };

    let t = Instant::now();
    report(1, "M-matrix symmetry", t, m_matrix_symmetry());

    let t = Instant::now();
    let (sp, r) = torus_run();
    report(2, "entropy monotonicity", t, entropy_monotonicity(&r));
    report(3, "mass conservation", t, mass_conservation(&r));
    report(4, "maximum principle", t, maximum_principle(&sp, &r));

    let t = Instant::now();
    report(5, "nonlocal to local convergence", t, nonlocal_to_local());
    let t = Instant::now();
    report(6, "delta-kernel reduction", t, delta_kernel_reduction());
    let t = Instant::now();
    report(7, "Kolmogorov positivity and duality", t, kolmogorov());
    let t = Instant::now();
    report(8, "general-domain scheme", t, general_domain());
    let t = Instant::now();
    report(9, "pair-jump identities", t, pair_jump_identities());
    let t = Instant::now();
    report(10, "particle to mean-field", t, particle_limit());
    let t = Instant::now();
    report(11, "self-diffusion compatibility", t, self_diffusion());
    let t = Instant::now();
    report(12, "Dirichlet penalisation", t, penalisation());

    println!("{} of 12 acceptance checks passed", 12 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
