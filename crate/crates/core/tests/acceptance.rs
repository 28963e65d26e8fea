//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line (visible with `--nocapture`; failures always surface).

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wgs_auction::auction_exchange::{add_dummy_agent, run_exchange_auction, strip_dummy};
use wgs_auction::auction_sr::run_sr_auction;
use wgs_auction::demand::{demand, elasticity_bound, ConicPart};
use wgs_auction::fnp::{fnp_gale_convex, verify_fnp_conditions, GaleSolverConfig};
use wgs_auction::market_model::{ExchangeAgent, NSWAgent, SRAgent};
use wgs_auction::{
    brute_force_fisher_eq, brute_force_nsw, check_approx_equilibrium, check_approx_sr,
    find_new_prices, property_suite, solve_nsw, Bundle, DemandSpec, ExchangeConfig,
    ExchangeInstance, ExchangeOutcome, Family, FnpChoice, IndividualPrices, NSWInstance,
    PriceVector, SRConfig, SRInitMode, SRInstance, SRStatus, Segment,
};

fn conclude(id: u32, name: &str, failures: Vec<String>) {
    if failures.is_empty() {
        println!("ACCEPTANCE {id:02} {name}: PASS");
    } else {
        println!("ACCEPTANCE {id:02} {name}: FAIL");
        for f in &failures {
            println!("  - {f}");
        }
        panic!("criterion {id} failed with {} problem(s)", failures.len());
    }
}

// ---------------------------------------------------------------- generators

fn sample_exchange_spec(rng: &mut ChaCha8Rng, m: usize) -> DemandSpec {
    match rng.gen_range(0..4) {
        0 => DemandSpec::Linear {
            v: (0..m).map(|_| rng.gen_range(0.2..3.0)).collect(),
        },
        1 => DemandSpec::Ces {
            beta: (0..m).map(|_| rng.gen_range(0.2..2.0)).collect(),
            sigma: rng.gen_range(1.0..3.0),
        },
        2 => {
            let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..2.0)).collect();
            let s: f64 = raw.iter().sum();
            DemandSpec::CobbDouglas {
                alpha: raw.iter().map(|a| a / s).collect(),
            }
        }
        _ => DemandSpec::Conic {
            parts: (0..2)
                .map(|_| ConicPart {
                    lambda: rng.gen_range(0.3..1.2),
                    demand: Box::new(DemandSpec::Ces {
                        beta: (0..m).map(|_| rng.gen_range(0.2..2.0)).collect(),
                        sigma: rng.gen_range(1.0..2.5),
                    }),
                })
                .collect(),
        },
    }
}

fn gen_exchange(seed: u64, eps: f64) -> ExchangeInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=6);
    let m = rng.gen_range(2..=6);
    let agents = (0..n)
        .map(|_| ExchangeAgent {
            endowment: (0..m).map(|_| rng.gen_range(0.2..2.0)).collect(),
            demand: sample_exchange_spec(&mut rng, m),
        })
        .collect();
    ExchangeInstance { eps, agents }
}

/// Linear Fisher market where each good is some agent's clear favorite, so
/// small uniform initial prices admit full coverage.
fn gen_anchored_linear_fisher(seed: u64, m: usize, eps: f64) -> SRInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents: Vec<SRAgent> = (0..m)
        .map(|i| {
            let v: Vec<f64> = (0..m)
                .map(|j| {
                    if j == i {
                        rng.gen_range(3.0..5.0)
                    } else {
                        rng.gen_range(0.2..1.0)
                    }
                })
                .collect();
            SRAgent {
                budget: rng.gen_range(0.5..2.0),
                demand: DemandSpec::Linear { v },
            }
        })
        .collect();
    let total: f64 = agents.iter().map(|a| a.budget).sum();
    SRInstance {
        eps,
        agents,
        caps: vec![f64::INFINITY; m],
        init_prices: Some(vec![0.02 * total / m as f64; m]),
    }
}

struct ExchangeRun {
    eps: f64,
    inst: ExchangeInstance,
    outcome: ExchangeOutcome,
}

fn exchange_battery() -> &'static (Vec<ExchangeRun>, Duration) {
    static RUNS: OnceLock<(Vec<ExchangeRun>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let mut runs = Vec::new();
        for (k, &eps) in [0.25, 0.1, 0.05].iter().enumerate() {
            for s in 0..10u64 {
                let inst = gen_exchange(1000 * (k as u64 + 1) + s, eps);
                let outcome =
                    run_exchange_auction(&inst, &ExchangeConfig::new(eps), None).unwrap();
                runs.push(ExchangeRun { eps, inst, outcome });
            }
        }
        (runs, start.elapsed())
    })
}

// ----------------------------------------------------------------- criteria

#[test]
fn criterion_01_exchange_runs_certify_at_4eps() {
    let (runs, elapsed) = exchange_battery();
    let mut failures = Vec::new();
    for (k, run) in runs.iter().enumerate() {
        let cert = check_approx_equilibrium(&run.inst, &run.outcome.report, 4.0 * run.eps);
        if !cert.pass() {
            failures.push(format!(
                "run {k} (eps {}): {:?}",
                run.eps,
                &cert.failures[..cert.failures.len().min(2)]
            ));
        }
    }
    if *elapsed > Duration::from_secs(60) {
        failures.push(format!("battery took {elapsed:?} (limit 60 s)"));
    }
    conclude(1, "exchange battery certifies at 4*eps", failures);
}

#[test]
fn criterion_02_rounds_per_iteration_bounded() {
    let (runs, _) = exchange_battery();
    let mut failures = Vec::new();
    for (k, run) in runs.iter().enumerate() {
        let bound = (2.0 / run.eps).ceil() as u32;
        let worst = run
            .outcome
            .report
            .stats
            .rounds_per_iteration
            .iter()
            .copied()
            .max()
            .unwrap_or(0);
        if worst > bound {
            failures.push(format!("run {k}: {worst} rounds > bound {bound}"));
        }
    }
    conclude(2, "rounds per iteration within ceil(2/eps)", failures);
}

#[test]
fn criterion_03_minimum_price_stays_low() {
    // Exponents never decrease, so the final minimum exponent bounds every
    // intermediate state.
    let (runs, _) = exchange_battery();
    let mut failures = Vec::new();
    for (k, run) in runs.iter().enumerate() {
        let e = run.outcome.report.prices.min_exponent();
        if e > 1 {
            failures.push(format!("run {k}: minimum exponent {e} > 1"));
        }
    }
    conclude(3, "minimum price exponent at most 1", failures);
}

#[test]
fn criterion_04_invariant_suite_clean() {
    let (runs, _) = exchange_battery();
    let mut failures = Vec::new();
    for (k, run) in runs.iter().enumerate() {
        let inv = &run.outcome.invariants;
        if inv.violations > 0 {
            failures.push(format!("run {k}: {} invariant violations", inv.violations));
        }
        if inv.max_surplus_drift > 1e-9 {
            failures.push(format!("run {k}: surplus drift {}", inv.max_surplus_drift));
        }
    }
    conclude(4, "per-step invariants hold with drift <= 1e-9", failures);
}

#[test]
fn criterion_05_sr_prices_match_fisher_oracle() {
    let start = Instant::now();
    let eps = 0.02;
    let mut failures = Vec::new();
    for (k, seed) in [504u64, 506, 540, 542, 556].into_iter().enumerate() {
        let s = k;
        let m = 2;
        let inst = gen_anchored_linear_fisher(seed, m, eps);
        let config = SRConfig {
            fnp: FnpChoice::Auto,
            init: SRInitMode::Given,
            price_cap: None,
        };
        let out = run_sr_auction(&inst, &config).unwrap();
        if out.report.status != SRStatus::Equilibrium {
            failures.push(format!("instance {s}: no equilibrium"));
            continue;
        }
        let (oracle_p, _) = brute_force_fisher_eq(&inst).unwrap();
        for j in 0..m {
            let got = out.report.prices.value(j);
            let want = oracle_p[j];
            if got > want * (1.0 + 5.0 * eps) || got < want / (1.0 + 5.0 * eps) {
                failures.push(format!(
                    "instance {s} good {j}: price {got} vs oracle {want}"
                ));
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(10) {
        failures.push(format!("oracle comparison took {elapsed:?} (limit 10 s)"));
    }
    conclude(5, "SR prices within (1+5*eps) of the oracle", failures);
}

#[test]
fn criterion_06_demand_properties_hold() {
    let mut failures = Vec::new();
    for family in Family::ALL {
        let report = property_suite(family, 1000, 42);
        if !report.pass() {
            failures.push(format!(
                "{}: {} violations, first: {}",
                report.family,
                report.violations.len(),
                report.violations[0]
            ));
        }
    }
    conclude(6, "randomized demand properties (1000 trials/family)", failures);
}

#[test]
fn criterion_07_fnp_contracts_hold_in_bulk() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut failures = Vec::new();
    let mut calls: u64 = 0;
    let solver_calls: u64 = exchange_battery()
        .0
        .iter()
        .map(|r| r.outcome.report.stats.fnp_calls)
        .sum();

    let check = |spec: &DemandSpec, rng: &mut ChaCha8Rng, failures: &mut Vec<String>| {
        let m = spec.m();
        let eps = [0.25, 0.1, 0.05][rng.gen_range(0..3)];
        let base: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..2.0)).collect();
        let p = PriceVector::new(base.clone(), eps);
        let p_i = IndividualPrices::new(base);
        let b = rng.gen_range(0.5..3.0);
        let full = demand(spec, &p_i.values().to_vec(), b);
        let theta = [0.0, 0.3, 0.9][rng.gen_range(0..3)];
        let c = Bundle(full.bundle.0.iter().map(|x| x * theta).collect());
        match find_new_prices(spec, FnpChoice::Auto, &p_i, &p, &c, b, Some(&full)) {
            Ok(r) => {
                if let Err(e) = verify_fnp_conditions(&r, &p_i, &p, &c, b) {
                    failures.push(format!("contract violated: {e}"));
                }
                match spec {
                    DemandSpec::Basplc { segments, .. } => {
                        let k: u64 = segments.iter().map(|s| s.len() as u64).sum();
                        if r.price_steps > k {
                            failures.push(format!(
                                "basplc steps {} > segment count {k}",
                                r.price_steps
                            ));
                        }
                    }
                    _ => {
                        if let Some(f) = elasticity_bound(spec) {
                            let bound = (m as f64 * f.ceil().max(1.0)).ceil() as u64;
                            if r.price_steps > bound {
                                failures.push(format!(
                                    "elasticity bumps {} > bound {bound}",
                                    r.price_steps
                                ));
                            }
                        }
                    }
                }
            }
            Err(e) => failures.push(format!("FNP errored: {e:?}")),
        }
    };

    let mut property_rng = ChaCha8Rng::seed_from_u64(7701);
    for _ in 0..2600 {
        for family in [
            Family::Linear,
            Family::Ces,
            Family::CobbDouglas,
            Family::Basplc,
        ] {
            let spec = wgs_auction::verify::sample_spec(family, &mut property_rng);
            check(&spec, &mut rng, &mut failures);
            calls += 1;
            if failures.len() > 5 {
                break;
            }
        }
        if failures.len() > 5 {
            break;
        }
    }

    // Convex-program variant: must converge to its 1e-6 residual and satisfy
    // the same output conditions.
    for _ in 0..150 {
        let spec = wgs_auction::verify::sample_spec(
            if rng.gen_bool(0.5) {
                Family::Ces
            } else {
                Family::CobbDouglas
            },
            &mut property_rng,
        );
        let m = spec.m();
        let eps = 0.1;
        let base: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..2.0)).collect();
        let p = PriceVector::new(base.clone(), eps);
        let q: Vec<f64> = (0..m).map(|j| p.cap_value(j)).collect();
        let b = rng.gen_range(0.5..3.0);
        let full = demand(&spec, &base, b);
        let c = Bundle(full.bundle.0.iter().map(|x| x * 0.5).collect());
        match fnp_gale_convex(&spec, &base, &q, &c, b, GaleSolverConfig::default()) {
            Ok(r) => {
                let p_i = IndividualPrices::new(base);
                if let Err(e) = verify_fnp_conditions(&r, &p_i, &p, &c, b) {
                    failures.push(format!("convex variant contract violated: {e}"));
                }
                calls += 1;
            }
            Err(e) => failures.push(format!("convex variant failed to converge: {e:?}")),
        }
        if failures.len() > 5 {
            break;
        }
    }

    let total = calls + solver_calls;
    if total < 10_000 {
        failures.push(format!("only {total} FNP calls logged (need >= 10^4)"));
    }
    conclude(7, "FNP output conditions and step bounds", failures);
}

#[test]
fn criterion_08_sr_battery_certifies_and_nonexistence_breaches() {
    let eps = 0.1;
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut instances: Vec<SRInstance> = Vec::new();
    for s in 0..5u64 {
        instances.push(gen_anchored_linear_fisher(800 + s, 2 + (s % 3) as usize, eps));
    }
    for _ in 0..4 {
        let m = rng.gen_range(2..=4);
        let agents = (0..rng.gen_range(2..=3))
            .map(|_| SRAgent {
                budget: rng.gen_range(0.5..2.0),
                demand: DemandSpec::Ces {
                    beta: (0..m).map(|_| rng.gen_range(0.2..2.0)).collect(),
                    sigma: rng.gen_range(1.0..3.0),
                },
            })
            .collect::<Vec<_>>();
        let total: f64 = agents.iter().map(|a| a.budget).sum();
        instances.push(SRInstance {
            eps,
            agents,
            caps: vec![f64::INFINITY; m],
            init_prices: Some(vec![0.02 * total / m as f64; m]),
        });
    }
    for _ in 0..3 {
        let m = rng.gen_range(2..=3);
        let agents = (0..2)
            .map(|_| {
                let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.3..1.5)).collect();
                let s: f64 = raw.iter().sum();
                SRAgent {
                    budget: rng.gen_range(0.5..1.5),
                    demand: DemandSpec::CobbDouglas {
                        alpha: raw.iter().map(|a| a / s).collect(),
                    },
                }
            })
            .collect::<Vec<_>>();
        let total: f64 = agents.iter().map(|a| a.budget).sum();
        instances.push(SRInstance {
            eps,
            agents,
            caps: vec![f64::INFINITY; m],
            init_prices: Some(vec![0.02 * total / m as f64; m]),
        });
    }
    for _ in 0..3 {
        let m = rng.gen_range(2..=3);
        let agents = (0..2)
            .map(|_| {
                let segments = (0..m)
                    .map(|_| {
                        let r1 = rng.gen_range(2.0..5.0);
                        vec![
                            Segment {
                                rate: r1,
                                len: rng.gen_range(0.6..1.2),
                            },
                            Segment {
                                rate: r1 * rng.gen_range(0.3..0.8),
                                len: rng.gen_range(0.6..1.5),
                            },
                        ]
                    })
                    .collect();
                SRAgent {
                    budget: rng.gen_range(0.5..1.5),
                    demand: DemandSpec::Basplc {
                        segments,
                        cap: f64::INFINITY,
                    },
                }
            })
            .collect::<Vec<_>>();
        let total: f64 = agents.iter().map(|a| a.budget).sum();
        instances.push(SRInstance {
            eps,
            agents,
            caps: vec![f64::INFINITY; m],
            init_prices: Some(vec![0.02 * total / m as f64; m]),
        });
    }

    for (k, inst) in instances.iter().enumerate() {
        let given = SRConfig {
            fnp: FnpChoice::Auto,
            init: SRInitMode::Given,
            price_cap: None,
        };
        match run_sr_auction(inst, &given) {
            Ok(out) if out.report.status == SRStatus::Equilibrium => {
                let cert = check_approx_sr(inst, &out.report, 4.0 * eps, false);
                if !cert.pass() {
                    failures.push(format!(
                        "instance {k} (given init): {:?}",
                        &cert.failures[..cert.failures.len().min(2)]
                    ));
                }
            }
            Ok(out) => failures.push(format!(
                "instance {k} (given init): status {:?}",
                out.report.status
            )),
            Err(e) => failures.push(format!("instance {k} (given init): {e:?}")),
        }
        let uniform = SRConfig {
            fnp: FnpChoice::Auto,
            init: SRInitMode::UniformEmpty,
            price_cap: None,
        };
        match run_sr_auction(inst, &uniform) {
            Ok(out) if out.report.status == SRStatus::Equilibrium => {
                let cert = check_approx_sr(inst, &out.report, 4.0 * eps, true);
                if !cert.pass() {
                    failures.push(format!(
                        "instance {k} (uniform init): {:?}",
                        &cert.failures[..cert.failures.len().min(2)]
                    ));
                }
            }
            Ok(out) => failures.push(format!(
                "instance {k} (uniform init): status {:?}",
                out.report.status
            )),
            Err(e) => failures.push(format!("instance {k} (uniform init): {e:?}")),
        }
    }

    // An agent that must overspend a capped good: no equilibrium exists and
    // the run reports a cap breach.
    let noeq = SRInstance {
        eps,
        agents: vec![SRAgent {
            budget: 10.0,
            demand: DemandSpec::CobbDouglas {
                alpha: vec![0.5, 0.5],
            },
        }],
        caps: vec![1.0, f64::INFINITY],
        init_prices: None,
    };
    let config = SRConfig {
        fnp: FnpChoice::Auto,
        init: SRInitMode::UniformEmpty,
        price_cap: Some(100.0),
    };
    match run_sr_auction(&noeq, &config) {
        Ok(out) if out.report.status == SRStatus::CapBreach => {}
        Ok(out) => failures.push(format!(
            "nonexistence instance: status {:?}",
            out.report.status
        )),
        Err(e) => failures.push(format!("nonexistence instance: {e:?}")),
    }
    conclude(8, "SR battery certifies; nonexistence breaches the cap", failures);
}

fn gen_nsw(seed: u64) -> NSWInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=3);
    let m = rng.gen_range(2..=4);
    let copies: Vec<u64> = (0..m)
        .map(|_| rng.gen_range(1..=3u64))
        .collect();
    let copies = if copies.iter().sum::<u64>() > 10 {
        vec![1; m]
    } else {
        copies
    };
    let agents = (0..n)
        .map(|_| {
            let segments = copies
                .iter()
                .map(|&d| {
                    let r1: f64 = rng.gen_range(0.5..4.0);
                    if d > 1 && rng.gen_bool(0.5) {
                        let split = rng.gen_range(1..d);
                        vec![
                            Segment {
                                rate: r1,
                                len: split as f64,
                            },
                            Segment {
                                rate: r1 * rng.gen_range(0.3..0.9),
                                len: (d - split) as f64,
                            },
                        ]
                    } else {
                        vec![Segment {
                            rate: r1,
                            len: d as f64,
                        }]
                    }
                })
                .collect();
            let cap = if rng.gen_bool(0.4) {
                rng.gen_range(0.8..2.5)
            } else {
                f64::INFINITY
            };
            NSWAgent { segments, cap }
        })
        .collect();
    NSWInstance {
        eps: 0.0,
        copies,
        agents,
    }
}

#[test]
fn criterion_09_nsw_factor_and_upper_bound() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for s in 0..20u64 {
        let inst = gen_nsw(900 + s);
        let (opt, _) = brute_force_nsw(&inst).unwrap();
        match solve_nsw(&inst) {
            Ok(out) => {
                if out.value < opt / 2.404 - 1e-9 {
                    failures.push(format!(
                        "instance {s}: rounded {} below OPT/2.404 = {}",
                        out.value,
                        opt / 2.404
                    ));
                }
                if opt > out.upper_bound + 1e-6 {
                    failures.push(format!(
                        "instance {s}: OPT {opt} exceeds bound {}",
                        out.upper_bound
                    ));
                }
            }
            Err(e) => failures.push(format!("instance {s}: solve failed: {e:?}")),
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(120) {
        failures.push(format!("battery took {elapsed:?} (limit 120 s)"));
    }
    conclude(9, "NSW 2.404 factor and price upper bound", failures);
}

#[test]
fn criterion_10_dummy_agent_bounds_prices() {
    let eps = 0.05;
    let eta = 1.0;
    let mut failures = Vec::new();
    for s in 0..5u64 {
        let mut inst = gen_exchange(1100 + s, eps);
        // Keep within the precondition eps(1+eps)m < eta/(1+eta).
        while inst.m() > 4 {
            inst = gen_exchange(1100 + s + 50, eps);
        }
        let m = inst.m();
        let augmented = match add_dummy_agent(&inst, eta) {
            Ok(a) => a,
            Err(e) => {
                failures.push(format!("instance {s}: augmentation failed: {e:?}"));
                continue;
            }
        };
        let out = run_exchange_auction(&augmented, &ExchangeConfig::new(eps), None).unwrap();
        let prices = out.report.prices.values();
        let ratio = prices.iter().cloned().fold(0.0f64, f64::max)
            / prices.iter().cloned().fold(f64::INFINITY, f64::min);
        let supply = augmented.total_supply();
        let e_ratio = supply.iter().cloned().fold(0.0f64, f64::max)
            / supply.iter().cloned().fold(f64::INFINITY, f64::min);
        let denom = eta - eps * m as f64 * (1.0 + eps) * (1.0 + eta);
        let bound = (1.0 + eps) * m as f64 / denom * e_ratio;
        if ratio > bound * (1.0 + 1e-9) {
            failures.push(format!("instance {s}: price ratio {ratio} > bound {bound}"));
        }
        let stripped = strip_dummy(&out.report, &inst);
        let cert = check_approx_equilibrium(&inst, &stripped, 4.0 * eps * (1.0 + eta));
        if !cert.pass() {
            failures.push(format!(
                "instance {s}: stripped report fails: {:?}",
                &cert.failures[..cert.failures.len().min(2)]
            ));
        }
    }
    conclude(10, "dummy agent price bound and stripped certification", failures);
}

#[test]
fn criterion_11_outbid_passes_grow_as_eps_shrinks() {
    let mut failures = Vec::new();
    let eps_grid = [0.2, 0.1, 0.05];
    let mut csv = String::from("instance,eps,round_cap,iterations,outbid_passes\n");
    let mut totals = vec![0u64; eps_grid.len()];
    for s in 1..=3u64 {
        let mut series = Vec::new();
        for (k, &eps) in eps_grid.iter().enumerate() {
            let inst = gen_exchange(1200 + s, eps);
            let out = run_exchange_auction(&inst, &ExchangeConfig::new(eps), None).unwrap();
            let passes = out.report.stats.outbid_passes;
            csv.push_str(&format!(
                "{s},{eps},{},{},{passes}\n",
                (2.0 / eps).ceil() as u32,
                out.report.stats.iterations
            ));
            totals[k] += passes;
            series.push(passes);
        }
        for w in series.windows(2) {
            if w[1] < w[0] {
                failures.push(format!("instance {s}: passes dropped {} -> {}", w[0], w[1]));
            }
        }
    }
    for w in totals.windows(2) {
        if w[1] <= w[0] {
            failures.push(format!("aggregate passes not increasing: {totals:?}"));
            break;
        }
    }
    let out_dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-bench.csv");
    std::fs::write(&out_dir, csv).ok();
    conclude(11, "outbid passes grow as eps shrinks", failures);
}
