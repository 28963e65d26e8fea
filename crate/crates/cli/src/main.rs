//! Command-line front end for the wgs-auction solvers.
//!
//! Exit codes: 0 certified success, 1 certified failure, 2 usage error,
//! 3 nonexistence (price-cap breach).
//!
//! All instance and report files are JSON; infinite caps are encoded as the
//! string "inf". Step traces are JSONL, one object per step. The env var
//! WGS_AUCTION_LOG controls stderr verbosity: off (default), "summary", or
//! "step".

use clap::{Args, Parser, Subcommand};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use wgs_auction::auction_exchange::{add_dummy_agent, strip_dummy};
use wgs_auction::auction_sr::price_cap_bound;
use wgs_auction::fnp::verify_fnp_conditions;
use wgs_auction::{
    brute_force_fisher_eq, brute_force_nsw, check_approx_equilibrium, check_approx_sr, demand,
    find_new_prices, property_suite, run_exchange_auction, run_sr_auction, validate_instance,
    Bundle, Certificate, ExchangeConfig, Family, FnpChoice, IndividualPrices, Instance,
    PriceVector, RunStats, SRConfig, SRInitMode, SRStatus, StepTrace,
};

const EXIT_OK: u8 = 0;
const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NONEXISTENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "wgs-auction", version, about = "Ascending-price auction solvers for WGS markets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an exchange-market instance and certify the result.
    SolveExchange(SolveExchangeArgs),
    /// Solve a spending-restricted Fisher instance and certify the result.
    SolveSr(SolveSrArgs),
    /// Approximate Nash social welfare for a budget-additive SPLC instance.
    SolveNsw(SolveNswArgs),
    /// Re-check a report against its instance without solver state.
    Verify(VerifyArgs),
    /// Randomized property checks on the demand-system families.
    Properties(PropertiesArgs),
    /// Brute-force reference solvers for tiny instances.
    Oracle(OracleArgs),
    /// Batch runs over a directory of instances; emits a CSV table.
    Bench(BenchArgs),
    /// Run one FindNewPrices call and dump inputs, result, and checks.
    FnpDebug(FnpDebugArgs),
    /// Re-run an instance and compare against a recorded step trace.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct SolveExchangeArgs {
    instance: PathBuf,
    /// Accuracy parameter; overrides the instance value. Must lie in (0, 0.25).
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value = "auto")]
    fnp: FnpChoice,
    /// Augment the instance with a stabilizing agent owning eta * e before
    /// solving; its holdings are stripped from the report afterwards.
    #[arg(long)]
    dummy_eta: Option<f64>,
    /// Hard bound on any price exponent.
    #[arg(long)]
    max_exponent: Option<u32>,
    /// Seed for the outbid victim order.
    #[arg(long)]
    seed: Option<u64>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSONL step-trace destination.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SolveSrArgs {
    instance: PathBuf,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value = "auto")]
    fnp: FnpChoice,
    /// "given" starts from the instance's initial prices with exact clearing;
    /// "uniform" starts empty and certifies weak clearing.
    #[arg(long, default_value = "given")]
    init: SRInitMode,
    /// Hard price cap; defaults to the derived existence bound when finite.
    #[arg(long)]
    price_cap: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveNswArgs {
    instance: PathBuf,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also compute the exact optimum and check the 2.404 factor.
    #[arg(long)]
    certify_bruteforce: bool,
}

#[derive(Args)]
struct VerifyArgs {
    instance: PathBuf,
    report: PathBuf,
    /// Accuracy the report claims; the check runs at tolerance 4 * eps.
    #[arg(long)]
    eps: Option<f64>,
    /// Accept unsold value up to eps * total budget instead of exact clearing.
    #[arg(long)]
    weak_clearing: bool,
}

#[derive(Args)]
struct PropertiesArgs {
    /// linear, cobb_douglas, ces, conic, basplc, or "all".
    #[arg(long, default_value = "all")]
    family: String,
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct OracleArgs {
    /// "nsw-bruteforce" or "fisher-eg".
    mode: String,
    instance: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory of exchange-instance JSON files.
    dir: PathBuf,
    /// Comma-separated accuracy values.
    #[arg(long, default_value = "0.2,0.1")]
    eps: String,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FnpDebugArgs {
    instance: PathBuf,
    /// Agent whose demand system is exercised.
    #[arg(long, default_value_t = 0)]
    agent: usize,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value = "auto")]
    fnp: FnpChoice,
    /// Holdings are theta * demand at the base prices.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
}

#[derive(Args)]
struct ReplayArgs {
    instance: PathBuf,
    trace: PathBuf,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value = "auto")]
    fnp: FnpChoice,
    #[arg(long)]
    max_exponent: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
    };
    ExitCode::from(code)
}

fn run(cli: Cli) -> Result<u8, String> {
    match cli.command {
        Command::SolveExchange(a) => solve_exchange(a),
        Command::SolveSr(a) => solve_sr(a),
        Command::SolveNsw(a) => solve_nsw_cmd(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Properties(a) => properties_cmd(a),
        Command::Oracle(a) => oracle_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::FnpDebug(a) => fnp_debug_cmd(a),
        Command::Replay(a) => replay_cmd(a),
    }
}

/// 0 = silent, 1 = run summaries, 2 = per-step echo.
fn log_level() -> u8 {
    match std::env::var("WGS_AUCTION_LOG").as_deref() {
        Ok("summary") | Ok("info") | Ok("1") => 1,
        Ok("step") | Ok("debug") | Ok("trace") | Ok("2") => 2,
        _ => 0,
    }
}

fn read_instance(path: &Path) -> Result<Instance, String> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Instance::from_json(&text).map_err(|e| e.to_string())
}

fn check_eps_range(eps: f64) -> Result<(), String> {
    if eps > 0.0 && eps < 0.25 {
        Ok(())
    } else {
        Err(format!("eps must lie in (0, 0.25), got {eps}"))
    }
}

fn validate_or_fail(inst: &Instance) -> Result<(), String> {
    let violations = validate_instance(inst);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations.join("; "))
    }
}

/// Wall time varies between runs; zero it so identical (instance, config,
/// seed) inputs always produce byte-identical report files.
fn scrub_stats(stats: &mut RunStats) {
    stats.wall_time_ms = 0.0;
}

fn emit_json(out: Option<&Path>, value: &serde_json::Value) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text)
            .map_err(|e| format!("cannot write {}: {e}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_value<T: serde::Serialize>(x: &T) -> serde_json::Value {
    serde_json::to_value(x).expect("report serialization")
}

fn cert_summary(cert: &Certificate) -> serde_json::Value {
    serde_json::json!({
        "pass": cert.pass(),
        "domination_slack": cert.domination_slack,
        "clearing_residual": cert.clearing_residual,
        "leftover_value": cert.leftover_value,
        "leftover_bound": cert.leftover_bound,
        "failures": cert.failures,
    })
}

fn solve_exchange(a: SolveExchangeArgs) -> Result<u8, String> {
    let inst = read_instance(&a.instance)?;
    let Instance::Exchange(mut inst) = inst else {
        return Err("solve-exchange expects an instance with kind \"exchange\"".into());
    };
    if let Some(eps) = a.eps {
        inst.eps = eps;
    }
    check_eps_range(inst.eps)?;
    validate_or_fail(&Instance::Exchange(inst.clone()))?;

    let solved = match a.dummy_eta {
        Some(eta) => add_dummy_agent(&inst, eta).map_err(|e| e.to_string())?,
        None => inst.clone(),
    };
    let mut config = ExchangeConfig::new(inst.eps);
    config.fnp = a.fnp;
    config.victim_seed = a.seed;
    if let Some(me) = a.max_exponent {
        config.max_exponent = me;
    }

    let level = log_level();
    let mut trace_file = match &a.trace {
        Some(path) => Some(
            fs::File::create(path)
                .map_err(|e| format!("cannot create {}: {e}", path.display()))?,
        ),
        None => None,
    };
    let mut sink = |step: &StepTrace| {
        let line = serde_json::to_string(step).expect("trace serialization");
        if let Some(f) = trace_file.as_mut() {
            writeln!(f, "{line}").expect("trace write");
        }
        if level >= 2 {
            eprintln!("{line}");
        }
    };
    let want_trace = a.trace.is_some() || level >= 2;
    let cb: Option<&mut dyn FnMut(&StepTrace)> =
        if want_trace { Some(&mut sink) } else { None };

    let start = std::time::Instant::now();
    let outcome = run_exchange_auction(&solved, &config, cb).map_err(|e| e.to_string())?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;

    let (mut report, tol) = match a.dummy_eta {
        Some(eta) => (
            strip_dummy(&outcome.report, &inst),
            4.0 * inst.eps * (1.0 + eta),
        ),
        None => (outcome.report, 4.0 * inst.eps),
    };
    scrub_stats(&mut report.stats);
    let cert = check_approx_equilibrium(&inst, &report, tol);

    if level >= 1 {
        eprintln!(
            "solve-exchange: n={} m={} eps={} iterations={} outbid={} surplus={:.6} wall={:.1}ms cert={}",
            inst.n(),
            inst.m(),
            inst.eps,
            report.stats.iterations,
            report.stats.outbid_passes,
            report.total_surplus,
            wall_ms,
            if cert.pass() { "pass" } else { "FAIL" }
        );
    }
    let doc = serde_json::json!({
        "kind": "exchange_report",
        "eps": inst.eps,
        "tolerance": tol,
        "report": to_value(&report),
        "invariants": to_value(&outcome.invariants),
        "certificate": cert_summary(&cert),
    });
    emit_json(a.out.as_deref(), &doc)?;
    Ok(if cert.pass() { EXIT_OK } else { EXIT_FAIL })
}

fn solve_sr(a: SolveSrArgs) -> Result<u8, String> {
    let inst = read_instance(&a.instance)?;
    let Instance::Sr(mut inst) = inst else {
        return Err("solve-sr expects an instance with kind \"sr\"".into());
    };
    if let Some(eps) = a.eps {
        inst.eps = eps;
    }
    check_eps_range(inst.eps)?;
    validate_or_fail(&Instance::Sr(inst.clone()))?;

    let config = SRConfig {
        fnp: a.fnp,
        init: a.init,
        price_cap: a.price_cap,
    };
    let outcome = run_sr_auction(&inst, &config).map_err(|e| e.to_string())?;
    let mut report = outcome.report;
    scrub_stats(&mut report.stats);

    let (code, cert) = match report.status {
        SRStatus::CapBreach => {
            eprintln!(
                "no SR-equilibrium within price cap {}",
                config
                    .price_cap
                    .or(price_cap_bound(&inst).bound)
                    .unwrap_or(f64::INFINITY)
            );
            (EXIT_NONEXISTENCE, None)
        }
        SRStatus::Equilibrium => {
            let cert = check_approx_sr(&inst, &report, 4.0 * inst.eps, report.weak_clearing);
            let code = if cert.pass() { EXIT_OK } else { EXIT_FAIL };
            (code, Some(cert))
        }
    };
    if log_level() >= 1 {
        eprintln!(
            "solve-sr: n={} m={} eps={} status={:?} rel-surplus={:.6}",
            inst.n(),
            inst.m(),
            inst.eps,
            report.status,
            report.total_relative_surplus
        );
    }
    let doc = serde_json::json!({
        "kind": "sr_report",
        "eps": inst.eps,
        "tolerance": 4.0 * inst.eps,
        "report": to_value(&report),
        "invariants": to_value(&outcome.invariants),
        "certificate": cert.as_ref().map(cert_summary),
    });
    emit_json(a.out.as_deref(), &doc)?;
    Ok(code)
}

fn solve_nsw_cmd(a: SolveNswArgs) -> Result<u8, String> {
    let inst = read_instance(&a.instance)?;
    let Instance::Nsw(mut inst) = inst else {
        return Err("solve-nsw expects an instance with kind \"nsw\"".into());
    };
    if let Some(eps) = a.eps {
        check_eps_range(eps)?;
        inst.eps = eps;
    }
    validate_or_fail(&Instance::Nsw(inst.clone()))?;

    let out = wgs_auction::solve_nsw(&inst).map_err(|e| e.to_string())?;
    let mut failures: Vec<String> = Vec::new();
    if out.value > out.upper_bound + 1e-6 {
        failures.push(format!(
            "rounded value {} exceeds the fractional upper bound {}",
            out.value, out.upper_bound
        ));
    }
    let optimum = if a.certify_bruteforce {
        let (opt, _) = brute_force_nsw(&inst).map_err(|e| e.to_string())?;
        if out.value + 1e-9 < opt / 2.404 {
            failures.push(format!(
                "rounded value {} below optimum/2.404 = {}",
                out.value,
                opt / 2.404
            ));
        }
        if opt > out.upper_bound + 1e-6 {
            failures.push(format!(
                "optimum {opt} exceeds the claimed upper bound {}",
                out.upper_bound
            ));
        }
        Some(opt)
    } else {
        None
    };
    if log_level() >= 1 {
        eprintln!(
            "solve-nsw: n={} m={} value={:.6} upper_bound={:.6}",
            inst.n(),
            inst.m(),
            out.value,
            out.upper_bound
        );
    }
    let doc = serde_json::json!({
        "kind": "nsw_report",
        "value": out.value,
        "upper_bound": out.upper_bound,
        "copies": out.allocation.copies,
        "per_copy_prices": out.equilibrium.prices,
        "mbb_residual": out.equilibrium.mbb_residual,
        "optimum": optimum,
        "failures": failures,
    });
    emit_json(a.out.as_deref(), &doc)?;
    Ok(if failures.is_empty() { EXIT_OK } else { EXIT_FAIL })
}

fn verify_cmd(a: VerifyArgs) -> Result<u8, String> {
    let inst = read_instance(&a.instance)?;
    let text = fs::read_to_string(&a.report)
        .map_err(|e| format!("cannot read {}: {e}", a.report.display()))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| format!("bad report JSON: {e}"))?;
    // Accept both a bare report and the wrapped document the solvers write.
    let body = doc.get("report").cloned().unwrap_or(doc);

    let cert = match inst {
        Instance::Exchange(inst) => {
            let eps = a.eps.unwrap_or(inst.eps);
            check_eps_range(eps)?;
            let report = serde_json::from_value(body)
                .map_err(|e| format!("not an exchange report: {e}"))?;
            check_approx_equilibrium(&inst, &report, 4.0 * eps)
        }
        Instance::Sr(inst) => {
            let eps = a.eps.unwrap_or(inst.eps);
            check_eps_range(eps)?;
            let report = serde_json::from_value(body)
                .map_err(|e| format!("not an SR report: {e}"))?;
            check_approx_sr(&inst, &report, 4.0 * eps, a.weak_clearing)
        }
        Instance::Nsw(_) => {
            return Err("verify supports exchange and sr reports".into());
        }
    };
    println!("{}", serde_json::to_string_pretty(&cert_summary(&cert)).unwrap());
    Ok(if cert.pass() { EXIT_OK } else { EXIT_FAIL })
}

fn properties_cmd(a: PropertiesArgs) -> Result<u8, String> {
    let families: Vec<Family> = if a.family == "all" {
        Family::ALL.to_vec()
    } else {
        vec![a.family.parse()?]
    };
    let mut ok = true;
    for family in families {
        let report = property_suite(family, a.trials, a.seed);
        if report.pass() {
            println!("{}: ok ({} trials)", report.family, report.trials);
        } else {
            ok = false;
            println!(
                "{}: {} violations in {} trials",
                report.family,
                report.violations.len(),
                report.trials
            );
            for v in report.violations.iter().take(10) {
                println!("  {v}");
            }
        }
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAIL })
}

fn oracle_cmd(a: OracleArgs) -> Result<u8, String> {
    let inst = read_instance(&a.instance)?;
    match (a.mode.as_str(), inst) {
        ("nsw-bruteforce", Instance::Nsw(inst)) => {
            let (opt, alloc) = brute_force_nsw(&inst).map_err(|e| e.to_string())?;
            let doc = serde_json::json!({"optimum": opt, "copies": alloc.copies});
            emit_json(None, &doc)?;
            Ok(EXIT_OK)
        }
        ("fisher-eg", Instance::Sr(inst)) => {
            let (prices, allocations) =
                brute_force_fisher_eq(&inst).map_err(|e| e.to_string())?;
            let doc = serde_json::json!({
                "prices": prices,
                "allocations": allocations.iter().map(|b| b.0.clone()).collect::<Vec<_>>(),
            });
            emit_json(None, &doc)?;
            Ok(EXIT_OK)
        }
        (mode @ ("nsw-bruteforce" | "fisher-eg"), _) => {
            Err(format!("oracle {mode} expects a matching instance kind"))
        }
        (mode, _) => Err(format!("unknown oracle mode: {mode}")),
    }
}

struct BenchRow {
    instance: String,
    result: Result<(usize, usize, f64, u32, RunStats), String>,
    eps: f64,
}

fn bench_cmd(a: BenchArgs) -> Result<u8, String> {
    let eps_list: Vec<f64> = a
        .eps
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("bad eps list: {e}")))
        .collect::<Result<_, _>>()?;
    for &eps in &eps_list {
        check_eps_range(eps)?;
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&a.dir)
        .map_err(|e| format!("cannot read {}: {e}", a.dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();

    // Instances run in parallel; each solver call stays single-threaded.
    let rows: Vec<BenchRow> = std::thread::scope(|scope| {
        let handles: Vec<_> = files
            .iter()
            .map(|path| {
                let eps_list = &eps_list;
                let seed = a.seed;
                scope.spawn(move || bench_one(path, eps_list, seed))
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });

    let mut csv = String::from(
        "instance,n,m,eps,round_cap,max_rounds,iterations,steps,outbid_passes,wall_ms,status\n",
    );
    let mut ok = true;
    for row in &rows {
        let cap = (2.0 / row.eps).ceil() as u32;
        match &row.result {
            Ok((n, m, wall_ms, max_rounds, stats)) => {
                if *max_rounds > cap {
                    ok = false;
                }
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{:.3},ok\n",
                    row.instance,
                    n,
                    m,
                    row.eps,
                    cap,
                    max_rounds,
                    stats.iterations,
                    stats.steps,
                    stats.outbid_passes,
                    wall_ms
                ));
            }
            Err(e) => {
                csv.push_str(&format!(
                    "{},,,{},{},,,,,,error: {}\n",
                    row.instance,
                    row.eps,
                    cap,
                    e.replace(',', ";")
                ));
            }
        }
    }
    match &a.out {
        Some(path) => fs::write(path, &csv)
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAIL })
}

fn bench_one(path: &Path, eps_list: &[f64], seed: Option<u64>) -> Vec<BenchRow> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let inst = match read_instance(path) {
        Ok(Instance::Exchange(inst)) => inst,
        Ok(_) => {
            return eps_list
                .iter()
                .map(|&eps| BenchRow {
                    instance: name.clone(),
                    result: Err("not an exchange instance".into()),
                    eps,
                })
                .collect();
        }
        Err(e) => {
            return eps_list
                .iter()
                .map(|&eps| BenchRow {
                    instance: name.clone(),
                    result: Err(e.clone()),
                    eps,
                })
                .collect();
        }
    };
    eps_list
        .iter()
        .map(|&eps| {
            let mut run = inst.clone();
            run.eps = eps;
            let mut config = ExchangeConfig::new(eps);
            config.victim_seed = seed;
            let start = std::time::Instant::now();
            let result = run_exchange_auction(&run, &config, None)
                .map(|out| {
                    let max_rounds = out
                        .report
                        .stats
                        .rounds_per_iteration
                        .iter()
                        .copied()
                        .max()
                        .unwrap_or(0);
                    (
                        run.n(),
                        run.m(),
                        start.elapsed().as_secs_f64() * 1e3,
                        max_rounds,
                        out.report.stats,
                    )
                })
                .map_err(|e| e.to_string());
            BenchRow {
                instance: name.clone(),
                result,
                eps,
            }
        })
        .collect()
}

fn fnp_debug_cmd(a: FnpDebugArgs) -> Result<u8, String> {
    let inst = read_instance(&a.instance)?;
    let (spec, budget, m, eps) = match &inst {
        Instance::Exchange(x) => {
            let agent = x.agents.get(a.agent).ok_or("agent index out of range")?;
            let b: f64 = agent.endowment.iter().sum();
            (agent.demand.clone(), b, x.m(), a.eps.unwrap_or(x.eps))
        }
        Instance::Sr(x) => {
            let agent = x.agents.get(a.agent).ok_or("agent index out of range")?;
            (agent.demand.clone(), agent.budget, x.m(), a.eps.unwrap_or(x.eps))
        }
        Instance::Nsw(_) => {
            return Err("fnp-debug supports exchange and sr instances".into());
        }
    };
    check_eps_range(eps)?;
    if !(0.0..=1.0).contains(&a.theta) {
        return Err(format!("theta must lie in [0, 1], got {}", a.theta));
    }

    let p = PriceVector::ones(m, eps);
    let p_i = IndividualPrices::new(vec![1.0; m]);
    let answer = demand(&spec, &vec![1.0; m], budget);
    let c = Bundle(answer.bundle.0.iter().map(|&x| a.theta * x).collect());
    let result = find_new_prices(&spec, a.fnp, &p_i, &p, &c, budget, Some(&answer))
        .map_err(|e| e.to_string())?;
    let check = verify_fnp_conditions(&result, &p_i, &p, &c, budget);

    let doc = serde_json::json!({
        "eps": eps,
        "budget": budget,
        "holdings": c.0,
        "demand_at_old_prices": answer.bundle.0,
        "new_prices": result.prices.values(),
        "at_cap": (0..m).map(|j| result.prices.is_at_cap(j)).collect::<Vec<_>>(),
        "new_bundle": result.bundle.0,
        "price_steps": result.price_steps,
        "strong": result.strong,
        "conditions": match &check {
            Ok(()) => serde_json::Value::String("ok".into()),
            Err(e) => serde_json::Value::String(e.clone()),
        },
    });
    emit_json(None, &doc)?;
    Ok(if check.is_ok() { EXIT_OK } else { EXIT_FAIL })
}

fn replay_cmd(a: ReplayArgs) -> Result<u8, String> {
    let inst = read_instance(&a.instance)?;
    let Instance::Exchange(mut inst) = inst else {
        return Err("replay expects an instance with kind \"exchange\"".into());
    };
    if let Some(eps) = a.eps {
        inst.eps = eps;
    }
    check_eps_range(inst.eps)?;

    let text = fs::read_to_string(&a.trace)
        .map_err(|e| format!("cannot read {}: {e}", a.trace.display()))?;
    let recorded: Vec<StepTrace> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| format!("bad trace line: {e}")))
        .collect::<Result<_, _>>()?;

    let mut config = ExchangeConfig::new(inst.eps);
    config.fnp = a.fnp;
    config.victim_seed = a.seed;
    if let Some(me) = a.max_exponent {
        config.max_exponent = me;
    }
    let mut replayed: Vec<StepTrace> = Vec::new();
    let mut sink = |step: &StepTrace| replayed.push(step.clone());
    run_exchange_auction(&inst, &config, Some(&mut sink)).map_err(|e| e.to_string())?;

    if replayed.len() != recorded.len() {
        println!(
            "replay mismatch: {} recorded steps, {} replayed",
            recorded.len(),
            replayed.len()
        );
        return Ok(EXIT_FAIL);
    }
    for (k, (rec, rep)) in recorded.iter().zip(&replayed).enumerate() {
        if rec != rep {
            println!("replay mismatch at step {k}:\n  recorded {rec:?}\n  replayed {rep:?}");
            return Ok(EXIT_FAIL);
        }
    }
    println!("replay ok: {} steps match", recorded.len());
    Ok(EXIT_OK)
}
