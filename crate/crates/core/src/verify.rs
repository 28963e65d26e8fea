//! Independent certification of solver outputs. Everything here rebuilds its
//! witnesses from the instance and the report alone; nothing is taken from
//! solver-internal state. Also hosts the small brute-force oracle for Fisher
//! equilibria and the randomized property harness for demand systems.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::demand::{
    basplc_kkt_residual, bundle_to_segments, demand, demand_monotone, elasticity_bound,
    gale_demand_basplc, mbb_goods, DemandSpec,
};
use crate::market_model::{
    Bundle, EquilibriumReport, ExchangeInstance, ModelError, SREquilibriumReport, SRInstance,
};

const REL_TOL: f64 = 1e-7;

/// Certification result: the rebuilt demand witnesses plus the residual of
/// each equilibrium condition. `pass` iff no recorded failure.
#[derive(Clone, Debug)]
pub struct Certificate {
    pub witnesses: Vec<Bundle>,
    /// Worst violation of the domination condition (positive = violated).
    pub domination_slack: f64,
    /// Worst clearing violation per good (positive = violated).
    pub clearing_residual: f64,
    /// Value of goods left over / withheld from the witnesses.
    pub leftover_value: f64,
    /// Allowed bound for `leftover_value`.
    pub leftover_bound: f64,
    pub failures: Vec<String>,
}

impl Certificate {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

/// A demand bundle at (p, b) that dominates the holdings c, when one exists.
/// For simple (single-valued) demand systems this is just the demand; for
/// linear and Gale demands the tie-breaking is steered toward c first.
pub fn dominating_demand(spec: &DemandSpec, p: &[f64], b: f64, c: &Bundle) -> Option<Bundle> {
    let tol = |z: f64| REL_TOL * z.abs().max(1.0);
    match spec {
        DemandSpec::Linear { v } => {
            let mbb = mbb_goods(v, p);
            let spend: f64 = (0..p.len()).map(|j| p[j] * c[j]).sum();
            if spend > b + tol(b) {
                return None;
            }
            for j in 0..p.len() {
                if c[j] > tol(c[j]) && !mbb.contains(&j) {
                    return None;
                }
            }
            let mut z = c.clone();
            if let Some(&k) = mbb.first() {
                z[k] += (b - spend).max(0.0) / p[k];
            }
            Some(z)
        }
        DemandSpec::Basplc { segments, cap } => {
            let held = bundle_to_segments(segments, c);
            let ans = gale_demand_basplc(segments, *cap, p, b, Some(&held));
            if ans.bundle.dominates(c, REL_TOL) {
                Some(ans.bundle)
            } else {
                None
            }
        }
        _ => {
            let z = demand(spec, p, b).bundle;
            if z.dominates(c, REL_TOL) {
                Some(z)
            } else {
                None
            }
        }
    }
}

/// Checks an exchange-market report: every agent holds a subset of an
/// optimal bundle at individual prices within (1+eps) of the market prices,
/// no good is oversold, and the leftover value is at most eps of the total.
pub fn check_approx_equilibrium(
    inst: &ExchangeInstance,
    report: &EquilibriumReport,
    eps: f64,
) -> Certificate {
    let n = inst.n();
    let m = inst.m();
    let p: Vec<f64> = report.prices.values();
    let mut failures = Vec::new();
    let mut witnesses = Vec::with_capacity(n);
    let mut domination_slack = f64::NEG_INFINITY;

    for i in 0..n {
        let agent = &inst.agents[i];
        let c = &report.allocations[i];
        let pi = &report.individual_prices[i];
        for j in 0..m {
            let v = pi.value(j);
            if v < p[j] * (1.0 - REL_TOL) || v > (1.0 + eps) * p[j] * (1.0 + REL_TOL) {
                failures.push(format!(
                    "agent {i}: individual price of good {j} outside [p, (1+eps)p]"
                ));
            }
        }
        let budget: f64 = (0..m).map(|j| p[j] * agent.endowment[j]).sum();
        match dominating_demand(&agent.demand, &pi.values().to_vec(), budget, c) {
            Some(z) => {
                for j in 0..m {
                    domination_slack = domination_slack.max(c[j] - z[j]);
                }
                witnesses.push(z);
            }
            None => {
                failures.push(format!("agent {i}: no demand bundle dominates the holdings"));
                witnesses.push(c.clone());
            }
        }
    }

    let supply: Vec<f64> = (0..m)
        .map(|j| inst.agents.iter().map(|a| a.endowment[j]).sum())
        .collect();
    let mut clearing_residual = f64::NEG_INFINITY;
    let mut leftover_value = 0.0;
    let mut total_value = 0.0;
    for j in 0..m {
        let sold: f64 = (0..n).map(|i| report.allocations[i][j]).sum();
        clearing_residual = clearing_residual.max(sold - supply[j]);
        if sold > supply[j] + REL_TOL * supply[j].max(1.0) {
            failures.push(format!("good {j} oversold"));
        }
        leftover_value += p[j] * (supply[j] - sold).max(0.0);
        total_value += p[j] * supply[j];
    }
    let leftover_bound = eps * total_value;
    if leftover_value > leftover_bound + REL_TOL * total_value.max(1.0) {
        failures.push(format!(
            "leftover value {leftover_value} exceeds bound {leftover_bound}"
        ));
    }
    Certificate {
        witnesses,
        domination_slack,
        clearing_residual,
        leftover_value,
        leftover_bound,
        failures,
    }
}

/// Checks a spending-restricted report: domination as above, exact clearing
/// of the available amounts a_j = min{1, t_j/p_j} (or weak clearing with
/// unsold value <= eps * sum b), and total withheld demand value <= eps * sum b.
pub fn check_approx_sr(
    inst: &SRInstance,
    report: &SREquilibriumReport,
    eps: f64,
    weak_clearing: bool,
) -> Certificate {
    let n = inst.n();
    let m = inst.m();
    let p: Vec<f64> = report.prices.values();
    let total_budget = inst.total_budget();
    let mut failures = Vec::new();
    let mut witnesses = Vec::with_capacity(n);
    let mut domination_slack = f64::NEG_INFINITY;

    for i in 0..n {
        let agent = &inst.agents[i];
        let c = &report.allocations[i];
        let pi = &report.individual_prices[i];
        for j in 0..m {
            let v = pi.value(j);
            if v < p[j] * (1.0 - REL_TOL) || v > (1.0 + eps) * p[j] * (1.0 + REL_TOL) {
                failures.push(format!(
                    "agent {i}: individual price of good {j} outside [p, (1+eps)p]"
                ));
            }
        }
        match dominating_demand(&agent.demand, &pi.values().to_vec(), agent.budget, c) {
            Some(z) => {
                for j in 0..m {
                    domination_slack = domination_slack.max(c[j] - z[j]);
                }
                witnesses.push(z);
            }
            None => {
                failures.push(format!("agent {i}: no demand bundle dominates the holdings"));
                witnesses.push(c.clone());
            }
        }
    }

    let available: Vec<f64> = (0..m).map(|j| (inst.caps[j] / p[j]).min(1.0)).collect();
    let mut clearing_residual = f64::NEG_INFINITY;
    let mut unsold_value = 0.0;
    for j in 0..m {
        let sold: f64 = (0..n).map(|i| report.allocations[i][j]).sum();
        let gap = available[j] - sold;
        clearing_residual = clearing_residual.max(gap.abs());
        if weak_clearing {
            if sold > available[j] + REL_TOL * available[j].max(1.0) {
                failures.push(format!("good {j} oversold beyond the available amount"));
            }
            unsold_value += p[j] * gap.max(0.0);
        } else if gap.abs() > REL_TOL * available[j].max(1.0) {
            failures.push(format!("good {j} does not clear exactly: residual {gap}"));
        }
    }
    if weak_clearing && unsold_value > eps * total_budget * (1.0 + REL_TOL) {
        failures.push(format!(
            "unsold value {unsold_value} exceeds eps * total budget"
        ));
    }

    // Withheld demand: sum_j p_j (sum_i z_j - a_j).
    let mut leftover_value = 0.0;
    for j in 0..m {
        let demanded: f64 = (0..n).map(|i| witnesses[i][j]).sum();
        leftover_value += p[j] * (demanded - available[j]);
    }
    let leftover_bound = eps * total_budget;
    if leftover_value > leftover_bound + REL_TOL * total_budget.max(1.0) {
        failures.push(format!(
            "withheld demand value {leftover_value} exceeds bound {leftover_bound}"
        ));
    }
    Certificate {
        witnesses,
        domination_slack,
        clearing_residual,
        leftover_value,
        leftover_bound,
        failures,
    }
}

/// Exhaustive Fisher-market equilibrium for tiny instances (m <= 3, no
/// spending caps): nested grid refinement over the price simplex
/// sum_j p_j = sum_i b_i, minimizing a clearing residual, down to 1e-6.
pub fn brute_force_fisher_eq(inst: &SRInstance) -> Result<(Vec<f64>, Vec<Bundle>), ModelError> {
    let n = inst.n();
    let m = inst.m();
    if m > 3 {
        return Err(ModelError::Other("oracle limited to m <= 3".into()));
    }
    if inst.caps.iter().any(|t| t.is_finite()) {
        return Err(ModelError::Other("oracle requires t = inf".into()));
    }
    let total: f64 = inst.total_budget();
    let budgets: Vec<f64> = inst.agents.iter().map(|a| a.budget).collect();
    let linear = inst
        .agents
        .iter()
        .all(|a| matches!(a.demand, DemandSpec::Linear { .. }));

    let residual = |p: &[f64]| -> f64 {
        if linear {
            let (flow_total, _) = mbb_flow(inst, p);
            total - flow_total
        } else {
            let mut worst = 0.0f64;
            let mut sold = vec![0.0; m];
            for i in 0..n {
                let x = demand(&inst.agents[i].demand, p, budgets[i]).bundle;
                for j in 0..m {
                    sold[j] += x[j];
                }
            }
            for j in 0..m {
                worst = worst.max((sold[j] - 1.0).abs() * p[j]);
            }
            worst
        }
    };

    // Grid refinement over the first m-1 coordinates; the last one closes
    // the simplex.
    let mut center = vec![total / m as f64; m];
    let mut width = total / 2.0;
    let grid = 9usize;
    let mut best_p = center.clone();
    let mut best_r = residual(&best_p);
    for _ in 0..80 {
        let axis_vals = |c: f64| -> Vec<f64> {
            (0..=grid)
                .map(|g| (c - width + 2.0 * width * g as f64 / grid as f64).max(1e-9 * total))
                .collect()
        };
        let mut candidates: Vec<Vec<f64>> = vec![vec![]];
        for d in 0..m - 1 {
            let vals = axis_vals(center[d]);
            candidates = candidates
                .into_iter()
                .flat_map(|prefix| {
                    vals.iter().map(move |&v| {
                        let mut q = prefix.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        for mut cand in candidates {
            let partial: f64 = cand.iter().sum();
            let last = total - partial;
            if last <= 1e-9 * total {
                continue;
            }
            cand.push(last);
            let r = residual(&cand);
            if r < best_r {
                best_r = r;
                best_p = cand;
            }
        }
        center = best_p.clone();
        width *= 0.55;
        if best_r <= 1e-9 * total.max(1.0) {
            break;
        }
    }
    if best_r > 1e-6 * total.max(1.0) {
        return Err(ModelError::Other(format!(
            "oracle did not converge: residual {best_r}"
        )));
    }
    let allocations = if linear {
        let (_, flows) = mbb_flow(inst, &best_p);
        (0..n)
            .map(|i| Bundle((0..m).map(|j| flows[i][j] / best_p[j]).collect()))
            .collect()
    } else {
        (0..n)
            .map(|i| demand(&inst.agents[i].demand, &best_p, budgets[i]).bundle)
            .collect()
    };
    Ok((best_p, allocations))
}

/// Max money flow from agents to goods where agent i may only pay for goods
/// within 1e-6 of their best bang-per-buck. Returns (total flow, per-pair
/// money). At equilibrium prices the total flow equals the total budget.
fn mbb_flow(inst: &SRInstance, p: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let n = inst.n();
    let m = inst.m();
    // Node layout: 0 = source, 1..=n agents, n+1..=n+m goods, n+m+1 sink.
    let nodes = n + m + 2;
    let sink = n + m + 1;
    let mut cap = vec![vec![0.0f64; nodes]; nodes];
    for (i, agent) in inst.agents.iter().enumerate() {
        cap[0][1 + i] = agent.budget;
        let DemandSpec::Linear { v } = &agent.demand else {
            continue;
        };
        let best = (0..m).fold(0.0f64, |acc, j| acc.max(v[j] / p[j]));
        for j in 0..m {
            if v[j] > 0.0 && v[j] / p[j] >= best * (1.0 - 1e-6) {
                cap[1 + i][n + 1 + j] = f64::INFINITY;
            }
        }
    }
    for j in 0..m {
        cap[n + 1 + j][sink] = p[j];
    }
    let mut flow = vec![vec![0.0f64; nodes]; nodes];
    let mut total = 0.0;
    loop {
        // BFS for an augmenting path in the residual graph.
        let mut prev = vec![usize::MAX; nodes];
        prev[0] = 0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for v in 0..nodes {
                if prev[v] == usize::MAX && cap[u][v] - flow[u][v] > 1e-12 {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[sink] == usize::MAX {
            break;
        }
        let mut bottleneck = f64::INFINITY;
        let mut v = sink;
        while v != 0 {
            let u = prev[v];
            bottleneck = bottleneck.min(cap[u][v] - flow[u][v]);
            v = u;
        }
        let mut v = sink;
        while v != 0 {
            let u = prev[v];
            flow[u][v] += bottleneck;
            flow[v][u] -= bottleneck;
            v = u;
        }
        total += bottleneck;
    }
    let pair_flows = (0..n)
        .map(|i| (0..m).map(|j| flow[1 + i][n + 1 + j].max(0.0)).collect())
        .collect();
    (total, pair_flows)
}

/// Demand-system families for the randomized property harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Linear,
    CobbDouglas,
    Ces,
    Conic,
    Basplc,
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(Family::Linear),
            "cobb_douglas" | "cd" => Ok(Family::CobbDouglas),
            "ces" => Ok(Family::Ces),
            "conic" => Ok(Family::Conic),
            "basplc" => Ok(Family::Basplc),
            other => Err(format!("unknown demand family: {other}")),
        }
    }
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Linear,
        Family::CobbDouglas,
        Family::Ces,
        Family::Conic,
        Family::Basplc,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::Linear => "linear",
            Family::CobbDouglas => "cobb_douglas",
            Family::Ces => "ces",
            Family::Conic => "conic",
            Family::Basplc => "basplc",
        }
    }
}

#[derive(Clone, Debug)]
pub struct PropertyReport {
    pub family: String,
    pub trials: u64,
    pub violations: Vec<String>,
}

impl PropertyReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn sample_spec(family: Family, rng: &mut ChaCha8Rng) -> DemandSpec {
    let m = rng.gen_range(2..=4);
    match family {
        Family::Linear => DemandSpec::Linear {
            v: (0..m).map(|_| rng.gen_range(0.1..5.0)).collect(),
        },
        Family::CobbDouglas => {
            let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..2.0)).collect();
            let s: f64 = raw.iter().sum();
            DemandSpec::CobbDouglas {
                alpha: raw.iter().map(|a| a / s).collect(),
            }
        }
        Family::Ces => DemandSpec::Ces {
            beta: (0..m).map(|_| rng.gen_range(0.1..3.0)).collect(),
            sigma: rng.gen_range(1.0..4.0),
        },
        Family::Conic => {
            let parts = (0..rng.gen_range(2..=3))
                .map(|_| crate::demand::ConicPart {
                    lambda: rng.gen_range(0.2..2.0),
                    demand: Box::new(if rng.gen_bool(0.5) {
                        sample_fixed_m(Family::Ces, m, rng)
                    } else {
                        sample_fixed_m(Family::CobbDouglas, m, rng)
                    }),
                })
                .collect();
            DemandSpec::Conic { parts }
        }
        Family::Basplc => {
            let segments = (0..m)
                .map(|_| {
                    let k = rng.gen_range(1..=3);
                    let mut rate = rng.gen_range(2.0..6.0);
                    (0..k)
                        .map(|_| {
                            let s = crate::market_model::Segment {
                                rate,
                                len: rng.gen_range(0.2..2.0),
                            };
                            rate *= rng.gen_range(0.3..0.9);
                            s
                        })
                        .collect()
                })
                .collect();
            let cap = if rng.gen_bool(0.5) {
                rng.gen_range(1.0..8.0)
            } else {
                f64::INFINITY
            };
            DemandSpec::Basplc { segments, cap }
        }
    }
}

fn sample_fixed_m(family: Family, m: usize, rng: &mut ChaCha8Rng) -> DemandSpec {
    match family {
        Family::Ces => DemandSpec::Ces {
            beta: (0..m).map(|_| rng.gen_range(0.1..3.0)).collect(),
            sigma: rng.gen_range(1.0..4.0),
        },
        Family::CobbDouglas => {
            let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..2.0)).collect();
            let s: f64 = raw.iter().sum();
            DemandSpec::CobbDouglas {
                alpha: raw.iter().map(|a| a / s).collect(),
            }
        }
        _ => unreachable!("only CES and Cobb-Douglas appear inside conic mixes"),
    }
}

/// Randomized demand-system checks: weak gross substitutes, scale
/// invariance, budget exhaustion (or the Gale spending bound), the
/// elasticity bound, and the Gale optimality residuals.
pub fn property_suite(family: Family, trials: u64, seed: u64) -> PropertyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_property_trials(family.label(), |rng| sample_spec(family, rng), trials, &mut rng)
}

/// Same checks for an arbitrary generator; used by negative controls.
pub fn run_property_trials(
    label: &str,
    mut gen: impl FnMut(&mut ChaCha8Rng) -> DemandSpec,
    trials: u64,
    rng: &mut ChaCha8Rng,
) -> PropertyReport {
    let mut violations = Vec::new();
    for trial in 0..trials {
        let spec = gen(rng);
        let m = spec.m();
        let p: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..10.0)).collect();
        let b: f64 = rng.gen_range(0.1..10.0);
        let ans = demand(&spec, &p, b);
        let x = &ans.bundle;

        // Budget exhaustion / Gale spending bound. A conic mix spends the
        // budget once per unit of combination weight.
        let spend: f64 = (0..m).map(|j| p[j] * x[j]).sum();
        let expected = match &spec {
            DemandSpec::Conic { parts } => b * parts.iter().map(|q| q.lambda).sum::<f64>(),
            _ => b,
        };
        let gale = matches!(spec, DemandSpec::Basplc { .. });
        let tol = 1e-9 * expected.max(1.0);
        if gale {
            if spend > b + tol {
                violations.push(format!("{label} trial {trial}: spending exceeds budget"));
            }
        } else if (spend - expected).abs() > tol {
            violations.push(format!("{label} trial {trial}: budget not exhausted"));
        }

        // Scale invariance.
        for alpha in [0.5, 2.0, 10.0] {
            let ps: Vec<f64> = p.iter().map(|q| q * alpha).collect();
            let xs = demand(&spec, &ps, b * alpha).bundle;
            for j in 0..m {
                if (xs[j] - x[j]).abs() > 1e-9 * x[j].max(1.0) {
                    violations.push(format!(
                        "{label} trial {trial}: demand not scale invariant (alpha={alpha})"
                    ));
                    break;
                }
            }
        }

        // WGS: raise a random subset of prices (and optionally the budget);
        // demand for untouched goods must not drop.
        let mut p2 = p.clone();
        for q in p2.iter_mut() {
            if rng.gen_bool(0.5) {
                *q *= rng.gen_range(1.0..2.0);
            }
        }
        let b2 = b * rng.gen_range(1.0..1.5);
        let y = demand_monotone(&spec, &p, b, &p2, b2, x);
        for j in 0..m {
            if p2[j] == p[j] && y[j] < x[j] - 1e-9 {
                violations.push(format!(
                    "{label} trial {trial}: WGS violated on good {j} ({} -> {})",
                    x[j], y[j]
                ));
            }
        }

        // Spending monotone in the budget.
        let y_b = demand(&spec, &p, b2).bundle;
        let spend2: f64 = (0..m).map(|j| p[j] * y_b[j]).sum();
        if spend2 < spend - tol {
            violations.push(format!(
                "{label} trial {trial}: spending decreased with a larger budget"
            ));
        }

        // Elasticity bound, where one exists.
        if let Some(f) = elasticity_bound(&spec) {
            let mu = rng.gen_range(0.05..0.8);
            let k = rng.gen_range(0..m);
            let mut p3 = p.clone();
            p3[k] *= 1.0 + mu;
            let x3 = demand(&spec, &p3, b).bundle;
            let floor = x[k] / (1.0 + mu).powf(f);
            if x3[k] < floor - 1e-9 * x[k].max(1.0) {
                violations.push(format!(
                    "{label} trial {trial}: elasticity bound broken on good {k}"
                ));
            }
        }

        // Gale optimality residuals.
        if let DemandSpec::Basplc { segments, cap } = &spec {
            let r = basplc_kkt_residual(segments, *cap, &p, b, &ans);
            if r > 1e-8 {
                violations.push(format!("{label} trial {trial}: Gale residual {r}"));
            }
        }
    }
    PropertyReport {
        family: label.to_string(),
        trials,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction_exchange::{run_exchange_auction, ExchangeConfig};
    use crate::auction_sr::{run_sr_auction, SRConfig, SRInitMode};
    use crate::fnp::FnpChoice;
    use crate::market_model::{ExchangeAgent, SRAgent};

    fn linear_exchange() -> ExchangeInstance {
        ExchangeInstance {
            eps: 0.1,
            agents: vec![
                ExchangeAgent {
                    endowment: vec![1.0, 0.0],
                    demand: DemandSpec::Linear { v: vec![1.0, 2.0] },
                },
                ExchangeAgent {
                    endowment: vec![0.0, 1.0],
                    demand: DemandSpec::Linear { v: vec![2.0, 1.0] },
                },
            ],
        }
    }

    #[test]
    fn exchange_run_certifies_at_4eps() {
        let inst = linear_exchange();
        let out = run_exchange_auction(&inst, &ExchangeConfig::new(inst.eps), None).unwrap();
        let cert = check_approx_equilibrium(&inst, &out.report, 4.0 * inst.eps);
        assert!(cert.pass(), "failures: {:?}", cert.failures);
    }

    #[test]
    fn leftover_over_bound_fails() {
        let inst = linear_exchange();
        let out = run_exchange_auction(&inst, &ExchangeConfig::new(inst.eps), None).unwrap();
        let mut bad = out.report.clone();
        // Withhold most of good 0 from agent 1's holdings.
        bad.allocations[1][0] *= 0.1;
        let cert = check_approx_equilibrium(&inst, &bad, 0.01);
        assert!(!cert.pass());
    }

    #[test]
    fn dominating_demand_linear_tie_keeps_held_good() {
        let spec = DemandSpec::Linear { v: vec![1.0, 1.0] };
        let c = Bundle(vec![0.0, 0.5]);
        let z = dominating_demand(&spec, &[1.0, 1.0], 1.0, &c).unwrap();
        assert!(z[1] >= 0.5);
        assert!((z[0] + z[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dominating_demand_rejects_non_mbb_holdings() {
        let spec = DemandSpec::Linear { v: vec![2.0, 1.0] };
        let c = Bundle(vec![0.0, 0.5]);
        assert!(dominating_demand(&spec, &[1.0, 1.0], 1.0, &c).is_none());
    }

    #[test]
    fn sr_run_certifies_at_4eps() {
        let inst = SRInstance {
            eps: 0.1,
            agents: vec![
                SRAgent {
                    budget: 1.0,
                    demand: DemandSpec::Linear { v: vec![1.0, 2.0] },
                },
                SRAgent {
                    budget: 1.0,
                    demand: DemandSpec::Linear { v: vec![2.0, 1.0] },
                },
            ],
            caps: vec![f64::INFINITY, f64::INFINITY],
            init_prices: Some(vec![0.05, 0.05]),
        };
        let config = SRConfig {
            fnp: FnpChoice::Auto,
            init: SRInitMode::Given,
            price_cap: None,
        };
        let out = run_sr_auction(&inst, &config).unwrap();
        let cert = check_approx_sr(&inst, &out.report, 4.0 * inst.eps, false);
        assert!(cert.pass(), "failures: {:?}", cert.failures);
    }

    #[test]
    fn fisher_oracle_symmetric_linear() {
        let inst = SRInstance {
            eps: 0.1,
            agents: vec![
                SRAgent {
                    budget: 1.0,
                    demand: DemandSpec::Linear { v: vec![1.0, 2.0] },
                },
                SRAgent {
                    budget: 1.0,
                    demand: DemandSpec::Linear { v: vec![2.0, 1.0] },
                },
            ],
            caps: vec![f64::INFINITY, f64::INFINITY],
            init_prices: None,
        };
        let (p, x) = brute_force_fisher_eq(&inst).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-5, "p = {p:?}");
        assert!((p[1] - 1.0).abs() < 1e-5, "p = {p:?}");
        assert!((x[0][1] - 1.0).abs() < 1e-4);
        assert!((x[1][0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn fisher_oracle_single_agent_cd() {
        let inst = SRInstance {
            eps: 0.1,
            agents: vec![SRAgent {
                budget: 3.0,
                demand: DemandSpec::CobbDouglas {
                    alpha: vec![2.0 / 3.0, 1.0 / 3.0],
                },
            }],
            caps: vec![f64::INFINITY, f64::INFINITY],
            init_prices: None,
        };
        let (p, _) = brute_force_fisher_eq(&inst).unwrap();
        assert!((p[0] - 2.0).abs() < 1e-5, "p = {p:?}");
        assert!((p[1] - 1.0).abs() < 1e-5, "p = {p:?}");
    }

    #[test]
    fn properties_hold_for_all_families() {
        for family in Family::ALL {
            let report = property_suite(family, 100, 7);
            assert!(
                report.pass(),
                "{}: {:?}",
                report.family,
                &report.violations[..report.violations.len().min(3)]
            );
        }
    }

    #[test]
    fn negative_control_flags_complement_ces() {
        // sigma < 1 makes goods complements; WGS must break.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let report = run_property_trials(
            "broken-ces",
            |_rng| DemandSpec::Ces {
                beta: vec![1.0, 1.0],
                sigma: 0.5,
            },
            200,
            &mut rng,
        );
        assert!(!report.pass());
    }
}
