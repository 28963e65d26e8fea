//! Nash social welfare (NSW) for budget-additive separable piecewise-linear
//! concave utilities over goods with multiple copies. Pipeline: relax to a
//! Fisher market with spending caps t_j = D_j and Gale demands, solve the
//! spending-restricted market with an extra price-stabilizing agent, rescale
//! utilities so every agent's bang-per-buck is 1, compute a price-based
//! upper bound on the optimum, and round the fractional allocation to whole
//! copies with a certified approximation factor.

use crate::auction_sr::{run_sr_auction, SRConfig, SRInitMode};
use crate::demand::{basplc_utility, bundle_to_segments};
use crate::fnp::FnpChoice;
use crate::market_model::{
    ModelError, NSWInstance, SRAgent, SRInstance, SRStatus, Segment,
};

const TOL: f64 = 1e-9;

/// Fisher-market relaxation: unit budgets, spending cap D_j per good, and
/// the agent utilities expressed per whole good (1 unit = D_j copies) with
/// rates clamped at the agent's utility cap.
pub fn relax_to_fisher(nsw: &NSWInstance) -> SRInstance {
    let m = nsw.copies.len();
    let agents = nsw
        .agents
        .iter()
        .map(|a| {
            let segments: Vec<Vec<Segment>> = (0..m)
                .map(|j| clamp_and_rescale(&a.segments[j], a.cap, nsw.copies[j] as f64))
                .collect();
            SRAgent {
                budget: 1.0,
                demand: crate::demand::DemandSpec::Basplc {
                    segments,
                    cap: a.cap,
                },
            }
        })
        .collect();
    SRInstance {
        eps: nsw.effective_eps(),
        agents,
        caps: nsw.copies.iter().map(|&d| d as f64).collect(),
        init_prices: None,
    }
}

/// Clamp rates at the cap, convert copy-space segments to unit space
/// (rate *= D, len /= D) and merge adjacent segments that the clamping made
/// equal-rate; zero-rate segments are dropped.
fn clamp_and_rescale(segs: &[Segment], cap: f64, d_j: f64) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for s in segs {
        let rate = s.rate.min(cap) * d_j;
        let len = s.len / d_j;
        if rate <= 0.0 || len <= 0.0 {
            continue;
        }
        match out.last_mut() {
            Some(prev) if (prev.rate - rate).abs() <= 1e-12 * rate => prev.len += len,
            _ => out.push(Segment { rate, len }),
        }
    }
    out
}

/// SR-equilibrium of the relaxation, rescaled so each agent's bang-per-buck
/// equals 1. Quantities are in copy space.
#[derive(Clone, Debug)]
pub struct NormalizedEquilibrium {
    /// Per-copy prices.
    pub prices: Vec<f64>,
    /// Copy-space segment allocation x_ijt per real agent.
    pub x: Vec<Vec<Vec<f64>>>,
    /// Rescaled copy-space rates u_ijt (clamped at the original cap first).
    pub rates: Vec<Vec<Vec<Segment>>>,
    /// Rescaled utility caps.
    pub caps: Vec<f64>,
    pub gammas: Vec<f64>,
    /// Rescaled demand-witness utilities; non-capped agents sit at 1.
    pub utilities: Vec<f64>,
    pub capped: Vec<bool>,
    /// Expensive goods H(p) = {j : p_j > 1} (per-copy prices).
    pub expensive: Vec<usize>,
    pub copies: Vec<u64>,
    /// Per-agent scale factors (the bang-per-buck values before rescaling).
    pub scale: Vec<f64>,
    /// Max |mbb_i - 1| after rescaling.
    pub mbb_residual: f64,
    /// Value of the stabilizing agent's holdings at strip time.
    pub dummy_value: f64,
}

pub fn solve_sr_with_dummy(
    nsw: &NSWInstance,
    eps: f64,
) -> Result<NormalizedEquilibrium, ModelError> {
    let m = nsw.copies.len();
    let n = nsw.agents.len();
    let total_copies: f64 = nsw.copies.iter().map(|&d| d as f64).sum();
    let mut sr = relax_to_fisher(nsw);
    // Auction precision eps/5: the auction certifies a 4x-approximate
    // equilibrium at precision x, so the result is (4/5)eps-approximate,
    // leaving eps/5 of slack for removing the stabilizing agent. Running
    // at a coarser precision would let the start state pass the
    // termination test before any price moves.
    sr.eps = eps / 5.0;
    // Price-stabilizing extra agent: budget eps, additive with rate 1 per
    // copy on every good; it initially demands and holds the whole supply.
    let dummy = SRAgent {
        budget: eps,
        demand: crate::demand::DemandSpec::Basplc {
            segments: nsw
                .copies
                .iter()
                .map(|&d| {
                    vec![Segment {
                        rate: d as f64,
                        len: 1.0,
                    }]
                })
                .collect(),
            cap: f64::INFINITY,
        },
    };
    sr.agents.insert(0, dummy);
    sr.init_prices = Some(
        nsw.copies
            .iter()
            .map(|&d| d as f64 * eps / total_copies)
            .collect(),
    );
    let config = SRConfig {
        fnp: FnpChoice::Auto,
        init: SRInitMode::Given,
        price_cap: None,
    };
    let out = run_sr_auction(&sr, &config)?;
    if out.report.status != SRStatus::Equilibrium {
        return Err(ModelError::PriceCapBreach {
            good: 0,
            price: f64::NAN,
            cap: f64::NAN,
        });
    }
    let report = out.report;

    // Strip the extra agent (index 0) and move to copy space.
    let dummy_value: f64 = (0..m)
        .map(|j| report.prices.value(j) * report.allocations[0][j])
        .sum();
    let prices: Vec<f64> = (0..m)
        .map(|j| report.prices.value(j) / nsw.copies[j] as f64)
        .collect();

    let mut x = Vec::with_capacity(n);
    let mut gammas = Vec::with_capacity(n);
    let mut utilities = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    let mut rates: Vec<Vec<Vec<Segment>>> = Vec::with_capacity(n);
    let mut caps = Vec::with_capacity(n);
    let mut mbb_residual = 0.0f64;
    for (i, agent) in nsw.agents.iter().enumerate() {
        let alloc = &report.allocations[i + 1];
        let unit_segments: Vec<Vec<Segment>> = (0..m)
            .map(|j| clamp_and_rescale(&agent.segments[j], agent.cap, nsw.copies[j] as f64))
            .collect();

        // Copy-space allocation against the agent's own (clamped) segments.
        let copy_bundle = crate::market_model::Bundle(
            (0..m)
                .map(|j| alloc[j] * nsw.copies[j] as f64)
                .collect(),
        );
        let clamped: Vec<Vec<Segment>> = (0..m)
            .map(|j| {
                agent.segments[j]
                    .iter()
                    .map(|s| Segment {
                        rate: s.rate.min(agent.cap),
                        len: s.len,
                    })
                    .collect()
            })
            .collect();
        let copy_alloc = bundle_to_segments(&clamped, &copy_bundle);

        // Gale certificate at the final individual prices: its utility and
        // cap multiplier give the bang-per-buck exactly, unlike the holdings
        // which only approximate the demand.
        let (gamma, u) = witness_cert(&unit_segments, agent.cap, &report, i + 1);
        let mbb = if u > TOL { u / (1.0 - gamma * u) } else { 1.0 };
        let mbb = if mbb.is_finite() && mbb > TOL { mbb } else { 1.0 };
        let u_scaled = u / mbb;
        let gamma_scaled = gamma * mbb;
        let resid = if u > TOL {
            (u_scaled / (1.0 - gamma_scaled * u_scaled) - 1.0).abs()
        } else {
            0.0
        };
        mbb_residual = mbb_residual.max(resid);

        x.push(copy_alloc);
        gammas.push(gamma_scaled);
        utilities.push(u_scaled);
        scale.push(mbb);
        caps.push(agent.cap / mbb);
        rates.push(
            clamped
                .iter()
                .map(|segs| {
                    segs.iter()
                        .map(|s| Segment {
                            rate: s.rate / mbb,
                            len: s.len,
                        })
                        .collect()
                })
                .collect(),
        );
    }
    let capped: Vec<bool> = (0..n)
        .map(|i| gammas[i] > TOL || utilities[i] >= caps[i] * (1.0 - 1e-6))
        .collect();
    let expensive: Vec<usize> = (0..m).filter(|&j| prices[j] > 1.0 + TOL).collect();
    Ok(NormalizedEquilibrium {
        prices,
        x,
        rates,
        caps,
        gammas,
        utilities,
        capped,
        expensive,
        copies: nsw.copies.clone(),
        scale,
        mbb_residual,
        dummy_value,
    })
}

/// Cap multiplier gamma and utility of the agent's Gale demand at the final
/// individual prices.
fn witness_cert(
    unit_segments: &[Vec<Segment>],
    cap: f64,
    report: &crate::market_model::SREquilibriumReport,
    idx: usize,
) -> (f64, f64) {
    let p: Vec<f64> = (0..report.prices.len())
        .map(|j| report.individual_prices[idx].value(j))
        .collect();
    let ans = crate::demand::gale_demand_basplc(unit_segments, cap, &p, 1.0, None);
    let u = basplc_utility(unit_segments, cap, &ans.bundle);
    (ans.gamma.unwrap_or(0.0), u)
}

/// Price-based bound on the optimal NSW in rescaled units (bang-per-buck 1):
/// ((prod over capped agents of U_i)(prod over expensive goods of
/// p_j^{D_j}))^{1/n}, computed in log space.
pub fn nsw_upper_bound(neq: &NormalizedEquilibrium) -> f64 {
    let n = neq.utilities.len() as f64;
    let mut log_bound = 0.0;
    for i in 0..neq.utilities.len() {
        if neq.capped[i] {
            log_bound += neq.caps[i].ln();
        }
    }
    for &j in &neq.expensive {
        log_bound += neq.copies[j] as f64 * neq.prices[j].ln();
    }
    (log_bound / n).exp()
}

/// The same bound converted to the instance's original utility units, for
/// comparison against the exhaustive optimum.
pub fn nsw_upper_bound_original(neq: &NormalizedEquilibrium) -> f64 {
    let n = neq.utilities.len() as f64;
    let log_scale: f64 = neq.scale.iter().map(|s| s.ln()).sum();
    nsw_upper_bound(neq) * (log_scale / n).exp()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntegralAllocation {
    /// copies[i][j]: whole copies of good j given to agent i.
    pub copies: Vec<Vec<u64>>,
}

/// Geometric mean of capped utilities of an integral allocation, in the
/// instance's original units.
pub fn nsw_value(alloc: &IntegralAllocation, nsw: &NSWInstance) -> f64 {
    let n = nsw.agents.len();
    let mut log_sum = 0.0;
    for i in 0..n {
        let u = integral_utility(nsw, i, &alloc.copies[i]);
        if u <= 0.0 {
            return 0.0;
        }
        log_sum += u.ln();
    }
    (log_sum / n as f64).exp()
}

/// Utility of whole copies, filling segments in rate order, capped at U_i.
fn integral_utility(nsw: &NSWInstance, i: usize, copies: &[u64]) -> f64 {
    let mut u = 0.0;
    for (j, &c) in copies.iter().enumerate() {
        let mut left = c as f64;
        for seg in &nsw.agents[i].segments[j] {
            let take = seg.len.min(left);
            u += seg.rate * take;
            left -= take;
            if left <= 0.0 {
                break;
            }
        }
    }
    u.min(nsw.agents[i].cap)
}

/// Round the fractional equilibrium to whole copies. Saturated segments stay
/// whole (their allocation already sits at the segment length), fractional
/// holdings are floored, and the leftover copies (at most one per agent per
/// good) are placed along the cycle-free spending graph maximizing the
/// utility product step by step.
pub fn round_allocation(neq: &NormalizedEquilibrium, _nsw: &NSWInstance) -> IntegralAllocation {
    let n = neq.utilities.len();
    let m = neq.copies.len();
    let mut copies = vec![vec![0u64; m]; n];
    let mut assigned = vec![0u64; m];

    // Phase 1 and 2 per (agent, good): forced segments, then floors.
    let mut frac = vec![vec![0.0f64; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut whole = 0.0f64;
            let mut fractional = 0.0f64;
            for t in 0..neq.rates[i][j].len() {
                let x_ijt = neq.x[i][j].get(t).copied().unwrap_or(0.0);
                if x_ijt <= 1e-12 {
                    continue;
                }
                // Snap near-integral holdings up; saturated segments land on
                // their full length this way.
                let snapped = (x_ijt + 1e-7).floor();
                whole += snapped;
                fractional += (x_ijt - snapped).max(0.0);
            }
            let granted = (whole.round() as u64).min(neq.copies[j] - assigned[j]);
            copies[i][j] = granted;
            assigned[j] += granted;
            frac[i][j] = fractional;
        }
    }

    // Phase 3: cancel cycles in the residual spending graph (money space),
    // leaving a forest, then hand out the remaining whole copies.
    cancel_cycles(&mut frac, &neq.prices);
    let mut utils: Vec<f64> = (0..n)
        .map(|i| clamped_utility(&neq.rates[i], neq.caps[i], &copies[i]))
        .collect();
    for j in 0..m {
        let mut left = neq.copies[j] - assigned[j];
        while left > 0 {
            // Prefer agents adjacent in the residual forest; fall back to
            // anyone. Pick the recipient with the largest utility gain,
            // zero-utility agents first (the product is at stake).
            let candidates: Vec<usize> = {
                let adj: Vec<usize> =
                    (0..n).filter(|&i| frac[i][j] > 1e-9).collect();
                if adj.is_empty() {
                    (0..n).collect()
                } else {
                    adj
                }
            };
            let mut best: Option<(usize, f64, f64)> = None;
            for &i in &candidates {
                copies[i][j] += 1;
                let u_new = clamped_utility(&neq.rates[i], neq.caps[i], &copies[i]);
                copies[i][j] -= 1;
                let gain = u_new - utils[i];
                let key = if utils[i] <= 0.0 && u_new > 0.0 {
                    f64::INFINITY
                } else if utils[i] > 0.0 {
                    u_new / utils[i]
                } else {
                    1.0
                };
                match best {
                    Some((_, bk, _)) if key <= bk => {}
                    _ => best = Some((i, key, gain)),
                }
            }
            let (winner, _, _) = best.expect("at least one candidate");
            copies[winner][j] += 1;
            utils[winner] = clamped_utility(&neq.rates[winner], neq.caps[winner], &copies[winner]);
            frac[winner][j] = (frac[winner][j] - 1.0).max(0.0);
            left -= 1;
        }
        assigned[j] = neq.copies[j];
    }
    IntegralAllocation { copies }
}

fn clamped_utility(rates: &[Vec<Segment>], cap: f64, copies: &[u64]) -> f64 {
    let mut u = 0.0;
    for (j, &c) in copies.iter().enumerate() {
        let mut left = c as f64;
        for seg in &rates[j] {
            let take = seg.len.min(left);
            u += seg.rate * take;
            left -= take;
            if left <= 0.0 {
                break;
            }
        }
    }
    u.min(cap)
}

/// Cancel cycles in the bipartite residual spending graph. Money moves
/// around a cycle in alternating directions until some edge empties; agent
/// budgets and per-good totals are preserved.
fn cancel_cycles(frac: &mut [Vec<f64>], prices: &[f64]) {
    let n = frac.len();
    let m = prices.len();
    loop {
        // Find a cycle by DFS over edges with positive residual money.
        let edge = |i: usize, j: usize| frac[i][j] * prices[j];
        let mut found: Option<Vec<(usize, usize)>> = None;
        // Nodes: agents 0..n, goods n..n+m.
        let mut visited = vec![false; n + m];
        let mut parent_edge: Vec<Option<(usize, usize)>> = vec![None; n + m];
        for start in 0..n {
            if visited[start] || found.is_some() {
                continue;
            }
            // Iterative DFS from each unvisited agent.
            let mut stack = vec![(start, usize::MAX)];
            while let Some((node, from)) = stack.pop() {
                if visited[node] {
                    continue;
                }
                visited[node] = true;
                parent_edge[node] = if from == usize::MAX {
                    None
                } else if node < n {
                    Some((node, from - n))
                } else {
                    Some((from, node - n))
                };
                let neighbors: Vec<usize> = if node < n {
                    (0..m).filter(|&j| edge(node, j) > 1e-12).map(|j| n + j).collect()
                } else {
                    (0..n).filter(|&i| edge(i, node - n) > 1e-12).collect()
                };
                for nb in neighbors {
                    if nb == from {
                        continue;
                    }
                    if visited[nb] {
                        // Cycle: walk both endpoints up to the root and
                        // splice the paths.
                        let path_to_root = |mut v: usize| -> Vec<(usize, usize)> {
                            let mut edges = Vec::new();
                            while let Some(e) = parent_edge[v] {
                                edges.push(e);
                                v = if v < n { n + e.1 } else { e.0 };
                            }
                            edges
                        };
                        let mut a = path_to_root(node);
                        let b = path_to_root(nb);
                        let closing = if node < n {
                            (node, nb - n)
                        } else {
                            (nb, node - n)
                        };
                        // Drop the common tail.
                        while let (Some(x), Some(y)) = (a.last(), b.last()) {
                            if x == y {
                                a.pop();
                            } else {
                                break;
                            }
                        }
                        let b_trim: Vec<(usize, usize)> = b
                            .iter()
                            .copied()
                            .filter(|e| !a.contains(e))
                            .collect();
                        let mut cycle = vec![closing];
                        cycle.extend(a);
                        cycle.extend(b_trim);
                        if cycle.len() >= 4 {
                            found = Some(cycle);
                            break;
                        }
                    } else {
                        stack.push((nb, node));
                    }
                }
                if found.is_some() {
                    break;
                }
            }
        }
        let Some(cycle) = found else { return };
        // Alternate +delta / -delta in money around the cycle; order edges
        // by walking the cycle so that consecutive edges share a node.
        let ordered = order_cycle(&cycle);
        let Some(ordered) = ordered else { return };
        let delta = ordered
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&(i, j)| edge_money(frac, prices, i, j))
            .fold(f64::INFINITY, f64::min);
        if !(delta > 1e-12) {
            return;
        }
        for (k, &(i, j)) in ordered.iter().enumerate() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            frac[i][j] = ((frac[i][j] * prices[j] + sign * delta) / prices[j]).max(0.0);
        }
    }
}

fn edge_money(frac: &[Vec<f64>], prices: &[f64], i: usize, j: usize) -> f64 {
    frac[i][j] * prices[j]
}

/// Arrange cycle edges so consecutive edges share alternating endpoints.
fn order_cycle(edges: &[(usize, usize)]) -> Option<Vec<(usize, usize)>> {
    if edges.len() < 4 || edges.len() % 2 != 0 {
        return None;
    }
    let mut rest: Vec<(usize, usize)> = edges[1..].to_vec();
    let mut out = vec![edges[0]];
    // Walk: after an edge (i, j), the next edge shares j (good) when the
    // position is even, else shares i (agent).
    loop {
        let last = *out.last().unwrap();
        let want_good = out.len() % 2 == 1;
        let pos = rest.iter().position(|&(i, j)| {
            if want_good {
                j == last.1 && i != last.0
            } else {
                i == last.0 && j != last.1
            }
        });
        match pos {
            Some(p) => out.push(rest.remove(p)),
            None => break,
        }
        if rest.is_empty() {
            break;
        }
    }
    if out.len() == edges.len() {
        Some(out)
    } else {
        None
    }
}

/// Exhaustive optimum for small instances.
pub fn brute_force_nsw(nsw: &NSWInstance) -> Result<(f64, IntegralAllocation), ModelError> {
    let n = nsw.agents.len();
    let m = nsw.copies.len();
    let total: u64 = nsw.copies.iter().sum();
    if total > 12 || n > 4 {
        return Err(ModelError::Other(
            "instance too large for exhaustive search".into(),
        ));
    }
    let mut best = (f64::NEG_INFINITY, vec![vec![0u64; m]; n]);
    let mut current = vec![vec![0u64; m]; n];
    fn distribute(
        nsw: &NSWInstance,
        j: usize,
        left: u64,
        agent: usize,
        current: &mut Vec<Vec<u64>>,
        best: &mut (f64, Vec<Vec<u64>>),
    ) {
        let n = nsw.agents.len();
        let m = nsw.copies.len();
        if j == m {
            let alloc = IntegralAllocation {
                copies: current.clone(),
            };
            let v = nsw_value(&alloc, nsw);
            if v > best.0 {
                *best = (v, current.clone());
            }
            return;
        }
        if agent == n - 1 {
            current[agent][j] = left;
            distribute(nsw, j + 1, nsw.copies.get(j + 1).copied().unwrap_or(0), 0, current, best);
            current[agent][j] = 0;
            return;
        }
        for take in 0..=left {
            current[agent][j] = take;
            distribute(nsw, j, left - take, agent + 1, current, best);
        }
        current[agent][j] = 0;
    }
    distribute(nsw, 0, nsw.copies[0], 0, &mut current, &mut best);
    Ok((
        best.0.max(0.0),
        IntegralAllocation { copies: best.1 },
    ))
}

/// End-to-end pipeline: solve, bound, round.
pub struct NSWOutcome {
    pub equilibrium: NormalizedEquilibrium,
    pub upper_bound: f64,
    pub allocation: IntegralAllocation,
    pub value: f64,
}

pub fn solve_nsw(nsw: &NSWInstance) -> Result<NSWOutcome, ModelError> {
    let eps = nsw.effective_eps();
    let neq = solve_sr_with_dummy(nsw, eps)?;
    let upper_bound = nsw_upper_bound_original(&neq);
    let allocation = round_allocation(&neq, nsw);
    let value = nsw_value(&allocation, nsw);
    Ok(NSWOutcome {
        equilibrium: neq,
        upper_bound,
        allocation,
        value,
    })
}

// Re-exported for tests: clamped utility of a fractional bundle.
pub fn fractional_utility(nsw: &NSWInstance, i: usize, bundle_copies: &[f64]) -> f64 {
    let clamped: Vec<Vec<Segment>> = (0..nsw.copies.len())
        .map(|j| {
            nsw.agents[i].segments[j]
                .iter()
                .map(|s| Segment {
                    rate: s.rate.min(nsw.agents[i].cap),
                    len: s.len,
                })
                .collect()
        })
        .collect();
    let b = crate::market_model::Bundle(bundle_copies.to_vec());
    basplc_utility(&clamped, nsw.agents[i].cap, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::NSWAgent;

    fn additive_2x2() -> NSWInstance {
        // u1 = (2, 1), u2 = (1, 2), one copy each, no caps.
        NSWInstance {
            eps: 0.0,
            copies: vec![1, 1],
            agents: vec![
                NSWAgent {
                    segments: vec![
                        vec![Segment { rate: 2.0, len: 1.0 }],
                        vec![Segment { rate: 1.0, len: 1.0 }],
                    ],
                    cap: f64::INFINITY,
                },
                NSWAgent {
                    segments: vec![
                        vec![Segment { rate: 1.0, len: 1.0 }],
                        vec![Segment { rate: 2.0, len: 1.0 }],
                    ],
                    cap: f64::INFINITY,
                },
            ],
        }
    }

    #[test]
    fn brute_force_2x2() {
        let inst = additive_2x2();
        let (opt, alloc) = brute_force_nsw(&inst).unwrap();
        assert!((opt - 2.0).abs() < 1e-12);
        assert_eq!(alloc.copies[0][0], 1);
        assert_eq!(alloc.copies[1][1], 1);
    }

    #[test]
    fn brute_force_forced_zero() {
        // One copy, two identical agents: someone ends with zero utility.
        let inst = NSWInstance {
            eps: 0.0,
            copies: vec![1],
            agents: vec![
                NSWAgent {
                    segments: vec![vec![Segment { rate: 1.0, len: 1.0 }]],
                    cap: f64::INFINITY,
                },
                NSWAgent {
                    segments: vec![vec![Segment { rate: 1.0, len: 1.0 }]],
                    cap: f64::INFINITY,
                },
            ],
        };
        let (opt, _) = brute_force_nsw(&inst).unwrap();
        assert_eq!(opt, 0.0);
    }

    #[test]
    fn relaxation_shapes() {
        let inst = additive_2x2();
        let sr = relax_to_fisher(&inst);
        assert_eq!(sr.caps, vec![1.0, 1.0]);
        assert!(sr.agents.iter().all(|a| a.budget == 1.0));
        let three = NSWInstance {
            copies: vec![3, 1],
            ..additive_2x2()
        };
        // copies are repartitioned but caps follow D.
        let sr3 = relax_to_fisher(&NSWInstance {
            agents: vec![
                NSWAgent {
                    segments: vec![
                        vec![Segment { rate: 2.0, len: 3.0 }],
                        vec![Segment { rate: 1.0, len: 1.0 }],
                    ],
                    cap: f64::INFINITY,
                },
                NSWAgent {
                    segments: vec![
                        vec![Segment { rate: 1.0, len: 3.0 }],
                        vec![Segment { rate: 2.0, len: 1.0 }],
                    ],
                    cap: f64::INFINITY,
                },
            ],
            ..three
        });
        assert_eq!(sr3.caps, vec![3.0, 1.0]);
    }

    #[test]
    fn pipeline_2x2_matches_optimum() {
        let inst = additive_2x2();
        let out = solve_nsw(&inst).unwrap();
        let (opt, _) = brute_force_nsw(&inst).unwrap();
        assert!(
            out.value >= opt / 2.404 - 1e-9,
            "rounded {} vs opt {}",
            out.value,
            opt
        );
        assert!(
            opt <= out.upper_bound + 1e-6,
            "opt {} exceeds bound {}",
            opt,
            out.upper_bound
        );
    }

    #[test]
    fn upper_bound_empty_products() {
        let neq = NormalizedEquilibrium {
            prices: vec![0.5, 0.9],
            x: vec![],
            rates: vec![],
            caps: vec![],
            gammas: vec![],
            utilities: vec![1.0, 1.0],
            capped: vec![false, false],
            expensive: vec![],
            copies: vec![1, 1],
            scale: vec![1.0, 1.0],
            mbb_residual: 0.0,
            dummy_value: 0.0,
        };
        assert!((nsw_upper_bound(&neq) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn upper_bound_single_expensive_good() {
        let neq = NormalizedEquilibrium {
            prices: vec![4.0],
            x: vec![],
            rates: vec![],
            caps: vec![],
            gammas: vec![],
            utilities: vec![1.0, 1.0],
            capped: vec![false, false],
            expensive: vec![0],
            copies: vec![1],
            scale: vec![1.0, 1.0],
            mbb_residual: 0.0,
            dummy_value: 0.0,
        };
        assert!((nsw_upper_bound(&neq) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn capped_instance_pipeline() {
        // Caps below the single-copy rates: OPT = geometric mean of caps.
        let inst = NSWInstance {
            eps: 0.0,
            copies: vec![1, 1],
            agents: vec![
                NSWAgent {
                    segments: vec![
                        vec![Segment { rate: 3.0, len: 1.0 }],
                        vec![Segment { rate: 2.0, len: 1.0 }],
                    ],
                    cap: 1.0,
                },
                NSWAgent {
                    segments: vec![
                        vec![Segment { rate: 2.0, len: 1.0 }],
                        vec![Segment { rate: 3.0, len: 1.0 }],
                    ],
                    cap: 1.0,
                },
            ],
        };
        let (opt, _) = brute_force_nsw(&inst).unwrap();
        assert!((opt - 1.0).abs() < 1e-12);
        let out = solve_nsw(&inst).unwrap();
        assert!(out.value >= opt / 2.404 - 1e-9);
        assert!(opt <= out.upper_bound + 1e-6);
    }
}
