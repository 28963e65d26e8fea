//! Ascending-price auction for exchange markets. Terminates with market
//! prices, per-agent prices in [p, (1+eps)p] and bundles forming a
//! 4-eps approximate equilibrium: each agent's bundle is dominated by an
//! optimal bundle at their individual prices and the value of the unsold
//! part is at most 4 eps p.e.

use crate::demand::{demand, demand_monotone, DemandAnswer, DemandSpec};
use crate::fnp::{find_new_prices, FnpChoice};
use crate::market_model::{
    Bundle, EquilibriumReport, ExchangeAgent, ExchangeInstance, IndividualPrices, ModelError,
    PriceVector, RunStats,
};
use serde::{Deserialize, Serialize};
use std::time::Instant;

const AMOUNT_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct ExchangeConfig {
    pub fnp: FnpChoice,
    /// Hard bound on any price exponent; exceeding it aborts the run.
    pub max_exponent: u32,
    /// Outbid victims are taken in agent-index order unless a seed is given,
    /// in which case a seeded shuffled order is used per call.
    pub victim_seed: Option<u64>,
}

impl ExchangeConfig {
    pub fn new(eps: f64) -> Self {
        ExchangeConfig {
            fnp: FnpChoice::Auto,
            max_exponent: ((1e6f64).ln() / (1.0 + eps).ln()).ceil() as u32,
            victim_seed: None,
        }
    }
}

/// One record per step, suitable for JSONL traces and replay.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepTrace {
    pub iteration: u64,
    pub round: u32,
    pub agent: usize,
    /// Number of goods falling in each of the three step cases.
    pub cases: [u32; 3],
    pub phi: f64,
    pub total_surplus: f64,
}

/// Counters for the maintained-invariant checks; all must stay zero and the
/// drift within 1e-9 for a run to be considered clean.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct InvariantLog {
    pub violations: u64,
    pub max_surplus_drift: f64,
    pub max_rounds_in_iteration: u32,
}

struct AgentState {
    spec: DemandSpec,
    endowment: Vec<f64>,
    prices: IndividualPrices,
    holdings: Bundle,
    witness: Bundle,
    budget: f64,
    surplus: f64,
    cert: Option<DemandAnswer>,
}

pub struct ExchangeOutcome {
    pub report: EquilibriumReport,
    pub invariants: InvariantLog,
}

struct Auction<'a> {
    eps: f64,
    p: PriceVector,
    agents: Vec<AgentState>,
    supply: Vec<f64>,
    unsold: Vec<f64>,
    low: Vec<f64>,
    config: &'a ExchangeConfig,
    stats: RunStats,
    log: InvariantLog,
    prev_unsold: Vec<f64>,
    current_round: u32,
}

pub fn run_exchange_auction(
    inst: &ExchangeInstance,
    config: &ExchangeConfig,
    mut trace: Option<&mut dyn FnMut(&StepTrace)>,
) -> Result<ExchangeOutcome, ModelError> {
    let start = Instant::now();
    let n = inst.n();
    let m = inst.m();
    let supply = inst.total_supply();
    let eps = inst.eps;
    let p = PriceVector::ones(m, eps);
    let agents: Vec<AgentState> = inst
        .agents
        .iter()
        .map(|a: &ExchangeAgent| {
            let budget: f64 = a.endowment.iter().sum::<f64>(); // prices are all 1
            let witness = demand(&a.demand, &vec![1.0; m], budget);
            AgentState {
                spec: a.demand.clone(),
                endowment: a.endowment.clone(),
                prices: IndividualPrices::new(vec![1.0; m]),
                holdings: Bundle::zeros(m),
                witness: witness.bundle.clone(),
                budget,
                surplus: budget,
                cert: Some(witness),
            }
        })
        .collect();
    let mut auction = Auction {
        eps,
        p,
        agents,
        unsold: supply.clone(),
        prev_unsold: supply.clone(),
        supply,
        low: vec![0.0; m],
        config,
        stats: RunStats::default(),
        log: InvariantLog::default(),
        current_round: 0,
    };
    debug_assert_eq!(auction.agents.len(), n);
    auction.run(&mut trace)?;

    let report = auction.build_report(start.elapsed().as_secs_f64() * 1e3);
    Ok(ExchangeOutcome {
        report,
        invariants: auction.log,
    })
}

impl Auction<'_> {
    fn m(&self) -> usize {
        self.supply.len()
    }

    fn phi(&self) -> f64 {
        let mut phi = 0.0;
        for a in &self.agents {
            for j in 0..self.m() {
                if a.prices.is_at_cap(j) {
                    phi += (1.0 + self.eps) * a.holdings[j] * self.p.value(j);
                }
            }
        }
        phi
    }

    fn spend(&self, i: usize) -> f64 {
        let a = &self.agents[i];
        (0..self.m())
            .map(|j| {
                let unit = if a.prices.is_at_cap(j) {
                    (1.0 + self.eps) * self.p.value(j)
                } else {
                    self.p.value(j)
                };
                a.holdings[j] * unit
            })
            .sum()
    }

    fn total_endowment_value(&self) -> f64 {
        self.p.dot(&self.supply)
    }

    fn run(&mut self, trace: &mut Option<&mut dyn FnMut(&StepTrace)>) -> Result<(), ModelError> {
        let n = self.agents.len();
        let max_iterations = (self.m() as u64 + 1) * (self.config.max_exponent as u64 + 2);
        loop {
            // Iteration start: budgets and surpluses are recomputed; the
            // incremental surplus bookkeeping must agree up to drift.
            for i in 0..n {
                let b_new = self.p.dot(&self.agents[i].endowment);
                let b_old = self.agents[i].budget;
                let s_expect = self.agents[i].surplus + (b_new - b_old);
                let s_fresh = b_new - self.spend(i);
                let drift = (s_fresh - s_expect).abs();
                self.log.max_surplus_drift = self.log.max_surplus_drift.max(drift);
                if drift > 1e-9 * b_new.max(1.0) {
                    self.log.violations += 1;
                }
                if b_new > b_old + AMOUNT_TOL {
                    // Budget increase: refresh the domination witness.
                    let a = &mut self.agents[i];
                    a.witness = demand_monotone(
                        &a.spec,
                        a.prices.values(),
                        b_old,
                        a.prices.values(),
                        b_new,
                        &a.witness,
                    );
                }
                self.agents[i].budget = b_new;
                self.agents[i].surplus = s_fresh;
            }
            self.stats.iterations += 1;
            if self.stats.iterations > max_iterations {
                return Err(ModelError::Other(
                    "iteration bound exceeded; the run diverged".into(),
                ));
            }

            let mut rounds_here: u32 = 0;
            'iteration: loop {
                let total: f64 = self.agents.iter().map(|a| a.surplus).sum();
                if total <= 3.0 * self.eps * self.total_endowment_value() {
                    self.stats.rounds_per_iteration.push(rounds_here);
                    return Ok(());
                }
                rounds_here += 1;
                self.current_round = rounds_here;
                for i in 0..n {
                    if self.agents[i].surplus <= 0.0 {
                        continue;
                    }
                    self.step(i, trace)?;
                    self.check_invariants();
                    if self.raise_prices()? {
                        break 'iteration;
                    }
                }
            }
            self.stats.rounds_per_iteration.push(rounds_here);
            self.log.max_rounds_in_iteration =
                self.log.max_rounds_in_iteration.max(rounds_here);
        }
    }

    fn step(
        &mut self,
        i: usize,
        trace: &mut Option<&mut dyn FnMut(&StepTrace)>,
    ) -> Result<(), ModelError> {
        self.stats.steps += 1;
        let (spec, b) = (self.agents[i].spec.clone(), self.agents[i].budget);
        let result = find_new_prices(
            &spec,
            self.config.fnp,
            &self.agents[i].prices,
            &self.p,
            &self.agents[i].holdings,
            b,
            self.agents[i].cert.as_ref(),
        )?;
        self.stats.fnp_calls += 1;
        self.stats.fnp_price_bumps += result.price_steps;
        let y = result.bundle;
        let surplus_before = self.agents[i].surplus;
        let phi_before = self.phi();
        let mut cases = [0u32; 3];
        for j in 0..self.m() {
            let was_high = self.agents[i].prices.is_at_cap(j);
            let now_high = result.prices.is_at_cap(j);
            if !now_high {
                cases[2] += 1; // case 3: stays at the low price, no purchase
                continue;
            }
            let own = self.agents[i].holdings[j];
            if !was_high {
                cases[0] += 1;
                // Case 1: self-outbid, the own amount moves to the high price.
                let pj = self.p.value(j);
                self.agents[i].surplus -= own * self.eps * pj;
                self.low[j] -= own;
                self.agents[i].prices.set_at_cap(j, self.p.cap_value(j));
            } else {
                cases[1] += 1;
            }
            let want = y[j] - own;
            if want > AMOUNT_TOL {
                self.outbid(i, j, want);
            }
        }
        let spend_y = result.prices.dot(&y.0);
        self.agents[i].prices = result.prices;
        self.agents[i].witness = y.clone();
        if result.new_cert.is_some() {
            self.agents[i].cert = result.new_cert;
        } else {
            self.agents[i].cert = None;
        }

        // Progress check: when no price rises in this step and the demand
        // exhausts the budget, the high-price spending phi must grow by at
        // least s_i - 2.25 eps b_i.
        let will_increase = (0..self.m()).any(|j| self.unsold[j] + self.low[j] <= AMOUNT_TOL);
        if !will_increase && (spend_y - b).abs() <= 1e-6 * b.max(1.0) {
            let dphi = self.phi() - phi_before;
            if dphi < surplus_before - 2.25 * self.eps * b - 1e-9 * b.max(1.0) {
                self.log.violations += 1;
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t(&StepTrace {
                iteration: self.stats.iterations,
                round: self.current_round,
                agent: i,
                cases,
                phi: self.phi(),
                total_surplus: self.agents.iter().map(|a| a.surplus).sum(),
            });
        }
        Ok(())
    }

    /// Agent `i` takes up to `t` units of good `j`, paying the high price:
    /// first from the unsold pool, then from low-price holders.
    fn outbid(&mut self, i: usize, j: usize, mut t: f64) {
        let pj = self.p.value(j);
        let high = (1.0 + self.eps) * pj;
        if self.unsold[j] > AMOUNT_TOL {
            debug_assert_eq!(self.p.exponent(j), 0, "unsold good must be at price 1");
            let tau = self.unsold[j].min(t);
            self.unsold[j] -= tau;
            self.agents[i].holdings[j] += tau;
            self.agents[i].surplus -= tau * high;
            t -= tau;
            self.stats.outbid_passes += 1;
        }
        let order = self.victim_order(i, j);
        let mut v = 0usize;
        while t > AMOUNT_TOL && self.low[j] > AMOUNT_TOL {
            let Some(&k) = order.get(v) else { break };
            if self.agents[k].holdings[j] <= AMOUNT_TOL || self.agents[k].prices.is_at_cap(j) {
                v += 1;
                continue;
            }
            let tau = self.agents[k].holdings[j].min(t);
            self.agents[k].holdings[j] -= tau;
            self.agents[i].holdings[j] += tau;
            self.agents[k].surplus += tau * pj;
            self.agents[i].surplus -= tau * high;
            self.low[j] -= tau;
            t -= tau;
            self.stats.outbid_passes += 1;
        }
        if self.low[j] < AMOUNT_TOL {
            self.low[j] = self.low[j].max(0.0);
        }
        if self.unsold[j] < AMOUNT_TOL {
            self.unsold[j] = self.unsold[j].max(0.0);
        }
    }

    fn victim_order(&self, i: usize, j: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.agents.len()).filter(|&k| k != i).collect();
        if let Some(seed) = self.config.victim_seed {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                seed ^ (self.stats.steps << 8) ^ j as u64,
            );
            order.shuffle(&mut rng);
        }
        order
    }

    /// Raise the market price of every good whose unsold and low-price pools
    /// are both empty; ends the iteration when any price rises.
    fn raise_prices(&mut self) -> Result<bool, ModelError> {
        let mut increased = false;
        for j in 0..self.m() {
            if self.unsold[j] + self.low[j] > AMOUNT_TOL {
                continue;
            }
            self.unsold[j] = 0.0;
            if self.p.exponent(j) >= self.config.max_exponent {
                return Err(ModelError::ExponentOverflow {
                    good: j,
                    max: self.config.max_exponent,
                });
            }
            self.p.bump(j);
            self.low[j] = self.supply[j];
            let new_pj = self.p.value(j);
            let cap = self.p.cap_value(j);
            for k in 0..self.agents.len() {
                let old = self.agents[k].prices.values().to_vec();
                self.agents[k].prices.set_interior(j, new_pj, cap);
                // Price rise on good j: refresh the domination witness.
                let a = &mut self.agents[k];
                a.witness =
                    demand_monotone(&a.spec, &old, a.budget, a.prices.values(), a.budget, &a.witness);
            }
            increased = true;
        }
        Ok(increased)
    }

    fn check_invariants(&mut self) {
        let m = self.m();
        let scale = self.total_endowment_value().max(1.0);
        for j in 0..m {
            let sold: f64 = self.agents.iter().map(|a| a.holdings[j]).sum();
            // (a) the three pools partition the supply and w + l > 0 between
            // price increases is restored by raise_prices.
            if (sold + self.unsold[j] - self.supply[j]).abs() > 1e-9 * scale {
                self.log.violations += 1;
            }
            let low_sum: f64 = self
                .agents
                .iter()
                .filter(|a| !a.prices.is_at_cap(j))
                .map(|a| a.holdings[j])
                .sum();
            if (low_sum - self.low[j]).abs() > 1e-9 * scale {
                self.log.violations += 1;
            }
            // (b) unsold amounts never grow; unsold goods stay at price 1.
            if self.unsold[j] > self.prev_unsold[j] + 1e-9 * scale {
                self.log.violations += 1;
            }
            if self.unsold[j] > AMOUNT_TOL && self.p.exponent(j) != 0 {
                self.log.violations += 1;
            }
        }
        self.prev_unsold.clone_from(&self.unsold);
        // (c) p <= p^(i) <= (1+eps)p and holdings dominated by the witness.
        for a in &self.agents {
            for j in 0..m {
                let v = a.prices.value(j);
                if v < self.p.value(j) - 1e-9 || v > self.p.cap_value(j) + 1e-9 {
                    self.log.violations += 1;
                }
                if a.holdings[j] > a.witness[j] + 1e-9 * scale {
                    self.log.violations += 1;
                }
            }
        }
    }

    fn build_report(&self, wall_time_ms: f64) -> EquilibriumReport {
        let mut stats = self.stats.clone();
        stats.wall_time_ms = wall_time_ms;
        let leftover: f64 = (0..self.m())
            .map(|j| {
                let sold: f64 = self.agents.iter().map(|a| a.holdings[j]).sum();
                self.p.value(j) * (self.supply[j] - sold).max(0.0)
            })
            .sum();
        EquilibriumReport {
            prices: self.p.clone(),
            individual_prices: self.agents.iter().map(|a| a.prices.clone()).collect(),
            allocations: self.agents.iter().map(|a| a.holdings.clone()).collect(),
            witnesses: self.agents.iter().map(|a| a.witness.clone()).collect(),
            budgets: self.agents.iter().map(|a| a.budget).collect(),
            total_surplus: self.agents.iter().map(|a| a.surplus).sum(),
            leftover_value: leftover,
            stats,
        }
    }
}

/// Append a price-bounding agent holding an `eta` fraction of every good with
/// a uniform Cobb-Douglas demand. Requires eta/(1+eta) > eps(1+eps)m and
/// eps(1+eps)m <= 1/2; an equilibrium of the extended market certifies at
/// eps(1+eta) for the original one after stripping the extra agent.
pub fn add_dummy_agent(inst: &ExchangeInstance, eta: f64) -> Result<ExchangeInstance, ModelError> {
    let m = inst.m();
    let eps = inst.eps;
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(ModelError::InvalidInstance("eta must be in (0, 1]".into()));
    }
    if eta / (1.0 + eta) <= eps * (1.0 + eps) * m as f64
        || eps * (1.0 + eps) * m as f64 > 0.5
    {
        return Err(ModelError::InvalidInstance(
            "eta/eps/m do not satisfy the price-bounding precondition".into(),
        ));
    }
    let mut out = inst.clone();
    out.agents.push(ExchangeAgent {
        endowment: inst.total_supply().iter().map(|e| eta * e).collect(),
        demand: DemandSpec::CobbDouglas {
            alpha: vec![1.0 / m as f64; m],
        },
    });
    Ok(out)
}

/// Drop the price-bounding agent from a report on the extended market. The
/// remaining prices and bundles certify on the original market `inst` at the
/// looser tolerance eps(1+eta). The extended supply is (1+eta) times the
/// original, so holdings of a good can exceed its original supply after the
/// extra agent is removed; such goods are scaled back proportionally, which
/// keeps every bundle dominated by its demand witness.
pub fn strip_dummy(report: &EquilibriumReport, inst: &ExchangeInstance) -> EquilibriumReport {
    let mut out = report.clone();
    let dummy = out.allocations.len() - 1;
    let spent: f64 = (0..out.prices.len())
        .map(|j| {
            let unit = if out.individual_prices[dummy].is_at_cap(j) {
                out.individual_prices[dummy].value(j)
            } else {
                out.prices.value(j)
            };
            out.allocations[dummy][j] * unit
        })
        .sum();
    out.individual_prices.pop();
    out.allocations.pop();
    out.witnesses.pop();
    let b_dummy = out.budgets.pop().unwrap_or(0.0);
    out.total_surplus -= (b_dummy - spent).max(0.0);
    let supply = inst.total_supply();
    for j in 0..inst.m() {
        let held: f64 = out.allocations.iter().map(|a| a[j]).sum();
        if held > supply[j] && held > 0.0 {
            let scale = supply[j] / held;
            for a in &mut out.allocations {
                a[j] *= scale;
            }
        }
    }
    out.leftover_value = (0..inst.m())
        .map(|j| {
            let held: f64 = out.allocations.iter().map(|a| a[j]).sum();
            out.prices.value(j) * (supply[j] - held).max(0.0)
        })
        .sum();
    out
}
