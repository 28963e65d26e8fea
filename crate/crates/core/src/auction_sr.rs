//! Spending-restricted (SR) auction for Fisher markets. Budgets are fixed,
//! the amount of good j on sale is a_j = min{1, t_j/p_j} for a spending cap
//! t_j, and the surplus notion is relative: what the agent would like to
//! spend at their individual prices minus what they actually spend. The
//! algorithm terminates with a 4-eps approximate SR-equilibrium, or reports
//! that prices crossed the cap bound (SR-equilibria need not exist).

use crate::demand::{demand, demand_monotone, DemandAnswer, DemandSpec};
use crate::fnp::{find_new_prices, FnpChoice};
use crate::market_model::{
    Bundle, IndividualPrices, ModelError, PriceVector, RunStats, SRInstance,
    SREquilibriumReport, SRStatus,
};
use crate::auction_exchange::InvariantLog;

const AMOUNT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SRInitMode {
    /// Start from the instance's initial prices with all goods fully sold,
    /// split among the agents' demand bundles.
    Given,
    /// Start from uniform prices (eps/m) sum b with nothing sold; clearing is
    /// weakened to "unsold value <= eps sum b".
    UniformEmpty,
}

impl std::str::FromStr for SRInitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "given" => Ok(SRInitMode::Given),
            "uniform" | "uniform-empty" => Ok(SRInitMode::UniformEmpty),
            _ => Err(format!("unknown init mode: {s}")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SRConfig {
    pub fnp: FnpChoice,
    pub init: SRInitMode,
    /// Hard price cap; exceeding it ends the run with a cap-breach report.
    /// Defaults to the derived bound when one exists.
    pub price_cap: Option<f64>,
}

impl Default for SRConfig {
    fn default() -> Self {
        SRConfig {
            fnp: FnpChoice::Auto,
            init: SRInitMode::Given,
            price_cap: None,
        }
    }
}

pub struct SROutcome {
    pub report: SREquilibriumReport,
    pub invariants: InvariantLog,
}

pub fn available_amount(p_j: f64, t_j: f64) -> f64 {
    (t_j / p_j).min(1.0)
}

struct SRAgent2 {
    spec: DemandSpec,
    budget: f64,
    prices: IndividualPrices,
    holdings: Bundle,
    /// Cached optimal-bundle certificate at (prices, budget).
    cert: DemandAnswer,
}

struct SRAuction<'a> {
    eps: f64,
    p: PriceVector,
    caps: Vec<f64>,
    agents: Vec<SRAgent2>,
    low: Vec<f64>,
    unsold: Vec<f64>,
    weak: bool,
    config: &'a SRConfig,
    price_cap: f64,
    stats: RunStats,
    log: InvariantLog,
}

pub fn run_sr_auction(inst: &SRInstance, config: &SRConfig) -> Result<SROutcome, ModelError> {
    let start = std::time::Instant::now();
    let mut auction = init_sr(inst, config)?;
    let status = auction.run()?;
    let report = auction.build_report(status, start.elapsed().as_secs_f64() * 1e3);
    Ok(SROutcome {
        report,
        invariants: auction.log,
    })
}

fn init_sr<'a>(inst: &SRInstance, config: &'a SRConfig) -> Result<SRAuction<'a>, ModelError> {
    let m = inst.m();
    let eps = inst.eps;
    let caps = inst.effective_caps();
    let total_budget = inst.total_budget();
    let price_cap = config
        .price_cap
        .or_else(|| price_cap_bound(inst).bound)
        .unwrap_or(f64::INFINITY);

    let (base, weak) = match config.init {
        SRInitMode::Given => {
            let p0 = inst.init_prices.clone().ok_or_else(|| {
                ModelError::InvalidInstance(
                    "the given-init mode needs initial prices in the instance".into(),
                )
            })?;
            (p0, false)
        }
        SRInitMode::UniformEmpty => {
            let u = eps / m as f64 * total_budget;
            ((0..m).map(|j| u.min(caps[j])).collect(), true)
        }
    };
    let p = PriceVector::new(base.clone(), eps);

    let mut agents: Vec<SRAgent2> = inst
        .agents
        .iter()
        .map(|a| {
            let cert = init_demand(&a.demand, &base, a.budget);
            SRAgent2 {
                spec: a.demand.clone(),
                budget: a.budget,
                prices: IndividualPrices::new(base.clone()),
                holdings: Bundle::zeros(m),
                cert,
            }
        })
        .collect();

    let (low, unsold) = match config.init {
        SRInitMode::Given => {
            // All goods fully sold at the low price, split within the
            // agents' demand bundles in agent-index order.
            for j in 0..m {
                let total: f64 = agents.iter().map(|a| a.cert.bundle[j]).sum();
                if total < 1.0 - 1e-9 {
                    return Err(ModelError::InvalidInstance(format!(
                        "initial demand covers only {total:.6} of good {j}"
                    )));
                }
                let mut remaining = 1.0;
                for a in agents.iter_mut() {
                    let take = a.cert.bundle[j].min(remaining);
                    a.holdings[j] = take;
                    remaining -= take;
                    if remaining <= AMOUNT_TOL {
                        break;
                    }
                }
            }
            (vec![1.0; m], vec![0.0; m])
        }
        SRInitMode::UniformEmpty => (vec![0.0; m], vec![1.0; m]),
    };

    Ok(SRAuction {
        eps,
        p,
        caps,
        agents,
        low,
        unsold,
        weak,
        config,
        price_cap,
        stats: RunStats::default(),
        log: InvariantLog::default(),
    })
}

impl SRAuction<'_> {
    fn m(&self) -> usize {
        self.caps.len()
    }

    fn total_budget(&self) -> f64 {
        self.agents.iter().map(|a| a.budget).sum()
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

    /// Relative surplus: desired spending at the individual prices minus the
    /// actual spending.
    fn relative_surplus(&self, i: usize) -> f64 {
        let a = &self.agents[i];
        a.prices.dot(&a.cert.bundle.0) - self.spend(i)
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

    fn run(&mut self) -> Result<SRStatus, ModelError> {
        let n = self.agents.len();
        let eps = self.eps;
        let round_bound = (2.0 / eps).ceil() as u32 + 1;
        let total_b = self.total_budget();
        // Prices rise by (1+eps) factors from the smallest initial price up
        // to the cap; cap the iteration count accordingly.
        let p_min0 = (0..self.m())
            .map(|j| self.p.value(j))
            .fold(f64::INFINITY, f64::min);
        let max_exp = if self.price_cap.is_finite() {
            ((self.price_cap / p_min0).ln() / (1.0 + eps).ln()).ceil() as u64 + 2
        } else {
            ((1e12f64).ln() / (1.0 + eps).ln()).ceil() as u64
        };
        let max_iterations = (self.m() as u64 + 1) * (max_exp + 2);
        loop {
            self.stats.iterations += 1;
            if self.stats.iterations > max_iterations {
                return Ok(SRStatus::CapBreach);
            }
            let mut rounds_here: u32 = 0;
            'iteration: loop {
                let total: f64 = (0..n).map(|i| self.relative_surplus(i)).sum();
                if total <= 3.0 * eps * total_b {
                    self.stats.rounds_per_iteration.push(rounds_here);
                    return Ok(SRStatus::Equilibrium);
                }
                rounds_here += 1;
                if rounds_here > 4 * round_bound {
                    return Err(ModelError::Other(
                        "round bound exceeded; the run diverged".into(),
                    ));
                }
                for i in 0..n {
                    if self.relative_surplus(i) <= 0.0 {
                        continue;
                    }
                    self.step(i)?;
                    self.check_invariants();
                    match self.raise_prices()? {
                        RaiseOutcome::None => {}
                        RaiseOutcome::Increased => break 'iteration,
                        RaiseOutcome::CapBreach => {
                            self.stats.rounds_per_iteration.push(rounds_here);
                            return Ok(SRStatus::CapBreach);
                        }
                    }
                }
            }
            self.stats.rounds_per_iteration.push(rounds_here);
            self.log.max_rounds_in_iteration =
                self.log.max_rounds_in_iteration.max(rounds_here);
        }
    }

    fn step(&mut self, i: usize) -> Result<(), ModelError> {
        self.stats.steps += 1;
        let (spec, b) = (self.agents[i].spec.clone(), self.agents[i].budget);
        let desired_before = self.agents[i].prices.dot(&self.agents[i].cert.bundle.0);
        let surplus_before = self.relative_surplus(i);
        let phi_before = self.phi();
        let result = find_new_prices(
            &spec,
            self.config.fnp,
            &self.agents[i].prices,
            &self.p,
            &self.agents[i].holdings,
            b,
            Some(&self.agents[i].cert),
        )?;
        self.stats.fnp_calls += 1;
        self.stats.fnp_price_bumps += result.price_steps;
        let y = result.bundle;
        // Spending monotonicity (the budget-increase assumption): the new
        // desired spending never falls below the old one.
        let desired_after = result.prices.dot(&y.0);
        if desired_after < desired_before - 1e-9 * b.max(1.0) {
            self.log.violations += 1;
        }
        for j in 0..self.m() {
            let was_high = self.agents[i].prices.is_at_cap(j);
            let now_high = result.prices.is_at_cap(j);
            if !now_high {
                continue;
            }
            let own = self.agents[i].holdings[j];
            if !was_high {
                self.low[j] -= own;
                self.agents[i].prices.set_at_cap(j, self.p.cap_value(j));
            }
            let want = y[j] - own;
            if want > AMOUNT_TOL {
                self.outbid(i, j, want);
            }
        }
        self.agents[i].prices = result.prices;
        if let Some(cert) = result.new_cert {
            self.agents[i].cert = cert;
        } else {
            let spend = self.agents[i].prices.dot(&y.0);
            self.agents[i].cert = DemandAnswer {
                bundle: y.clone(),
                spend,
                beta: None,
                gamma: None,
                segment_alloc: None,
            };
        }
        let will_increase = (0..self.m()).any(|j| self.unsold[j] + self.low[j] <= AMOUNT_TOL);
        if !will_increase {
            let dphi = self.phi() - phi_before;
            if dphi < surplus_before - 2.25 * self.eps * b - 1e-9 * b.max(1.0) {
                self.log.violations += 1;
            }
        }
        Ok(())
    }

    fn outbid(&mut self, i: usize, j: usize, mut t: f64) {
        if self.unsold[j] > AMOUNT_TOL {
            debug_assert!(self.weak, "unsold pool requires the uniform-empty mode");
            debug_assert_eq!(self.p.exponent(j), 0, "unsold good at its initial price");
            let tau = self.unsold[j].min(t);
            self.unsold[j] -= tau;
            self.agents[i].holdings[j] += tau;
            t -= tau;
            self.stats.outbid_passes += 1;
        }
        while t > AMOUNT_TOL && self.low[j] > AMOUNT_TOL {
            let Some(k) = (0..self.agents.len()).find(|&k| {
                k != i
                    && self.agents[k].holdings[j] > AMOUNT_TOL
                    && !self.agents[k].prices.is_at_cap(j)
            }) else {
                break;
            };
            let tau = self.agents[k].holdings[j].min(t);
            self.agents[k].holdings[j] -= tau;
            self.agents[i].holdings[j] += tau;
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

    fn raise_prices(&mut self) -> Result<RaiseOutcome, ModelError> {
        let mut outcome = RaiseOutcome::None;
        for j in 0..self.m() {
            if self.unsold[j] + self.low[j] > AMOUNT_TOL {
                continue;
            }
            let a_old = available_amount(self.p.value(j), self.caps[j]);
            let new_price = self.p.value(j) * (1.0 + self.eps);
            if new_price > self.price_cap * (1.0 + 1e-12) {
                return Ok(RaiseOutcome::CapBreach);
            }
            self.unsold[j] = 0.0;
            self.p.bump(j);
            let a_new = available_amount(self.p.value(j), self.caps[j]);
            if a_new < a_old - AMOUNT_TOL {
                self.trim_after_increase(j, a_old - a_new);
            }
            self.low[j] = a_new;
            let cap = self.p.cap_value(j);
            for k in 0..self.agents.len() {
                let old = self.agents[k].prices.values().to_vec();
                self.agents[k].prices.set_interior(j, self.p.value(j), cap);
                let a = &mut self.agents[k];
                let y = demand_monotone(
                    &a.spec,
                    &old,
                    a.budget,
                    a.prices.values(),
                    a.budget,
                    &a.cert.bundle,
                );
                a.cert = refresh_cert(&a.spec, a.prices.values(), a.budget, y);
            }
            outcome = RaiseOutcome::Increased;
        }
        Ok(outcome)
    }

    /// The price of `j` rose above its spending cap: reduce the amount sold
    /// to the new available amount, taking from the largest holders first
    /// (lowest index on ties) and refunding at the new low price.
    fn trim_after_increase(&mut self, j: usize, mut excess: f64) {
        while excess > AMOUNT_TOL {
            let Some(k) = (0..self.agents.len())
                .filter(|&k| self.agents[k].holdings[j] > AMOUNT_TOL)
                .max_by(|&a, &b| {
                    self.agents[a].holdings[j]
                        .partial_cmp(&self.agents[b].holdings[j])
                        .unwrap()
                        .then(b.cmp(&a))
                })
            else {
                break;
            };
            let tau = self.agents[k].holdings[j].min(excess);
            self.agents[k].holdings[j] -= tau;
            excess -= tau;
        }
    }

    fn check_invariants(&mut self) {
        let scale = self.total_budget().max(1.0);
        for j in 0..self.m() {
            let a_j = available_amount(self.p.value(j), self.caps[j]);
            let sold: f64 = self.agents.iter().map(|a| a.holdings[j]).sum();
            // (b-SR) exactly a_j of the good is sold (the unsold pool counts
            // toward it only in the weak mode).
            if (sold + self.unsold[j] - a_j).abs() > 1e-9 * scale {
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
        }
        for a in &self.agents {
            for j in 0..self.m() {
                let v = a.prices.value(j);
                if v < self.p.value(j) - 1e-9 || v > self.p.cap_value(j) + 1e-9 {
                    self.log.violations += 1;
                }
                if a.holdings[j] > a.cert.bundle[j] + 1e-9 * scale {
                    self.log.violations += 1;
                }
            }
        }
    }

    fn build_report(&self, status: SRStatus, wall_time_ms: f64) -> SREquilibriumReport {
        let mut stats = self.stats.clone();
        stats.wall_time_ms = wall_time_ms;
        let unsold_value: f64 = (0..self.m())
            .map(|j| self.p.value(j) * self.unsold[j])
            .sum();
        SREquilibriumReport {
            status,
            prices: self.p.clone(),
            individual_prices: self.agents.iter().map(|a| a.prices.clone()).collect(),
            allocations: self.agents.iter().map(|a| a.holdings.clone()).collect(),
            witnesses: self.agents.iter().map(|a| a.cert.bundle.clone()).collect(),
            budgets: self.agents.iter().map(|a| a.budget).collect(),
            available: (0..self.m())
                .map(|j| available_amount(self.p.value(j), self.caps[j]))
                .collect(),
            total_relative_surplus: (0..self.agents.len())
                .map(|i| self.relative_surplus(i))
                .sum(),
            weak_clearing: self.weak,
            unsold_value,
            stats,
        }
    }
}

enum RaiseOutcome {
    None,
    Increased,
    CapBreach,
}

/// Demand bundle used at initialization. For linear demands the optimal
/// bundle is not unique under ties; spreading the budget evenly over the
/// maximum bang-per-buck goods maximizes coverage for the given-init split.
fn init_demand(spec: &DemandSpec, p: &[f64], b: f64) -> DemandAnswer {
    if let DemandSpec::Linear { v } = spec {
        let mbb = crate::demand::mbb_goods(v, p);
        if !mbb.is_empty() && b > 0.0 {
            let share = b / mbb.len() as f64;
            let mut bundle = Bundle::zeros(p.len());
            for &j in &mbb {
                bundle[j] = share / p[j];
            }
            return DemandAnswer {
                bundle,
                spend: b,
                beta: None,
                gamma: None,
                segment_alloc: None,
            };
        }
    }
    demand(spec, p, b)
}

fn refresh_cert(spec: &DemandSpec, p: &[f64], b: f64, y: Bundle) -> DemandAnswer {
    match spec {
        DemandSpec::Basplc { segments, cap } => {
            // Re-derive the certificate scalars at the new prices; the greedy
            // with held preference reproduces y.
            let prefer = crate::demand::bundle_to_segments(segments, &y);
            crate::demand::gale_demand_basplc(segments, *cap, p, b, Some(&prefer))
        }
        _ => {
            let spend = y.dot(p);
            DemandAnswer {
                bundle: y,
                spend,
                beta: None,
                gamma: None,
                segment_alloc: None,
            }
        }
    }
}

/// Marginal utility of good `j` at `amount` of it, when expressible.
fn marginal(spec: &DemandSpec, j: usize, amount: f64) -> Option<f64> {
    match spec {
        DemandSpec::Linear { v } => Some(v[j]),
        DemandSpec::Basplc { segments, cap } => {
            // Budget-additive: the marginal vanishes once the utility cap is
            // reachable regardless of good j.
            if cap.is_finite() {
                let total: f64 = segments
                    .iter()
                    .map(|s| {
                        let mut left = amount;
                        let mut u = 0.0;
                        for seg in s {
                            let take = seg.len.min(left);
                            u += seg.rate * take;
                            left -= take;
                            if left <= 0.0 {
                                break;
                            }
                        }
                        u
                    })
                    .sum();
                if total >= *cap {
                    return Some(0.0);
                }
            }
            let mut left = amount;
            for seg in &segments[j] {
                if left < seg.len {
                    return Some(seg.rate);
                }
                left -= seg.len;
            }
            Some(0.0)
        }
        _ => None,
    }
}

/// Hall-type necessary condition: every agent set must be able to spend its
/// budget on the goods it is interested in. Returns a violating set if any.
pub fn check_hall_condition(inst: &SRInstance) -> Option<Vec<usize>> {
    hall_violation(inst, false)
}

fn hall_violation(inst: &SRInstance, strict: bool) -> Option<Vec<usize>> {
    let n = inst.n();
    let m = inst.m();
    let caps = inst.effective_caps();
    let interests: Vec<Vec<bool>> = inst.agents.iter().map(|a| a.demand.interest()).collect();
    if n <= 20 {
        for mask in 1u32..(1u32 << n) {
            let mut b_sum = 0.0;
            let mut covered = vec![false; m];
            for i in 0..n {
                if mask & (1 << i) != 0 {
                    b_sum += inst.agents[i].budget;
                    for j in 0..m {
                        covered[j] |= interests[i][j];
                    }
                }
            }
            let t_sum: f64 = (0..m).filter(|&j| covered[j]).map(|j| caps[j]).sum();
            let bad = if strict {
                b_sum >= t_sum - 1e-9
            } else {
                b_sum > t_sum + 1e-9
            };
            if bad {
                return Some((0..n).filter(|i| mask & (1 << i) != 0).collect());
            }
        }
        return None;
    }
    max_flow_violation(inst, &interests, &caps, strict)
}

/// Max-flow feasibility check for larger instances: source->agent (budget),
/// agent->good (infinite when interested), good->sink (cap). Hall holds iff
/// the max flow saturates the total budget.
fn max_flow_violation(
    inst: &SRInstance,
    interests: &[Vec<bool>],
    caps: &[f64],
    strict: bool,
) -> Option<Vec<usize>> {
    let n = inst.n();
    let m = inst.m();
    let nodes = 2 + n + m; // 0 source, 1..=n agents, n+1..n+m goods, last sink
    let sink = nodes - 1;
    let mut cap = vec![vec![0.0f64; nodes]; nodes];
    let total_b: f64 = inst.agents.iter().map(|a| a.budget).sum();
    for i in 0..n {
        cap[0][1 + i] = inst.agents[i].budget;
        for j in 0..m {
            if interests[i][j] {
                cap[1 + i][1 + n + j] = f64::INFINITY;
            }
        }
    }
    for j in 0..m {
        cap[1 + n + j][sink] = caps[j].min(total_b + 1.0);
    }
    let mut flow = 0.0;
    loop {
        // BFS augmenting path on the residual graph.
        let mut parent = vec![usize::MAX; nodes];
        parent[0] = 0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for v in 0..nodes {
                if parent[v] == usize::MAX && cap[u][v] > 1e-12 {
                    parent[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if parent[sink] == usize::MAX {
            break;
        }
        let mut aug = f64::INFINITY;
        let mut v = sink;
        while v != 0 {
            aug = aug.min(cap[parent[v]][v]);
            v = parent[v];
        }
        let mut v = sink;
        while v != 0 {
            cap[parent[v]][v] -= aug;
            cap[v][parent[v]] += aug;
            v = parent[v];
        }
        flow += aug;
    }
    let feasible = if strict {
        flow > total_b - 1e-9 && (0..m).all(|j| cap[1 + n + j][sink] > 1e-9)
    } else {
        flow >= total_b - 1e-9
    };
    if feasible {
        return None;
    }
    // Violating set: agents on the source side of the residual min cut.
    let mut reach = vec![false; nodes];
    reach[0] = true;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for v in 0..nodes {
            if !reach[v] && cap[u][v] > 1e-12 {
                reach[v] = true;
                queue.push_back(v);
            }
        }
    }
    Some((0..n).filter(|&i| reach[1 + i]).collect())
}

/// Derived upper bound on SR prices, when the utility derivative bounds are
/// finite. `warning` is set when the bound falls back (e.g. Cobb-Douglas
/// marginals are unbounded at zero).
pub struct PriceCapBound {
    pub bound: Option<f64>,
    pub warning: Option<String>,
}

pub fn price_cap_bound(inst: &SRInstance) -> PriceCapBound {
    let n = inst.n();
    let m = inst.m();
    let eps = inst.eps;
    let caps = inst.effective_caps();
    let t_max = caps.iter().fold(0.0f64, |a, &b| a.max(b));
    let p_min = match &inst.init_prices {
        Some(p0) => p0.iter().fold(f64::INFINITY, |a, &b| a.min(b)),
        None => {
            let u = eps / m as f64 * inst.total_budget();
            (0..m).map(|j| u.min(caps[j])).fold(f64::INFINITY, f64::min)
        }
    };
    let d_bound = inst.agents.iter().map(|a| a.budget).fold(0.0f64, f64::max) / p_min;
    let mut v_max_ratio = 1.0f64;
    for (i, a) in inst.agents.iter().enumerate() {
        let interest = a.demand.interest();
        let mut vmax = 0.0f64;
        let mut vmin = f64::INFINITY;
        for j in 0..m {
            if !interest[j] {
                continue;
            }
            let (Some(at0), Some(at_d)) = (
                marginal(&a.demand, j, 0.0),
                marginal(&a.demand, j, d_bound),
            ) else {
                return PriceCapBound {
                    bound: None,
                    warning: Some(format!(
                        "agent {i}: marginal utility unbounded at zero; no finite price bound"
                    )),
                };
            };
            vmax = vmax.max(at0);
            vmin = vmin.min(at_d);
        }
        if vmin <= 0.0 {
            return PriceCapBound {
                bound: None,
                warning: Some(format!(
                    "agent {i}: marginal utility can vanish; no finite price bound"
                )),
            };
        }
        v_max_ratio = v_max_ratio.max(vmax / vmin);
    }
    let full_interest = inst
        .agents
        .iter()
        .all(|a| a.demand.interest().iter().all(|&x| x));
    let total_b = inst.total_budget();
    let total_t: f64 = caps.iter().sum();
    if full_interest && total_b <= total_t + 1e-9 {
        return PriceCapBound {
            bound: Some((1.0 + eps).powi(2) * t_max * v_max_ratio),
            warning: None,
        };
    }
    if hall_violation(inst, true).is_none() {
        return PriceCapBound {
            bound: Some((1.0 + eps).powi(n as i32) * t_max * v_max_ratio.powi(n as i32 - 1)),
            warning: None,
        };
    }
    PriceCapBound {
        bound: None,
        warning: Some("the strict feasibility condition fails; no derived price bound".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::SRAgent;

    fn single_linear(eps: f64, t: Vec<f64>, init: Option<Vec<f64>>) -> SRInstance {
        SRInstance {
            eps,
            agents: vec![SRAgent {
                budget: 2.0,
                demand: DemandSpec::Linear { v: vec![1.0, 1.0] },
            }],
            caps: t,
            init_prices: init,
        }
    }

    #[test]
    fn available_amount_examples() {
        assert_eq!(available_amount(2.0, 1.0), 0.5);
        assert_eq!(available_amount(0.5, 1.0), 1.0);
        assert_eq!(available_amount(5.0, f64::INFINITY), 1.0);
    }

    #[test]
    fn single_agent_symmetric_caps() {
        // One agent, b = 2, t = (1,1): the agent would spend 1 per good at
        // prices (2,2); the run may stop earlier once the relative surplus
        // drops under 3 eps sum b.
        let eps = 0.05;
        let inst = single_linear(eps, vec![1.0, 1.0], Some(vec![0.5, 0.5]));
        let out = run_sr_auction(&inst, &SRConfig::default()).unwrap();
        assert_eq!(out.report.status, SRStatus::Equilibrium);
        assert_eq!(out.invariants.violations, 0);
        assert!(out.report.total_relative_surplus <= 3.0 * eps * 2.0 + 1e-9);
        // Exact clearing: everything available is sold.
        for j in 0..2 {
            let sold: f64 = out.report.allocations.iter().map(|a| a[j]).sum();
            assert!((sold - out.report.available[j]).abs() < 1e-9);
            assert!(out.report.prices.value(j) <= 2.0 * (1.0 + eps).powi(2));
        }
    }

    #[test]
    fn cobb_douglas_nonexistence_breaches_cap() {
        // alpha_k > 1/b with t_k = 1: the agent wants to spend 5 on good 0
        // at any price, but at most 1 can be spent on it. The shortfall of 4
        // exceeds the termination slack 3 eps sum b = 3, so the price of
        // good 0 rises without bound.
        let inst = SRInstance {
            eps: 0.1,
            agents: vec![SRAgent {
                budget: 10.0,
                demand: DemandSpec::CobbDouglas {
                    alpha: vec![0.5, 0.5],
                },
            }],
            caps: vec![1.0, f64::INFINITY],
            init_prices: Some(vec![0.1, 0.1]),
        };
        let cfg = SRConfig {
            price_cap: Some(100.0),
            ..SRConfig::default()
        };
        let out = run_sr_auction(&inst, &cfg).unwrap();
        assert_eq!(out.report.status, SRStatus::CapBreach);
    }

    #[test]
    fn uniform_empty_weak_clearing() {
        let inst = single_linear(0.1, vec![f64::INFINITY, f64::INFINITY], None);
        let cfg = SRConfig {
            init: SRInitMode::UniformEmpty,
            ..SRConfig::default()
        };
        let out = run_sr_auction(&inst, &cfg).unwrap();
        assert_eq!(out.report.status, SRStatus::Equilibrium);
        assert!(out.report.weak_clearing);
        assert!(out.report.unsold_value <= 0.1 * 2.0 + 1e-9);
    }

    #[test]
    fn hall_examples() {
        // Agent with budget 3 interested only in a good with cap 1.
        let inst = SRInstance {
            eps: 0.1,
            agents: vec![SRAgent {
                budget: 3.0,
                demand: DemandSpec::Linear { v: vec![1.0, 0.0] },
            }],
            caps: vec![1.0, 1.0],
            init_prices: None,
        };
        assert_eq!(check_hall_condition(&inst), Some(vec![0]));

        let ok = single_linear(0.1, vec![2.0, 2.0], None);
        assert_eq!(check_hall_condition(&ok), None);

        let two = SRInstance {
            eps: 0.1,
            agents: vec![
                SRAgent {
                    budget: 1.0,
                    demand: DemandSpec::Linear { v: vec![1.0] },
                },
                SRAgent {
                    budget: 1.0,
                    demand: DemandSpec::Linear { v: vec![1.0] },
                },
            ],
            caps: vec![1.5],
            init_prices: None,
        };
        assert_eq!(check_hall_condition(&two), Some(vec![0, 1]));
    }

    #[test]
    fn price_bound_forms() {
        // Full interest: the squared-factor bound applies.
        let inst = SRInstance {
            eps: 0.1,
            agents: vec![SRAgent {
                budget: 1.0,
                demand: DemandSpec::Linear { v: vec![2.0, 1.0] },
            }],
            caps: vec![1.0, 1.0],
            init_prices: Some(vec![0.1, 0.1]),
        };
        let b = price_cap_bound(&inst);
        assert!((b.bound.unwrap() - 1.1f64.powi(2) * 1.0 * 2.0).abs() < 1e-12);

        // Cobb-Douglas: unbounded marginals, fallback with warning.
        let cd = SRInstance {
            eps: 0.1,
            agents: vec![SRAgent {
                budget: 1.0,
                demand: DemandSpec::CobbDouglas {
                    alpha: vec![0.5, 0.5],
                },
            }],
            caps: vec![1.0, 1.0],
            init_prices: None,
        };
        let b = price_cap_bound(&cd);
        assert!(b.bound.is_none() && b.warning.is_some());
    }

    #[test]
    fn trim_keeps_clearing_exact() {
        // Two linear agents pushing one capped good's price above its cap.
        let inst = SRInstance {
            eps: 0.1,
            agents: vec![
                SRAgent {
                    budget: 2.0,
                    demand: DemandSpec::Linear { v: vec![3.0, 1.0] },
                },
                SRAgent {
                    budget: 2.0,
                    demand: DemandSpec::Linear { v: vec![1.0, 3.0] },
                },
            ],
            caps: vec![1.0, f64::INFINITY],
            init_prices: Some(vec![0.25, 0.25]),
        };
        let out = run_sr_auction(&inst, &SRConfig::default()).unwrap();
        assert_eq!(out.report.status, SRStatus::Equilibrium);
        assert_eq!(out.invariants.violations, 0);
        for j in 0..2 {
            let sold: f64 = out.report.allocations.iter().map(|a| a[j]).sum();
            assert!(
                (sold - out.report.available[j]).abs() < 1e-9,
                "good {j}: sold {sold} vs available {}",
                out.report.available[j]
            );
        }
    }
}
