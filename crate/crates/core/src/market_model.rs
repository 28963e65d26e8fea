//! Core domain types shared by every solver: prices, bundles, problem
//! instances and reports, plus the JSON instance schema.
//!
//! Market prices are stored as `base * (1+eps)^k` with an integer exponent
//! `k`. The auction only ever multiplies prices by `(1+eps)`, so exponent
//! arithmetic removes float drift and makes "this individual price equals the
//! cap" decidable exactly via a flag instead of a float comparison.

use serde::{Deserialize, Serialize};

use crate::demand::DemandSpec;

/// Absolute tolerance for money/quantity comparisons on values normalized so
/// that initial prices are Theta(1).
pub const MONEY_TOL: f64 = 1e-9;

/// Allocation entries below this are snapped to zero and returned to the
/// unsold/low pools, preventing denormal accumulation.
pub const SNAP_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("price exponent exceeded maximum {max} on good {good}")]
    ExponentOverflow { good: usize, max: u32 },
    #[error("no SR-equilibrium within price cap {cap} (good {good} reached {price})")]
    PriceCapBreach { good: usize, price: f64, cap: f64 },
    #[error("FindNewPrices failed: {0}")]
    Fnp(String),
    #[error("{0}")]
    Other(String),
}

/// Market prices `p_j = base_j * (1+eps)^{k_j}` with non-decreasing integer
/// exponents `k_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceVector {
    base: Vec<f64>,
    exponents: Vec<u32>,
    eps: f64,
}

impl PriceVector {
    pub fn new(base: Vec<f64>, eps: f64) -> Self {
        assert!(base.iter().all(|&b| b > 0.0 && b.is_finite()));
        let m = base.len();
        PriceVector {
            base,
            exponents: vec![0; m],
            eps,
        }
    }

    /// Exchange-market initialization: all prices 1.
    pub fn ones(m: usize, eps: f64) -> Self {
        Self::new(vec![1.0; m], eps)
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn value(&self, j: usize) -> f64 {
        self.base[j] * (1.0 + self.eps).powi(self.exponents[j] as i32)
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.value(j)).collect()
    }

    /// The higher price `(1+eps) p_j`.
    pub fn cap_value(&self, j: usize) -> f64 {
        self.base[j] * (1.0 + self.eps).powi(self.exponents[j] as i32 + 1)
    }

    pub fn exponent(&self, j: usize) -> u32 {
        self.exponents[j]
    }

    pub fn min_exponent(&self) -> u32 {
        self.exponents.iter().copied().min().unwrap_or(0)
    }

    /// Multiply `p_j` by `(1+eps)`. Exponents only ever increase.
    pub fn bump(&mut self, j: usize) {
        self.exponents[j] += 1;
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(j, &xj)| self.value(j) * xj)
            .sum()
    }
}

/// Agent-individual prices `p <= p^(i) <= (1+eps)p`. Cap membership
/// (`p^(i)_j = (1+eps)p_j`, the set `H_i`) is tracked by flag, never by float
/// comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualPrices {
    values: Vec<f64>,
    at_cap: Vec<bool>,
}

impl IndividualPrices {
    pub fn new(values: Vec<f64>) -> Self {
        let m = values.len();
        IndividualPrices {
            values,
            at_cap: vec![false; m],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, j: usize) -> f64 {
        self.values[j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_at_cap(&self, j: usize) -> bool {
        self.at_cap[j]
    }

    /// Set an interior price (clears the cap flag). A value within relative
    /// 1e-12 of the cap without the flag is a solver bug.
    pub fn set_interior(&mut self, j: usize, value: f64, cap: f64) {
        debug_assert!(
            (cap - value).abs() > 1e-12 * cap.max(1.0),
            "interior price indistinguishable from cap on good {j}: {value} vs {cap}"
        );
        self.values[j] = value;
        self.at_cap[j] = false;
    }

    /// Pin `p^(i)_j` to the cap `(1+eps)p_j` bit-for-bit.
    pub fn set_at_cap(&mut self, j: usize, cap: f64) {
        self.values[j] = cap;
        self.at_cap[j] = true;
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.values.iter().zip(x).map(|(p, x)| p * x).sum()
    }
}

/// A non-negative vector of good quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bundle(pub Vec<f64>);

impl Bundle {
    pub fn zeros(m: usize) -> Self {
        Bundle(vec![0.0; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, p: &[f64]) -> f64 {
        self.0.iter().zip(p).map(|(x, p)| x * p).sum()
    }

    pub fn dominates(&self, other: &Bundle, tol: f64) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| *a >= *b - tol)
    }
}

impl std::ops::Index<usize> for Bundle {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

impl std::ops::IndexMut<usize> for Bundle {
    fn index_mut(&mut self, j: usize) -> &mut f64 {
        &mut self.0[j]
    }
}

/// Serde helper: `f64` that encodes infinity as the string `"inf"`.
pub mod json_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumOrInf {
        Num(f64),
        Word(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match NumOrInf::deserialize(d)? {
            NumOrInf::Num(x) => Ok(x),
            NumOrInf::Word(w) if w == "inf" => Ok(f64::INFINITY),
            NumOrInf::Word(w) => Err(serde::de::Error::custom(format!(
                "expected number or \"inf\", got {w:?}"
            ))),
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*x)
        }
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let raw: Vec<super::NumOrInfOwned> = Vec::deserialize(d)?;
            raw.into_iter()
                .map(|x| x.into_f64().map_err(serde::de::Error::custom))
                .collect()
        }

        pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(xs.len()))?;
            for x in xs {
                if x.is_infinite() {
                    seq.serialize_element("inf")?;
                } else {
                    seq.serialize_element(x)?;
                }
            }
            seq.end()
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    pub(super) enum NumOrInfOwned {
        Num(f64),
        Word(String),
    }

    impl NumOrInfOwned {
        pub(super) fn into_f64(self) -> Result<f64, String> {
            match self {
                NumOrInfOwned::Num(x) => Ok(x),
                NumOrInfOwned::Word(w) if w == "inf" => Ok(f64::INFINITY),
                NumOrInfOwned::Word(w) => Err(format!("expected number or \"inf\", got {w:?}")),
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExchangeAgent {
    pub endowment: Vec<f64>,
    pub demand: DemandSpec,
}

/// Arrow-Debreu exchange market instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExchangeInstance {
    pub eps: f64,
    pub agents: Vec<ExchangeAgent>,
}

impl ExchangeInstance {
    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn m(&self) -> usize {
        self.agents.first().map_or(0, |a| a.endowment.len())
    }

    /// Total supply `e = sum_i e^(i)`.
    pub fn total_supply(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.m()];
        for a in &self.agents {
            for (ej, &aj) in e.iter_mut().zip(&a.endowment) {
                *ej += aj;
            }
        }
        e
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SRAgent {
    pub budget: f64,
    pub demand: DemandSpec,
}

/// Fisher market with spending restrictions: unit supply per good, spending
/// on good j capped at `t_j`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SRInstance {
    pub eps: f64,
    pub agents: Vec<SRAgent>,
    #[serde(with = "json_f64::vec")]
    pub caps: Vec<f64>,
    /// Initial prices for the "given" initialization mode. Must satisfy
    /// `p_bar < t` and admit demands with `sum_i x^(i) >= 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_prices: Option<Vec<f64>>,
}

impl SRInstance {
    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn m(&self) -> usize {
        self.caps.len()
    }

    pub fn total_budget(&self) -> f64 {
        self.agents.iter().map(|a| a.budget).sum()
    }

    /// Caps truncated to `min{t_j, sum_i b_i}`; total spending can never
    /// exceed the total budget, so this does not change the problem.
    pub fn effective_caps(&self) -> Vec<f64> {
        let total = self.total_budget();
        self.caps.iter().map(|&t| t.min(total)).collect()
    }
}

/// One SPLC segment: `len` units valued at `rate` each.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct Segment {
    pub rate: f64,
    pub len: f64,
}

impl From<(f64, f64)> for Segment {
    fn from((rate, len): (f64, f64)) -> Self {
        Segment { rate, len }
    }
}

impl From<Segment> for (f64, f64) {
    fn from(s: Segment) -> Self {
        (s.rate, s.len)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NSWAgent {
    /// Per-good segment lists, rates strictly decreasing within a good.
    pub segments: Vec<Vec<Segment>>,
    /// Utility cap `U_i`; `"inf"` for uncapped.
    #[serde(with = "json_f64", default = "inf")]
    pub cap: f64,
}

fn inf() -> f64 {
    f64::INFINITY
}

/// Nash-social-welfare instance: indivisible copies of goods, budget-additive
/// SPLC utilities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NSWInstance {
    #[serde(default = "default_nsw_eps_marker")]
    pub eps: f64,
    /// Copy counts `D_j >= 1`.
    pub copies: Vec<u64>,
    pub agents: Vec<NSWAgent>,
}

fn default_nsw_eps_marker() -> f64 {
    0.0 // 0 means "pick the default eps = 0.01/n at solve time"
}

impl NSWInstance {
    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn m(&self) -> usize {
        self.copies.len()
    }

    pub fn total_copies(&self) -> u64 {
        self.copies.iter().sum()
    }

    pub fn effective_eps(&self) -> f64 {
        if self.eps > 0.0 {
            self.eps
        } else {
            0.01 / self.n() as f64
        }
    }
}

/// Any instance file, dispatched on `"kind"`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Instance {
    Exchange(ExchangeInstance),
    Sr(SRInstance),
    Nsw(NSWInstance),
}

impl Instance {
    pub fn from_json(s: &str) -> Result<Instance, ModelError> {
        serde_json::from_str(s).map_err(|e| ModelError::InvalidInstance(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serialization")
    }
}

/// Structural validation. Returns a list of human-readable violations;
/// empty iff all type invariants hold.
pub fn validate_instance(inst: &Instance) -> Vec<String> {
    let mut out = Vec::new();
    match inst {
        Instance::Exchange(x) => {
            check_eps(x.eps, &mut out);
            if x.agents.is_empty() {
                out.push("instance has no agents".into());
                return out;
            }
            let m = x.m();
            for (i, a) in x.agents.iter().enumerate() {
                if a.endowment.len() != m {
                    out.push(format!("agent {i} endowment has wrong dimension"));
                }
                if a.endowment.iter().any(|&e| e < 0.0 || !e.is_finite()) {
                    out.push(format!("agent {i} endowment has a negative or non-finite entry"));
                }
                crate::demand::validate_spec(&a.demand, m, &mut out, &format!("agent {i}"));
            }
            for (j, &ej) in x.total_supply().iter().enumerate() {
                if ej <= 0.0 {
                    out.push(format!("good {j} has zero supply"));
                }
            }
        }
        Instance::Sr(x) => {
            check_eps(x.eps, &mut out);
            let m = x.m();
            if x.agents.is_empty() {
                out.push("instance has no agents".into());
            }
            for (j, &t) in x.caps.iter().enumerate() {
                if !(t > 0.0) {
                    out.push(format!("good {j} has nonpositive spending cap"));
                }
            }
            for (i, a) in x.agents.iter().enumerate() {
                if !(a.budget > 0.0 && a.budget.is_finite()) {
                    out.push(format!("agent {i} has nonpositive budget"));
                }
                crate::demand::validate_spec(&a.demand, m, &mut out, &format!("agent {i}"));
            }
            if let Some(p) = &x.init_prices {
                if p.len() != m {
                    out.push("init_prices has wrong dimension".into());
                }
                for (j, (&pj, &tj)) in p.iter().zip(&x.caps).enumerate() {
                    if !(pj > 0.0) || pj >= tj {
                        out.push(format!("init price of good {j} must satisfy 0 < p < t"));
                    }
                }
            }
        }
        Instance::Nsw(x) => {
            if x.eps != 0.0 {
                check_eps(x.eps, &mut out);
            }
            let m = x.m();
            if x.agents.is_empty() {
                out.push("instance has no agents".into());
            }
            for (j, &d) in x.copies.iter().enumerate() {
                if d == 0 {
                    out.push(format!("good {j} has zero copies"));
                }
            }
            for (i, a) in x.agents.iter().enumerate() {
                if a.segments.len() != m {
                    out.push(format!("agent {i} segment lists have wrong dimension"));
                    continue;
                }
                if !(a.cap > 0.0) {
                    out.push(format!("agent {i} has nonpositive utility cap"));
                }
                for (j, segs) in a.segments.iter().enumerate() {
                    let mut total = 0.0;
                    let mut prev = f64::INFINITY;
                    for s in segs {
                        if s.rate < 0.0 || s.rate >= prev {
                            out.push(format!(
                                "agent {i} good {j}: rates must be strictly decreasing and nonnegative"
                            ));
                            break;
                        }
                        prev = s.rate;
                        total += s.len;
                    }
                    if (total - x.copies[j] as f64).abs() > 1e-9 {
                        out.push(format!(
                            "agent {i} good {j}: segment lengths sum to {total}, expected D_j = {}",
                            x.copies[j]
                        ));
                    }
                }
            }
        }
    }
    out
}

fn check_eps(eps: f64, out: &mut Vec<String>) {
    if !(eps > 0.0 && eps < 0.25) {
        out.push(format!("eps must lie in (0, 0.25), got {eps}"));
    }
}

/// Per-run counters reported alongside every solve.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunStats {
    pub iterations: u64,
    pub rounds_per_iteration: Vec<u32>,
    pub steps: u64,
    pub outbid_passes: u64,
    pub fnp_calls: u64,
    pub fnp_price_bumps: u64,
    pub wall_time_ms: f64,
}

/// Certified solver output; `verify` can re-check it without solver state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub prices: PriceVector,
    pub individual_prices: Vec<IndividualPrices>,
    pub allocations: Vec<Bundle>,
    /// Dominating witness bundles `z^(i)` in `D_i(p^(i), b_i)`.
    pub witnesses: Vec<Bundle>,
    pub budgets: Vec<f64>,
    pub total_surplus: f64,
    /// `sum_j p_j (e_j - sum_i c^(i)_j)`.
    pub leftover_value: f64,
    pub stats: RunStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SRStatus {
    Equilibrium,
    /// Prices exceeded the cap: no SR-equilibrium within bound.
    CapBreach,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SREquilibriumReport {
    pub status: SRStatus,
    pub prices: PriceVector,
    pub individual_prices: Vec<IndividualPrices>,
    pub allocations: Vec<Bundle>,
    pub witnesses: Vec<Bundle>,
    pub budgets: Vec<f64>,
    /// Available amounts `a_j = min{1, t_j/p_j}` at the final prices.
    pub available: Vec<f64>,
    pub total_relative_surplus: f64,
    /// True under the uniform-empty initialization: exact clearing is
    /// weakened to "unsold value <= eps * sum b".
    pub weak_clearing: bool,
    /// Unsold value under weak clearing, 0 otherwise.
    pub unsold_value: f64,
    pub stats: RunStats,
}
