//! Demand systems and demand oracles: linear, CES, Cobb-Douglas, convex
//! combinations, and the Gale demand for budget-additive separable
//! piecewise-linear concave (BASPLC) utilities.
//!
//! All oracles are pure functions of (spec, prices, budget). Non-uniqueness
//! (linear MBB ties, BASPLC equal-ratio segments) is resolved by documented
//! deterministic tie-breaks; `demand_monotone` additionally resolves ties
//! toward a previously held bundle so that demands never drop on goods whose
//! prices did not change.

use serde::{Deserialize, Serialize};

use crate::market_model::{json_f64, Bundle, Segment};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConicPart {
    pub lambda: f64,
    pub demand: Box<DemandSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DemandSpec {
    Linear {
        v: Vec<f64>,
    },
    Ces {
        beta: Vec<f64>,
        sigma: f64,
    },
    CobbDouglas {
        alpha: Vec<f64>,
    },
    Conic {
        parts: Vec<ConicPart>,
    },
    Basplc {
        /// Per-good segment lists with strictly decreasing rates.
        segments: Vec<Vec<Segment>>,
        /// Utility cap; `"inf"` when uncapped.
        #[serde(with = "json_f64", default = "infinity")]
        cap: f64,
    },
}

fn infinity() -> f64 {
    f64::INFINITY
}

/// Answer of a demand oracle. `beta`/`gamma` are only present for BASPLC
/// Gale demands: the marginal bang-per-buck and the utility-cap multiplier.
#[derive(Clone, Debug)]
pub struct DemandAnswer {
    pub bundle: Bundle,
    pub spend: f64,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    /// Segment-level allocation for BASPLC (same shape as `segments`).
    pub segment_alloc: Option<Vec<Vec<f64>>>,
}

impl DemandAnswer {
    fn simple(bundle: Bundle, spend: f64) -> Self {
        DemandAnswer {
            bundle,
            spend,
            beta: None,
            gamma: None,
            segment_alloc: None,
        }
    }
}

impl DemandSpec {
    pub fn m(&self) -> usize {
        match self {
            DemandSpec::Linear { v } => v.len(),
            DemandSpec::Ces { beta, .. } => beta.len(),
            DemandSpec::CobbDouglas { alpha } => alpha.len(),
            DemandSpec::Conic { parts } => parts.first().map_or(0, |p| p.demand.m()),
            DemandSpec::Basplc { segments, .. } => segments.len(),
        }
    }

    /// Goods the agent has any interest in (positive marginal utility at 0).
    pub fn interest(&self) -> Vec<bool> {
        match self {
            DemandSpec::Linear { v } => v.iter().map(|&x| x > 0.0).collect(),
            DemandSpec::Ces { beta, .. } => beta.iter().map(|&x| x > 0.0).collect(),
            DemandSpec::CobbDouglas { alpha } => alpha.iter().map(|&x| x > 0.0).collect(),
            DemandSpec::Conic { parts } => {
                let m = self.m();
                let mut out = vec![false; m];
                for part in parts {
                    if part.lambda > 0.0 {
                        for (o, i) in out.iter_mut().zip(part.demand.interest()) {
                            *o |= i;
                        }
                    }
                }
                out
            }
            DemandSpec::Basplc { segments, .. } => segments
                .iter()
                .map(|segs| segs.first().is_some_and(|s| s.rate > 0.0))
                .collect(),
        }
    }

    /// (v_max, v_min): extreme positive marginal-utility rates, when finite.
    /// Finite only for linear and BASPLC; CES and Cobb-Douglas marginals are
    /// unbounded at zero.
    pub fn rate_bounds(&self) -> Option<(f64, f64)> {
        match self {
            DemandSpec::Linear { v } => pos_extremes(v.iter().copied()),
            DemandSpec::Basplc { segments, .. } => {
                pos_extremes(segments.iter().flatten().map(|s| s.rate))
            }
            _ => None,
        }
    }
}

fn pos_extremes(it: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for x in it {
        if x > 0.0 {
            max = max.max(x);
            min = min.min(x);
        }
    }
    (max > 0.0).then_some((max, min))
}

/// Structural validation of a demand spec, appending human-readable
/// violations to `out`.
pub fn validate_spec(spec: &DemandSpec, m: usize, out: &mut Vec<String>, who: &str) {
    match spec {
        DemandSpec::Linear { v } => {
            if v.len() != m {
                out.push(format!("{who}: linear values have wrong dimension"));
            }
            if v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                out.push(format!("{who}: linear values must be finite and nonnegative"));
            }
            if v.iter().all(|&x| x == 0.0) {
                out.push(format!("{who}: linear values are all zero"));
            }
        }
        DemandSpec::Ces { beta, sigma } => {
            if beta.len() != m {
                out.push(format!("{who}: CES weights have wrong dimension"));
            }
            if !(*sigma > 1.0) {
                out.push(format!("{who}: CES requires sigma > 1, got {sigma}"));
            }
            check_simplex(beta, out, who, "CES weights");
        }
        DemandSpec::CobbDouglas { alpha } => {
            if alpha.len() != m {
                out.push(format!("{who}: Cobb-Douglas weights have wrong dimension"));
            }
            check_simplex(alpha, out, who, "Cobb-Douglas weights");
        }
        DemandSpec::Conic { parts } => {
            if parts.is_empty() {
                out.push(format!("{who}: empty combination"));
            }
            let mut total = 0.0;
            for part in parts {
                if part.lambda < 0.0 {
                    out.push(format!("{who}: combination weights must be nonnegative"));
                }
                total += part.lambda;
                match &*part.demand {
                    DemandSpec::Ces { .. } | DemandSpec::CobbDouglas { .. } => {}
                    _ => out.push(format!(
                        "{who}: combination parts must be CES or Cobb-Douglas"
                    )),
                }
                validate_spec(&part.demand, m, out, who);
            }
            // Budget exhaustion (p.y = b) requires the weights to sum to 1.
            if (total - 1.0).abs() > 1e-9 {
                out.push(format!("{who}: combination weights must sum to 1, got {total}"));
            }
        }
        DemandSpec::Basplc { segments, cap } => {
            if segments.len() != m {
                out.push(format!("{who}: segment lists have wrong dimension"));
            }
            if !(*cap > 0.0) {
                out.push(format!("{who}: utility cap must be positive"));
            }
            for (j, segs) in segments.iter().enumerate() {
                let mut prev = f64::INFINITY;
                for s in segs {
                    if s.rate < 0.0 || s.rate >= prev {
                        out.push(format!(
                            "{who}: good {j} rates must be strictly decreasing and nonnegative"
                        ));
                        break;
                    }
                    if !(s.len > 0.0) {
                        out.push(format!("{who}: good {j} has a nonpositive segment length"));
                        break;
                    }
                    prev = s.rate;
                }
            }
        }
    }
}

fn check_simplex(w: &[f64], out: &mut Vec<String>, who: &str, what: &str) {
    if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        out.push(format!("{who}: {what} must be finite and nonnegative"));
    } else if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        out.push(format!("{who}: {what} must sum to 1"));
    }
}

/// Optimal bundle at prices `p` and budget `b`. Deterministic lowest-index
/// tie-break for linear MBB ties and equal-ratio BASPLC segments.
pub fn demand(spec: &DemandSpec, p: &[f64], b: f64) -> DemandAnswer {
    assert!(p.iter().all(|&x| x > 0.0), "nonpositive price");
    if b <= 0.0 {
        return DemandAnswer::simple(Bundle::zeros(p.len()), 0.0);
    }
    match spec {
        DemandSpec::Linear { v } => {
            let mut x = Bundle::zeros(p.len());
            if let Some(j) = mbb_goods(v, p).first() {
                x[*j] = b / p[*j];
            }
            DemandAnswer::simple(x, b)
        }
        DemandSpec::Ces { beta, sigma } => {
            let denom: f64 = beta
                .iter()
                .zip(p)
                .map(|(bj, pj)| bj * pj.powf(1.0 - sigma))
                .sum();
            let x = Bundle(
                beta.iter()
                    .zip(p)
                    .map(|(bj, pj)| bj * pj.powf(-sigma) * b / denom)
                    .collect(),
            );
            DemandAnswer::simple(x, b)
        }
        DemandSpec::CobbDouglas { alpha } => {
            let x = Bundle(alpha.iter().zip(p).map(|(aj, pj)| b * aj / pj).collect());
            DemandAnswer::simple(x, b)
        }
        DemandSpec::Conic { parts } => {
            let mut x = Bundle::zeros(p.len());
            for part in parts {
                if part.lambda == 0.0 {
                    continue;
                }
                let d = demand(&part.demand, p, b);
                for (xj, dj) in x.0.iter_mut().zip(&d.bundle.0) {
                    *xj += part.lambda * dj;
                }
            }
            let spend = x.dot(p);
            DemandAnswer::simple(x, spend)
        }
        DemandSpec::Basplc { segments, cap } => gale_demand_basplc(segments, *cap, p, b, None),
    }
}

/// MBB goods in index order (among goods with positive value).
pub fn mbb_goods(v: &[f64], p: &[f64]) -> Vec<usize> {
    let mut best = 0.0f64;
    for (j, (&vj, &pj)) in v.iter().zip(p).enumerate() {
        let _ = j;
        if vj > 0.0 {
            best = best.max(vj / pj);
        }
    }
    if best == 0.0 {
        return Vec::new();
    }
    v.iter()
        .zip(p)
        .enumerate()
        .filter(|(_, (&vj, &pj))| vj > 0.0 && vj / pj >= best * (1.0 - 1e-12))
        .map(|(j, _)| j)
        .collect()
}

/// Monotone demand oracle: given `x` optimal at `(p, b)` and `(p2, b2) >=
/// (p, b)`, return an optimal bundle at `(p2, b2)` that does not drop below
/// `x` on goods whose prices are unchanged.
pub fn demand_monotone(
    spec: &DemandSpec,
    p: &[f64],
    _b: f64,
    p2: &[f64],
    b2: f64,
    x: &Bundle,
) -> Bundle {
    match spec {
        DemandSpec::Linear { v } => {
            if b2 <= 0.0 {
                return Bundle::zeros(p2.len());
            }
            let mbb = mbb_goods(v, p2);
            let mut y = Bundle::zeros(p2.len());
            let mut rem = b2;
            // Goods that stay MBB at unchanged prices keep their holdings.
            for &j in &mbb {
                if unchanged(p[j], p2[j]) && x[j] > 0.0 {
                    let keep = (x[j] * p2[j]).min(rem) / p2[j];
                    y[j] = keep;
                    rem -= keep * p2[j];
                }
            }
            if rem > 0.0 {
                // Remainder to the preferred MBB good: a held unchanged-price
                // good first, else the lowest index.
                let filler = mbb
                    .iter()
                    .copied()
                    .find(|&j| unchanged(p[j], p2[j]) && x[j] > 0.0)
                    .or_else(|| mbb.first().copied());
                if let Some(j) = filler {
                    y[j] += rem / p2[j];
                }
            }
            y
        }
        DemandSpec::Ces { .. } | DemandSpec::CobbDouglas { .. } | DemandSpec::Conic { .. } => {
            demand(spec, p2, b2).bundle
        }
        DemandSpec::Basplc { segments, cap } => {
            let held = bundle_to_segments(segments, x);
            gale_demand_basplc(segments, *cap, p2, b2, Some(&held)).bundle
        }
    }
}

fn unchanged(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(1.0)
}

/// Spread a per-good bundle over segments in rate order (the only fill order
/// consistent with concavity).
pub fn bundle_to_segments(segments: &[Vec<Segment>], x: &Bundle) -> Vec<Vec<f64>> {
    segments
        .iter()
        .enumerate()
        .map(|(j, segs)| {
            let mut left = x[j];
            segs.iter()
                .map(|s| {
                    let take = left.min(s.len);
                    left -= take;
                    take
                })
                .collect()
        })
        .collect()
}

/// Raw SPLC utility of a segment allocation (no cap applied).
pub fn segment_utility(segments: &[Vec<Segment>], alloc: &[Vec<f64>]) -> f64 {
    segments
        .iter()
        .zip(alloc)
        .map(|(segs, a)| segs.iter().zip(a).map(|(s, x)| s.rate * x).sum::<f64>())
        .sum()
}

/// Capped BASPLC utility of a per-good bundle.
pub fn basplc_utility(segments: &[Vec<Segment>], cap: f64, x: &Bundle) -> f64 {
    let alloc = bundle_to_segments(segments, x);
    segment_utility(segments, &alloc).min(cap)
}

/// Gale demand for a BASPLC utility: maximizes `b log u(x) - p.x` subject to
/// segment lengths and `u(x) <= cap`. Solved greedily on the bang-per-buck
/// order; `prefer` biases ties toward a held segment allocation.
pub fn gale_demand_basplc(
    segments: &[Vec<Segment>],
    cap: f64,
    p: &[f64],
    b: f64,
    prefer: Option<&[Vec<f64>]>,
) -> DemandAnswer {
    let m = segments.len();
    let mut alloc: Vec<Vec<f64>> = segments.iter().map(|s| vec![0.0; s.len()]).collect();
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (j, segs) in segments.iter().enumerate() {
        for (t, s) in segs.iter().enumerate() {
            if s.rate > 0.0 {
                order.push((j, t));
            }
        }
    }
    if b <= 0.0 || order.is_empty() {
        return DemandAnswer {
            bundle: Bundle::zeros(m),
            spend: 0.0,
            beta: None,
            gamma: Some(0.0),
            segment_alloc: Some(alloc),
        };
    }
    order.sort_by(|&(j1, t1), &(j2, t2)| {
        let r1 = segments[j1][t1].rate / p[j1];
        let r2 = segments[j2][t2].rate / p[j2];
        r2.partial_cmp(&r1)
            .unwrap()
            .then_with(|| {
                let h1 = prefer.is_some_and(|h| h[j1][t1] > 0.0);
                let h2 = prefer.is_some_and(|h| h[j2][t2] > 0.0);
                h2.cmp(&h1)
            })
            .then((j1, t1).cmp(&(j2, t2)))
    });

    let mut u = 0.0;
    let mut marginal: Option<(usize, usize)> = None;
    for &(j, t) in &order {
        let seg = segments[j][t];
        let rho = seg.rate / p[j];
        let target = (b * rho).min(cap);
        if target <= u {
            break;
        }
        let buy = seg.len.min((target - u) / seg.rate);
        alloc[j][t] = buy;
        u += seg.rate * buy;
        marginal = Some((j, t));
        if buy < seg.len {
            break;
        }
    }

    let cap_binds = cap.is_finite() && u >= cap * (1.0 - 1e-12);
    let gamma = if cap_binds {
        let (j, t) = marginal.expect("cap cannot bind with empty purchase");
        (b / cap - p[j] / segments[j][t].rate).max(0.0)
    } else {
        0.0
    };
    let beta = if u > 0.0 {
        Some(1.0 / (b / u - gamma))
    } else {
        None
    };

    let bundle = Bundle(alloc.iter().map(|a| a.iter().sum()).collect());
    let spend = bundle.dot(p);
    debug_assert!(spend <= b * (1.0 + 1e-9) + 1e-12);
    DemandAnswer {
        bundle,
        spend,
        beta,
        gamma: Some(gamma),
        segment_alloc: Some(alloc),
    }
}

/// Maximum KKT residual of a BASPLC Gale demand answer; near zero for an
/// optimal (x, beta, gamma) certificate.
pub fn basplc_kkt_residual(
    segments: &[Vec<Segment>],
    cap: f64,
    p: &[f64],
    b: f64,
    ans: &DemandAnswer,
) -> f64 {
    let alloc = ans
        .segment_alloc
        .clone()
        .unwrap_or_else(|| bundle_to_segments(segments, &ans.bundle));
    let u = segment_utility(segments, &alloc);
    if u <= 0.0 {
        // Zero bundle is optimal only when nothing has positive rate.
        return if segments.iter().flatten().all(|s| s.rate == 0.0) {
            0.0
        } else {
            f64::INFINITY
        };
    }
    let gamma = ans.gamma.unwrap_or(0.0);
    let mut res = 0.0f64;
    for (j, segs) in segments.iter().enumerate() {
        for (t, s) in segs.iter().enumerate() {
            if s.rate == 0.0 {
                continue;
            }
            let lhs = b * s.rate / u;
            let rhs0 = p[j] + s.rate * gamma;
            let x = alloc[j][t];
            if x <= 1e-12 {
                res = res.max(lhs - rhs0); // (i) with r_jt = 0
            } else if x < s.len * (1.0 - 1e-12) {
                res = res.max((lhs - rhs0).abs()); // (ii), interior so r_jt = 0
            } else {
                res = res.max(rhs0 - lhs); // (ii)-(iii): r_jt = lhs - rhs0 >= 0
            }
        }
    }
    if gamma > 1e-12 {
        res = res.max((u - cap).abs()); // (iv)
    }
    if cap.is_finite() {
        res = res.max(u - cap);
    }
    res.max(0.0)
}

/// Finite elasticity bound `f` (demand shrinks at most by `(1+mu)^f` when a
/// price scales by `(1+mu)`), when one exists.
pub fn elasticity_bound(spec: &DemandSpec) -> Option<f64> {
    match spec {
        DemandSpec::Ces { sigma, .. } => Some(*sigma),
        DemandSpec::CobbDouglas { .. } => Some(1.0),
        DemandSpec::Conic { parts } => {
            let mut f = 0.0f64;
            for part in parts {
                f = f.max(elasticity_bound(&part.demand)?);
            }
            Some(f)
        }
        DemandSpec::Linear { .. } | DemandSpec::Basplc { .. } => None,
    }
}
