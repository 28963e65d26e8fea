//! FindNewPrices implementations: the agent-local subroutine that raises an
//! agent's individual prices and returns a demand bundle still dominating the
//! agent's holdings.
//!
//! Contracts, with c the holdings, b the budget, p the market prices and
//! q = (1+eps)p the caps:
//!   (A)  y >= c and y is an optimal bundle at the returned prices;
//!   (B)  p_i <= p~ <= q, and the cap flag is set whenever y_j > (1+eps)c_j.
//! The linear, Cobb-Douglas, Gale-convex and BASPLC variants satisfy the
//! stronger (A')/(B'): cap flag whenever y_j > c_j.

use crate::demand::{
    self, bundle_to_segments, demand, demand_monotone, mbb_goods, segment_utility, DemandAnswer,
    DemandSpec,
};
use crate::market_model::{
    Bundle, IndividualPrices, ModelError, PriceVector, Segment, MONEY_TOL,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FnpChoice {
    Auto,
    Elasticity,
    Linear,
    CobbDouglas,
    Gale,
    Basplc,
}

impl std::str::FromStr for FnpChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(FnpChoice::Auto),
            "elasticity" => Ok(FnpChoice::Elasticity),
            "linear" => Ok(FnpChoice::Linear),
            "cobb-douglas" | "cobb_douglas" => Ok(FnpChoice::CobbDouglas),
            "gale" => Ok(FnpChoice::Gale),
            "basplc" => Ok(FnpChoice::Basplc),
            _ => Err(format!("unknown FindNewPrices variant: {s}")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FnpResult {
    pub prices: IndividualPrices,
    pub bundle: Bundle,
    /// Counted price-augmentation steps (variant-specific accounting).
    pub price_steps: u64,
    /// Whether this variant guarantees the strong (A')/(B') form.
    pub strong: bool,
    /// Refreshed demand certificate at the new prices (BASPLC only).
    pub new_cert: Option<DemandAnswer>,
}

/// Dispatch on demand family. `cert` is the cached demand answer at `p_i`
/// (required for BASPLC).
pub fn find_new_prices(
    spec: &DemandSpec,
    choice: FnpChoice,
    p_i: &IndividualPrices,
    p: &PriceVector,
    c: &Bundle,
    b: f64,
    cert: Option<&DemandAnswer>,
) -> Result<FnpResult, ModelError> {
    let caps: Vec<f64> = (0..p.len()).map(|j| p.cap_value(j)).collect();
    let result = match (choice, spec) {
        (FnpChoice::Linear | FnpChoice::Auto, DemandSpec::Linear { v }) => {
            fnp_linear(v, p_i, &caps, c, b)
        }
        (FnpChoice::CobbDouglas | FnpChoice::Auto, DemandSpec::CobbDouglas { alpha }) => {
            Ok(fnp_cobb_douglas(alpha, p_i, &caps, c, b))
        }
        (FnpChoice::Basplc | FnpChoice::Auto, DemandSpec::Basplc { segments, cap }) => {
            let cert = cert
                .ok_or_else(|| ModelError::Fnp("BASPLC variant needs a demand certificate".into()))?;
            fnp_basplc(segments, *cap, p_i.values(), &caps, c, b, cert)
        }
        (FnpChoice::Elasticity | FnpChoice::Auto, _) => {
            let f = demand::elasticity_bound(spec).ok_or_else(|| {
                ModelError::Fnp("demand family has no finite elasticity bound".into())
            })?;
            Ok(fnp_elasticity(spec, f, p_i, p, c, b))
        }
        (FnpChoice::Gale, DemandSpec::Ces { .. } | DemandSpec::CobbDouglas { .. }) => {
            fnp_gale_convex(spec, p_i.values(), &caps, c, b, GaleSolverConfig::default())
        }
        (FnpChoice::Gale, _) => Err(ModelError::Fnp(
            "the convex-program variant requires a CES or Cobb-Douglas utility".into(),
        )),
        (FnpChoice::Basplc, _) | (FnpChoice::Linear, _) | (FnpChoice::CobbDouglas, _) => Err(
            ModelError::Fnp("selected variant does not match the demand family".into()),
        ),
    }?;
    debug_assert_eq!(
        verify_fnp_conditions(&result, p_i, p, c, b),
        Ok(()),
        "FindNewPrices postcondition violated"
    );
    Ok(result)
}

/// Checks (A)/(B) and, when claimed, (A')/(B') on a result. Zero tolerance on
/// flag logic, 1e-9 on quantities.
pub fn verify_fnp_conditions(
    r: &FnpResult,
    p_i: &IndividualPrices,
    p: &PriceVector,
    c: &Bundle,
    _b: f64,
) -> Result<(), String> {
    let eps = p.eps();
    for j in 0..p.len() {
        let cap = p.cap_value(j);
        let v = r.prices.value(j);
        if v < p_i.value(j) - MONEY_TOL || v > cap + MONEY_TOL {
            return Err(format!("price of good {j} outside [p_i, (1+eps)p]"));
        }
        if r.prices.is_at_cap(j) && (v - cap).abs() > 0.0 {
            return Err(format!("cap flag of good {j} without exact cap value"));
        }
        if r.bundle[j] < c[j] - MONEY_TOL {
            return Err(format!("bundle dropped below holdings on good {j}"));
        }
        if r.bundle[j] > (1.0 + eps) * c[j] + MONEY_TOL && !r.prices.is_at_cap(j) {
            return Err(format!("good {j} overdemanded without cap flag"));
        }
        if r.strong && r.bundle[j] > c[j] + MONEY_TOL && !r.prices.is_at_cap(j) {
            return Err(format!("good {j} violates the strong cap condition"));
        }
        if p_i.is_at_cap(j) && !r.prices.is_at_cap(j) {
            return Err(format!("cap flag of good {j} was dropped"));
        }
    }
    Ok(())
}

/// Generic variant for demand systems with elasticity bound `f`: bump each
/// violating price by (1+eps)^{1/ceil(f)} until it reaches the cap,
/// re-querying the monotone demand oracle after each bump. Rounding the
/// exponent up keeps every good within ceil(f) bumps, so the total is at
/// most m*ceil(f) = ceil(m*f') for the integral bound f' actually used.
pub fn fnp_elasticity(
    spec: &DemandSpec,
    f: f64,
    p_i: &IndividualPrices,
    p: &PriceVector,
    c: &Bundle,
    b: f64,
) -> FnpResult {
    let eps = p.eps();
    let f = f.ceil().max(1.0);
    let factor = (1.0 + eps).powf(1.0 / f);
    let mut pt = p_i.clone();
    let mut y = demand(spec, pt.values(), b).bundle;
    let mut bumps = 0u64;
    loop {
        let Some(j) = (0..p.len())
            .find(|&j| !pt.is_at_cap(j) && y[j] > (1.0 + eps) * c[j] + 1e-12)
        else {
            break;
        };
        let cap = p.cap_value(j);
        let old = pt.values().to_vec();
        let candidate = pt.value(j) * factor;
        if candidate >= cap * (1.0 - 1e-12) {
            pt.set_at_cap(j, cap);
        } else {
            pt.set_interior(j, candidate, cap);
        }
        bumps += 1;
        y = demand_monotone(spec, &old, b, pt.values(), b, &y);
    }
    FnpResult {
        prices: pt,
        bundle: y,
        price_steps: bumps,
        strong: false,
        new_cert: None,
    }
}

/// O(m) variant for linear demands: raise the whole MBB set at a common rate
/// until the budget exhausts at current holdings or a price reaches its cap.
pub fn fnp_linear(
    v: &[f64],
    p_i: &IndividualPrices,
    caps: &[f64],
    c: &Bundle,
    b: f64,
) -> Result<FnpResult, ModelError> {
    if v.iter().all(|&x| x == 0.0) {
        return Err(ModelError::Fnp("linear demand with all-zero values".into()));
    }
    let m = v.len();
    let mut pt: Vec<f64> = p_i.values().to_vec();
    let mut flags: Vec<bool> = (0..m).map(|j| p_i.is_at_cap(j)).collect();
    let finish = |pt: Vec<f64>, flags: Vec<bool>, y: Bundle, steps: u64| {
        let mut prices = IndividualPrices::new(pt);
        for (j, &fl) in flags.iter().enumerate() {
            if fl {
                prices.set_at_cap(j, caps[j]);
            }
        }
        Ok(FnpResult {
            prices,
            bundle: y,
            price_steps: steps,
            strong: true,
            new_cert: None,
        })
    };
    if b <= MONEY_TOL {
        return finish(pt, flags, Bundle::zeros(m), 0);
    }
    let mut in_s: Vec<bool> = {
        let mbb = mbb_goods(v, &pt);
        let mut s = vec![false; m];
        for j in mbb {
            s[j] = true;
        }
        s
    };
    debug_assert!(
        (0..m).all(|j| in_s[j] || c[j] <= MONEY_TOL),
        "holdings on a non-MBB good"
    );
    let cap_event = |pt: &mut Vec<f64>, flags: &mut Vec<bool>, k: usize| -> Bundle {
        pt[k] = caps[k];
        flags[k] = true;
        let mut y = c.clone();
        let spent_rest: f64 = (0..m).filter(|&j| j != k).map(|j| pt[j] * c[j]).sum();
        y[k] = ((b - spent_rest) / pt[k]).max(c[k]);
        y
    };
    let mut steps = 0u64;
    loop {
        // A member already at its cap forces an immediate cap event.
        if let Some(k) = (0..m).find(|&j| in_s[j] && flags[j]) {
            let y = cap_event(&mut pt, &mut flags, k);
            return finish(pt, flags, y, steps);
        }
        let spend: f64 = (0..m).filter(|&j| in_s[j]).map(|j| pt[j] * c[j]).sum();
        let a_budget = if spend > MONEY_TOL { b / spend } else { f64::INFINITY };
        let (a_cap, k_cap) = (0..m)
            .filter(|&j| in_s[j])
            .map(|j| (caps[j] / pt[j], j))
            .fold((f64::INFINITY, usize::MAX), |acc, x| {
                if x.0 < acc.0 * (1.0 - 1e-12) {
                    x
                } else {
                    acc
                }
            });
        let s0 = (0..m).find(|&j| in_s[j]).expect("MBB set cannot be empty");
        let ratio_s = v[s0] / pt[s0];
        let (a_ent, k_ent) = (0..m)
            .filter(|&j| !in_s[j] && v[j] > 0.0)
            .map(|j| (ratio_s / (v[j] / pt[j]), j))
            .fold((f64::INFINITY, usize::MAX), |acc, x| {
                if x.0 < acc.0 * (1.0 - 1e-12) {
                    x
                } else {
                    acc
                }
            });
        let alpha = a_budget.min(a_cap).min(a_ent).max(1.0);
        if !alpha.is_finite() {
            // No holdings, no caps reachable, no entrants: degenerate; spend
            // on the lowest-index MBB good at its cap.
            let y = cap_event(&mut pt, &mut flags, s0);
            return finish(pt, flags, y, steps);
        }
        let scale = |pt: &mut Vec<f64>, a: f64| {
            for j in 0..m {
                if in_s[j] {
                    pt[j] *= a;
                }
            }
        };
        if a_cap <= alpha * (1.0 + 1e-12) {
            scale(&mut pt, a_cap);
            steps += 1;
            let y = cap_event(&mut pt, &mut flags, k_cap);
            return finish(pt, flags, y, steps);
        }
        if a_budget <= alpha * (1.0 + 1e-12) {
            scale(&mut pt, a_budget);
            steps += 1;
            return finish(pt, flags, c.clone(), steps);
        }
        scale(&mut pt, a_ent);
        steps += 1;
        in_s[k_ent] = true;
    }
}

/// O(m) variant for Cobb-Douglas demands: each price is set independently to
/// min{b a_j / c_j, cap}.
pub fn fnp_cobb_douglas(
    alpha: &[f64],
    p_i: &IndividualPrices,
    caps: &[f64],
    c: &Bundle,
    b: f64,
) -> FnpResult {
    let m = alpha.len();
    let mut prices = IndividualPrices::new(p_i.values().to_vec());
    let mut y = Bundle::zeros(m);
    for j in 0..m {
        if alpha[j] == 0.0 || b <= MONEY_TOL {
            if p_i.is_at_cap(j) {
                prices.set_at_cap(j, caps[j]);
            }
            continue;
        }
        let want = b * alpha[j];
        if c[j] <= 1e-15 || want / c[j] >= caps[j] * (1.0 - 1e-12) {
            prices.set_at_cap(j, caps[j]);
            y[j] = (want / caps[j]).max(c[j]);
        } else {
            prices.set_interior(j, (want / c[j]).max(p_i.value(j)), caps[j]);
            y[j] = c[j];
        }
    }
    FnpResult {
        prices,
        bundle: y,
        price_steps: 0,
        strong: true,
        new_cert: None,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GaleSolverConfig {
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for GaleSolverConfig {
    fn default() -> Self {
        GaleSolverConfig {
            max_iters: 200_000,
            tolerance: 1e-6,
        }
    }
}

/// Convex-programming variant for strictly concave homogeneous utilities
/// (CES / Cobb-Douglas): solve the two-price program
///   max b ln u(y' + y'') - p.y' - q.y'',  y' <= c,  y', y'' >= 0
/// by projected gradient ascent with backtracking, and read the new prices
/// off the KKT multipliers.
pub fn fnp_gale_convex(
    spec: &DemandSpec,
    p: &[f64],
    q: &[f64],
    c: &Bundle,
    b: f64,
    config: GaleSolverConfig,
) -> Result<FnpResult, ModelError> {
    let m = p.len();
    let weights: Vec<f64> = match spec {
        DemandSpec::Ces { beta, .. } => beta.clone(),
        DemandSpec::CobbDouglas { alpha } => alpha.clone(),
        _ => unreachable!("caller restricts to CES/Cobb-Douglas"),
    };
    if b <= MONEY_TOL {
        return Ok(FnpResult {
            prices: IndividualPrices::new(p.to_vec()),
            bundle: Bundle::zeros(m),
            price_steps: 0,
            strong: true,
            new_cert: None,
        });
    }
    // CES weights enter the utility as beta^(1/sigma), matching the demand
    // oracle's bundle beta_j p_j^(-sigma) b / sum_k beta_k p_k^(1-sigma).
    let grad_over_u = |z: &[f64]| -> Vec<f64> {
        match spec {
            DemandSpec::Ces { beta, sigma } => {
                let rho = 1.0 - 1.0 / sigma;
                let w: Vec<f64> = beta.iter().map(|bj| bj.powf(1.0 / sigma)).collect();
                let s: f64 = w
                    .iter()
                    .zip(z)
                    .map(|(wj, zj)| wj * zj.powf(rho))
                    .sum();
                // grad_j u / u = w_j z_j^{rho-1} / sum
                w.iter()
                    .zip(z)
                    .map(|(wj, zj)| if *wj > 0.0 { wj * zj.powf(rho - 1.0) / s } else { 0.0 })
                    .collect()
            }
            DemandSpec::CobbDouglas { alpha } => alpha
                .iter()
                .zip(z)
                .map(|(aj, zj)| if *aj > 0.0 { aj / zj } else { 0.0 })
                .collect(),
            _ => unreachable!(),
        }
    };
    let ln_u = |z: &[f64]| -> f64 {
        match spec {
            DemandSpec::Ces { beta, sigma } => {
                let rho = 1.0 - 1.0 / sigma;
                (beta
                    .iter()
                    .zip(z)
                    .map(|(bj, zj)| bj.powf(1.0 / sigma) * zj.powf(rho))
                    .sum::<f64>())
                .ln()
                    / rho
            }
            DemandSpec::CobbDouglas { alpha } => alpha
                .iter()
                .zip(z)
                .map(|(aj, zj)| if *aj > 0.0 { aj * zj.ln() } else { 0.0 })
                .sum(),
            _ => unreachable!(),
        }
    };
    let objective = |y1: &[f64], y2: &[f64]| -> f64 {
        let z: Vec<f64> = y1.iter().zip(y2).map(|(a, b)| a + b).collect();
        b * ln_u(&z)
            - y1.iter().zip(p).map(|(y, p)| y * p).sum::<f64>()
            - y2.iter().zip(q).map(|(y, q)| y * q).sum::<f64>()
    };

    // Initialize at the analytic KKT candidate: per good, the price r_j that
    // makes the demand hit exactly c_j, clamped into [p_j, q_j]. For CES the
    // prices couple through S = sum beta r^(1-sigma); the map S -> S is
    // monotone on [S(q), S(p)], so iterating from the lower end converges.
    // The ascent loop below then starts at (or refines toward) zero residual.
    let smart: Vec<f64> = match spec {
        DemandSpec::CobbDouglas { alpha } => (0..m)
            .map(|j| {
                if alpha[j] <= 0.0 {
                    0.0
                } else {
                    let r = if c[j] > 0.0 {
                        (alpha[j] * b / c[j]).clamp(p[j], q[j])
                    } else {
                        q[j]
                    };
                    alpha[j] * b / r
                }
            })
            .collect(),
        DemandSpec::Ces { beta, sigma } => {
            let price_for = |j: usize, s: f64| -> f64 {
                if c[j] > 0.0 {
                    (beta[j] * b / (c[j] * s)).powf(1.0 / sigma).clamp(p[j], q[j])
                } else {
                    q[j]
                }
            };
            let mut s: f64 = (0..m)
                .filter(|&j| beta[j] > 0.0)
                .map(|j| beta[j] * q[j].powf(1.0 - sigma))
                .sum();
            for _ in 0..500 {
                let s_new: f64 = (0..m)
                    .filter(|&j| beta[j] > 0.0)
                    .map(|j| beta[j] * price_for(j, s).powf(1.0 - sigma))
                    .sum();
                if (s_new - s).abs() <= 1e-15 * s.abs() {
                    s = s_new;
                    break;
                }
                s = s_new;
            }
            (0..m)
                .map(|j| {
                    if beta[j] <= 0.0 {
                        0.0
                    } else {
                        beta[j] * price_for(j, s).powf(-sigma) * b / s
                    }
                })
                .collect()
        }
        _ => unreachable!(),
    };
    let mut y1: Vec<f64> = (0..m).map(|j| smart[j].min(c[j])).collect();
    let mut y2: Vec<f64> = (0..m).map(|j| (smart[j] - c[j]).max(0.0)).collect();
    let scale = p.iter().fold(1.0f64, |a, &x| a.max(x));
    let kkt_residual = |y1: &[f64], y2: &[f64], mu: &[f64]| -> f64 {
        let mut res = 0.0f64;
        for j in 0..m {
            if weights[j] == 0.0 {
                continue;
            }
            let yj = y1[j] + y2[j];
            let r = if y2[j] > 1e-10 {
                (mu[j] - q[j]).abs()
            } else if (yj - c[j]).abs() <= 1e-10 && c[j] > 0.0 {
                (mu[j] - q[j]).max(p[j] - mu[j]).max(0.0)
            } else if yj > 1e-10 {
                (mu[j] - p[j]).abs()
            } else {
                (mu[j] - p[j]).max(0.0)
            };
            res = res.max(r);
        }
        res
    };

    // Buying at q while the low-price clamp has room is never optimal; the
    // shift keeps the total fixed and lowers cost by (q - p) per unit.
    let rebalance = |y1: &mut [f64], y2: &mut [f64]| {
        for j in 0..m {
            let shift = (c[j] - y1[j]).max(0.0).min(y2[j]);
            if shift > 0.0 {
                y1[j] += shift;
                y2[j] -= shift;
            }
        }
    };

    let mut step = 0.1;
    let mut converged = false;
    let mut mu = vec![0.0; m];
    for _ in 0..config.max_iters {
        rebalance(&mut y1, &mut y2);
        let z: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a + b).collect();
        let g = grad_over_u(&z);
        mu = g.iter().map(|gj| b * gj).collect();
        if kkt_residual(&y1, &y2, &mu) <= config.tolerance * scale.max(1.0) {
            converged = true;
            break;
        }
        let f0 = objective(&y1, &y2);
        let mut t = step;
        let mut accepted = false;
        for _ in 0..60 {
            let n1: Vec<f64> = (0..m)
                .map(|j| (y1[j] + t * (mu[j] - p[j])).clamp(0.0, c[j]))
                .collect();
            let n2: Vec<f64> = (0..m)
                .map(|j| {
                    if weights[j] > 0.0 {
                        (y2[j] + t * (mu[j] - q[j])).max(0.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            // Keep the total strictly positive on goods with weight.
            let ok = (0..m).all(|j| weights[j] == 0.0 || n1[j] + n2[j] > 0.0);
            if ok && objective(&n1, &n2) > f0 {
                y1 = n1;
                y2 = n2;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if accepted {
            step = (t * 2.0).min(1.0);
        } else {
            step *= 0.5;
            if step < 1e-18 {
                break;
            }
        }
    }
    rebalance(&mut y1, &mut y2);
    let z: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a + b).collect();
    if !converged {
        let g = grad_over_u(&z);
        mu = g.iter().map(|gj| b * gj).collect();
        let res = kkt_residual(&y1, &y2, &mu);
        if res > config.tolerance * scale.max(1.0) {
            return Err(ModelError::Fnp(format!(
                "two-price program did not converge (residual {res:.3e})"
            )));
        }
    }
    let mut prices = IndividualPrices::new(p.to_vec());
    let mut y = Bundle(z);
    for j in 0..m {
        // Numerical slack below holdings is a solver artifact; snap up.
        if y[j] < c[j] {
            debug_assert!(y[j] > c[j] - 1e-6 * c[j].max(1.0));
            y[j] = c[j];
        }
        let clamped = mu[j].clamp(p[j], q[j]);
        if y[j] > c[j] + 1e-9 || clamped >= q[j] * (1.0 - 1e-12) {
            prices.set_at_cap(j, q[j]);
        } else if clamped > p[j] {
            prices.set_interior(j, clamped, q[j]);
        }
    }
    Ok(FnpResult {
        prices,
        bundle: y,
        price_steps: 0,
        strong: true,
        new_cert: None,
    })
}

/// Combinatorial O(K) variant for BASPLC Gale demands. Stage I restores the
/// complementarity conditions at the certificate's bang-per-buck beta; Stage
/// II raises the prices of the marginal-ratio set and lowers beta at a common
/// rate until the utility bound u(y) = min{U, b*beta} binds.
#[allow(clippy::too_many_arguments)]
pub fn fnp_basplc(
    segments: &[Vec<Segment>],
    cap: f64,
    p: &[f64],
    q: &[f64],
    c: &Bundle,
    b: f64,
    cert: &DemandAnswer,
) -> Result<FnpResult, ModelError> {
    let m = segments.len();
    let mut pt: Vec<f64> = p.to_vec();
    // Prices already sitting at the cap keep their flag.
    let mut flags: Vec<bool> = (0..m).map(|j| pt[j] >= q[j] * (1.0 - 1e-12)).collect();
    let mut alloc = bundle_to_segments(segments, c);
    let mut u = segment_utility(segments, &alloc);
    let Some(mut beta) = cert.beta else {
        // Zero-utility certificate: only consistent when no rate is positive.
        return Ok(FnpResult {
            prices: IndividualPrices::new(pt),
            bundle: c.clone(),
            price_steps: 0,
            strong: true,
            new_cert: Some(cert.clone()),
        });
    };
    if !(beta > 0.0) || cert.gamma.is_none() {
        return Err(ModelError::Fnp("inconsistent demand certificate".into()));
    }

    // First not-fully-sold segment of each good.
    let active = |alloc: &[Vec<f64>], j: usize| -> Option<usize> {
        segments[j]
            .iter()
            .enumerate()
            .position(|(t, s)| s.rate > 0.0 && alloc[j][t] < s.len * (1.0 - 1e-12))
    };
    let bound = |beta: f64| (b * beta).min(cap);
    let done = |u: f64, beta: f64| u >= bound(beta) * (1.0 - 1e-9);

    let finish = |pt: Vec<f64>,
                  flags: Vec<bool>,
                  alloc: Vec<Vec<f64>>,
                  u: f64,
                  beta: f64,
                  steps: u64| {
        let mut prices = IndividualPrices::new(pt);
        for (j, fl) in flags.iter().enumerate() {
            if *fl {
                prices.set_at_cap(j, q[j]);
            }
        }
        let bundle = Bundle(alloc.iter().map(|a| a.iter().sum()).collect());
        let spend = prices.dot(&bundle.0);
        let gamma = if cap.is_finite() && u >= cap * (1.0 - 1e-9) {
            (b / cap - 1.0 / beta).max(0.0)
        } else {
            0.0
        };
        Ok(FnpResult {
            prices,
            bundle,
            price_steps: steps,
            strong: true,
            new_cert: Some(DemandAnswer {
                bundle: Bundle(alloc.iter().map(|a| a.iter().sum()).collect()),
                spend,
                beta: Some(beta),
                gamma: Some(gamma),
                segment_alloc: Some(alloc),
            }),
        })
    };

    if done(u, beta) {
        return finish(pt, flags, alloc, u, beta, 0);
    }

    // Stage I: goods whose active-segment ratio exceeds beta get their price
    // raised to the ratio (or to the cap, saturating segments while the ratio
    // at the cap still exceeds beta).
    for j in 0..m {
        while let Some(t) = active(&alloc, j) {
            let rate = segments[j][t].rate;
            if rate / pt[j] <= beta * (1.0 + 1e-12) {
                break;
            }
            let target = rate / beta;
            if target >= q[j] * (1.0 - 1e-12) {
                pt[j] = q[j];
                flags[j] = true;
                u += rate * (segments[j][t].len - alloc[j][t]);
                alloc[j][t] = segments[j][t].len;
            } else {
                pt[j] = target;
                break;
            }
        }
    }
    debug_assert!(u <= bound(beta) * (1.0 + 1e-9), "Stage I overshot the bound");

    // Stage II.
    let total_segments: u64 = segments.iter().map(|s| s.len() as u64).sum();
    let mut steps = 0u64;
    let mut in_cap_run = false;
    let max_loops = 64 * (total_segments as usize + m + 4);
    for _ in 0..max_loops {
        if done(u, beta) {
            return finish(pt, flags, alloc, u, beta, steps);
        }
        let in_a = |j: usize, alloc: &[Vec<f64>], pt: &[f64], beta: f64| -> bool {
            active(alloc, j)
                .map(|t| (segments[j][t].rate / pt[j] - beta).abs() <= beta * 1e-9)
                .unwrap_or(false)
        };
        // A good in the marginal set at its price cap absorbs utility by
        // buying on its active segment.
        if let Some(j) = (0..m).find(|&j| flags[j] && in_a(j, &alloc, &pt, beta)) {
            if in_cap_run {
                steps += 1;
                in_cap_run = false;
            }
            let t = active(&alloc, j).unwrap();
            let rate = segments[j][t].rate;
            let room = segments[j][t].len - alloc[j][t];
            let avail = bound(beta) - u;
            if rate * room <= avail {
                alloc[j][t] = segments[j][t].len;
                u += rate * room;
            } else {
                alloc[j][t] += avail / rate;
                u = bound(beta);
            }
            continue;
        }
        // Multiplicative raise of the marginal set; beta falls at the same
        // rate. Stop at the earliest of: a cap is reached, the utility bound
        // binds, or a new good becomes marginal.
        let members: Vec<usize> = (0..m)
            .filter(|&j| in_a(j, &alloc, &pt, beta))
            .collect();
        let a_cap = members
            .iter()
            .map(|&j| q[j] / pt[j])
            .fold(f64::INFINITY, f64::min);
        let a_bound = if u > 0.0 { b * beta / u } else { f64::INFINITY };
        let a_join = (0..m)
            .filter(|&j| !members.contains(&j))
            .filter_map(|j| active(&alloc, j).map(|t| beta * pt[j] / segments[j][t].rate))
            .fold(f64::INFINITY, f64::min);
        let a_cap_util = if cap.is_finite() && u > 0.0 && b * beta > cap {
            // The bound min{U, b beta} stays at U until b beta drops to U.
            b * beta / cap
        } else {
            f64::INFINITY
        };
        let alpha = a_cap.min(a_bound).min(a_join).min(a_cap_util).max(1.0);
        if !alpha.is_finite() {
            return Err(ModelError::Fnp("no progress possible in Stage II".into()));
        }
        for &j in &members {
            let np = pt[j] * alpha;
            if np >= q[j] * (1.0 - 1e-12) {
                pt[j] = q[j];
                flags[j] = true;
            } else {
                pt[j] = np;
            }
        }
        beta /= alpha;
        // A capped good now in the marginal set ends the price step; the
        // counter is advanced by the buy branch at the top of the next turn.
        in_cap_run = true;
    }
    Err(ModelError::Fnp("Stage II did not terminate".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prices(m: usize, eps: f64) -> (PriceVector, IndividualPrices) {
        let p = PriceVector::ones(m, eps);
        let pi = IndividualPrices::new(vec![1.0; m]);
        (p, pi)
    }

    #[test]
    fn linear_single_mbb_caps_out() {
        // v = (2,1): good 2 never becomes MBB before good 1 hits its cap.
        let (p, pi) = prices(2, 0.1);
        let caps: Vec<f64> = (0..2).map(|j| p.cap_value(j)).collect();
        let c = Bundle(vec![0.5, 0.0]);
        let r = fnp_linear(&[2.0, 1.0], &pi, &caps, &c, 1.0).unwrap();
        assert!(r.prices.is_at_cap(0) && !r.prices.is_at_cap(1));
        assert!((r.prices.value(0) - 1.1).abs() < 1e-12);
        assert!((r.bundle[0] - 1.0 / 1.1).abs() < 1e-9, "{:?}", r.bundle);
        assert_eq!(r.bundle[1], 0.0);
        verify_fnp_conditions(&r, &pi, &p, &c, 1.0).unwrap();
    }

    #[test]
    fn linear_zero_budget() {
        let (p, pi) = prices(2, 0.1);
        let caps: Vec<f64> = (0..2).map(|j| p.cap_value(j)).collect();
        let c = Bundle::zeros(2);
        let r = fnp_linear(&[1.0, 1.0], &pi, &caps, &c, 0.0).unwrap();
        assert_eq!(r.bundle.0, vec![0.0, 0.0]);
        assert_eq!(r.prices.values(), pi.values());
        verify_fnp_conditions(&r, &pi, &p, &c, 0.0).unwrap();
    }

    #[test]
    fn linear_tied_pair_caps_before_budget() {
        // Both goods MBB, holdings 0.4 each at price 1, budget 1. At the cap
        // the holdings cost 0.88 < 1, so a cap event fires first and the
        // remaining budget fills the capped good.
        let (p, pi) = prices(2, 0.1);
        let caps: Vec<f64> = (0..2).map(|j| p.cap_value(j)).collect();
        let c = Bundle(vec![0.4, 0.4]);
        let r = fnp_linear(&[1.0, 1.0], &pi, &caps, &c, 1.0).unwrap();
        verify_fnp_conditions(&r, &pi, &p, &c, 1.0).unwrap();
        let spend = r.prices.dot(&r.bundle.0);
        assert!((spend - 1.0).abs() < 1e-9, "budget exhausted, got {spend}");
        assert!(r.prices.is_at_cap(0));
    }

    #[test]
    fn cobb_douglas_both_cap() {
        let (p, pi) = prices(2, 0.1);
        let caps: Vec<f64> = (0..2).map(|j| p.cap_value(j)).collect();
        let c = Bundle(vec![0.8, 0.4]);
        let r = fnp_cobb_douglas(&[0.5, 0.5], &pi, &caps, &c, 2.0);
        assert!(r.prices.is_at_cap(0) && r.prices.is_at_cap(1));
        assert!((r.bundle[0] - 1.0 / 1.1).abs() < 1e-9);
        assert!((r.bundle[1] - 1.0 / 1.1).abs() < 1e-9);
        verify_fnp_conditions(&r, &pi, &p, &c, 2.0).unwrap();
    }

    #[test]
    fn cobb_douglas_equality_case_is_interior() {
        let (p, pi) = prices(1, 0.25);
        let caps = vec![p.cap_value(0)];
        // c exactly b*alpha/((1+eps)p) would put the price at the cap; just
        // above it stays interior with y = c.
        let c = Bundle(vec![0.9]);
        let r = fnp_cobb_douglas(&[1.0], &pi, &caps, &c, 1.0);
        assert!(!r.prices.is_at_cap(0));
        assert_eq!(r.bundle[0], c[0]);
        verify_fnp_conditions(&r, &pi, &p, &c, 1.0).unwrap();
    }

    #[test]
    fn cobb_douglas_zero_weight() {
        let (p, pi) = prices(2, 0.1);
        let caps: Vec<f64> = (0..2).map(|j| p.cap_value(j)).collect();
        let c = Bundle(vec![0.5, 0.0]);
        let r = fnp_cobb_douglas(&[1.0, 0.0], &pi, &caps, &c, 1.0);
        assert_eq!(r.bundle[1], 0.0);
        assert_eq!(r.prices.value(1), 1.0);
        verify_fnp_conditions(&r, &pi, &p, &c, 1.0).unwrap();
    }

    #[test]
    fn elasticity_no_violation_returns_unchanged() {
        let spec = DemandSpec::CobbDouglas {
            alpha: vec![0.5, 0.5],
        };
        let (p, pi) = prices(2, 0.1);
        let b = 2.0;
        let c = demand(&spec, pi.values(), b).bundle;
        let r = fnp_elasticity(&spec, 1.0, &pi, &p, &c, b);
        assert_eq!(r.price_steps, 0);
        assert_eq!(r.prices.values(), pi.values());
        verify_fnp_conditions(&r, &pi, &p, &c, b).unwrap();
    }

    #[test]
    fn elasticity_bump_bound_ces() {
        let spec = DemandSpec::Ces {
            beta: vec![0.5, 0.5],
            sigma: 2.0,
        };
        let (p, pi) = prices(2, 0.2);
        let c = Bundle::zeros(2);
        let r = fnp_elasticity(&spec, 2.0, &pi, &p, &c, 2.0);
        assert!(r.price_steps <= 4, "bumps {} exceed m*f", r.price_steps);
        verify_fnp_conditions(&r, &pi, &p, &c, 2.0).unwrap();
    }

    #[test]
    fn gale_convex_collapses_when_q_equals_p() {
        let spec = DemandSpec::Ces {
            beta: vec![0.5, 0.5],
            sigma: 2.0,
        };
        let p = [1.0, 2.0];
        let b = 3.0;
        let x = demand(&spec, &p, b).bundle;
        let r = fnp_gale_convex(&spec, &p, &p, &x, b, GaleSolverConfig::default()).unwrap();
        for j in 0..2 {
            assert!((r.bundle[j] - x[j]).abs() < 1e-4, "{:?} vs {:?}", r.bundle, x);
        }
    }

    #[test]
    fn gale_convex_zero_holdings_reduces_to_high_price_demand() {
        let spec = DemandSpec::CobbDouglas {
            alpha: vec![0.3, 0.7],
        };
        let p = [1.0, 1.0];
        let q = [1.2, 1.2];
        let c = Bundle::zeros(2);
        let r = fnp_gale_convex(&spec, &p, &q, &c, 1.0, GaleSolverConfig::default()).unwrap();
        let want = demand(&spec, &q, 1.0).bundle;
        for j in 0..2 {
            assert!((r.bundle[j] - want[j]).abs() < 1e-4);
            assert!(r.prices.is_at_cap(j));
        }
    }

    #[test]
    fn basplc_immediate_return_when_bound_binds() {
        let segments = vec![vec![Segment { rate: 1.0, len: 2.0 }]];
        let p = [0.5];
        let b = 1.0;
        let ans = demand::gale_demand_basplc(&segments, f64::INFINITY, &p, b, None);
        let c = ans.bundle.clone();
        let r = fnp_basplc(&segments, f64::INFINITY, &p, &[0.6], &c, b, &ans).unwrap();
        assert_eq!(r.price_steps, 0);
        assert_eq!(r.bundle.0, c.0);
        assert_eq!(r.prices.values(), &p);
    }

    #[test]
    fn basplc_single_segment_cap_hit() {
        // Holdings strictly below demand: the price must rise to the cap and
        // the agent buys more there.
        let segments = vec![vec![Segment { rate: 1.0, len: 4.0 }]];
        let p = [0.5];
        let q = [0.55];
        let b = 1.0;
        let ans = demand::gale_demand_basplc(&segments, f64::INFINITY, &p, b, None);
        let c = Bundle(vec![1.0]); // demand is 2.0
        let r = fnp_basplc(&segments, f64::INFINITY, &p, &q, &c, b, &ans).unwrap();
        assert!(r.prices.is_at_cap(0));
        assert!(r.bundle[0] > 1.0);
        // New bundle is the Gale demand at the new price.
        let check = demand::gale_demand_basplc(&segments, f64::INFINITY, &[0.55], b, None);
        assert!((r.bundle[0] - check.bundle[0]).abs() < 1e-9);
        assert!(r.price_steps <= 1);
    }

    #[test]
    fn basplc_equal_ratio_goods_rise_together() {
        let segments = vec![
            vec![Segment { rate: 1.0, len: 3.0 }],
            vec![Segment { rate: 2.0, len: 3.0 }],
        ];
        let p = [0.25, 0.5];
        let q = [2.5, 5.0];
        let b = 1.0;
        let ans = demand::gale_demand_basplc(&segments, f64::INFINITY, &p, b, None);
        let c = Bundle(vec![0.2, 0.2]);
        let r = fnp_basplc(&segments, f64::INFINITY, &p, &q, &c, b, &ans).unwrap();
        // Both goods share the marginal ratio; their prices keep the 1:2 ratio.
        let ratio = r.prices.value(1) / r.prices.value(0);
        assert!((ratio - 2.0).abs() < 1e-9, "ratio {ratio}");
        let steps_cap: u64 = segments.iter().map(|s| s.len() as u64).sum();
        assert!(r.price_steps <= steps_cap);
    }
}
