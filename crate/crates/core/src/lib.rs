//! Ascending-price auction algorithms for approximate market equilibria under
//! weak gross substitutes (WGS) demand systems.
//!
//! The crate provides:
//! - exchange-market auctions producing 4-eps approximate equilibria
//!   ([`auction_exchange`]);
//! - spending-restricted Fisher equilibria for Gale demand systems
//!   ([`auction_sr`]);
//! - a constant-factor approximation for Nash social welfare with
//!   budget-additive separable piecewise-linear concave utilities ([`nsw`]);
//! - independent certification and brute-force oracles ([`verify`]).

pub mod auction_exchange;
pub mod auction_sr;
pub mod demand;
pub mod fnp;
pub mod market_model;
pub mod nsw;
pub mod verify;

pub use auction_exchange::{run_exchange_auction, ExchangeConfig, ExchangeOutcome, StepTrace};
pub use auction_sr::{run_sr_auction, SRConfig, SRInitMode, SROutcome};
pub use demand::{demand, demand_monotone, DemandAnswer, DemandSpec};
pub use fnp::{find_new_prices, FnpChoice, FnpResult};
pub use nsw::{
    brute_force_nsw, nsw_upper_bound, nsw_upper_bound_original, nsw_value, relax_to_fisher,
    round_allocation, solve_nsw, solve_sr_with_dummy, IntegralAllocation, NSWOutcome,
    NormalizedEquilibrium,
};
pub use verify::{
    brute_force_fisher_eq, check_approx_equilibrium, check_approx_sr, dominating_demand,
    property_suite, Certificate, Family, PropertyReport,
};
pub use market_model::{
    validate_instance, Bundle, EquilibriumReport, ExchangeAgent, ExchangeInstance,
    IndividualPrices, Instance, ModelError, NSWAgent, NSWInstance, PriceVector, RunStats,
    SRAgent, SREquilibriumReport, SRInstance, SRStatus, Segment,
};
