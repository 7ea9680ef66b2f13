//! Worst-case pricing under the uncertain volatility model.
//!
//! Prices are computed by backward induction: at each time step a set of
//! market states is sampled, the worst-case one-step expectation over the
//! admissible volatilities and correlations is maximized at each state, and
//! a Gaussian process regression extends those values to a continuation
//! function for the previous step.

pub mod bench;
pub mod correlation;
pub mod engine;
pub mod gpr;
pub mod lowdisc;
pub mod sqp;
pub mod treestep;

pub use engine::{price, AlgoParams, EngineError, ModelSpec, PayoffSpec, PriceReport};
pub use sqp::UvmPoint;
