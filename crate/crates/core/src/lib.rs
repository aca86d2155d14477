//! Revenue-optimal auction for edge content caching: allocation, payments,
//! delivery quality, and Monte-Carlo checks of the mechanism's guarantees.

pub mod cli;
pub mod distributions;
pub mod error;
pub mod experiments;
pub mod mechanism;
pub mod model;
pub mod quality;
pub mod simulation;

pub use distributions::{ContinuousLaw, DistributionSpec, Support, TypeDistribution, TypeProfile};
pub use error::{AuctionError, Result};
pub use mechanism::{
    allocate, payment_closed_form, payment_oracle, run_mechanism, Allocation, Branch,
    MechanismOutcome, PaymentCertificate,
};
pub use model::{build_instance, AuctionInstance, CostFunction, InstanceConfig, InterestStructure};
pub use simulation::{simulate, EstimateWithError, SimulationReport};
