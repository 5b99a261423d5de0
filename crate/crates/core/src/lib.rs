pub mod aggregation;
pub mod config;
pub mod crypto;
pub mod learner;
pub mod ledger;
pub mod protocol;
pub mod rng;
pub mod store;
