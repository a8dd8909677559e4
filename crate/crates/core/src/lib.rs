pub mod budget;
pub mod error;
pub mod optim;
pub mod trace;
pub mod utility;
pub mod kkt;
pub mod instances;
pub mod netsim;
pub mod anomaly;
