pub mod diffcore;
pub mod models;
pub mod reweight;
pub mod otoracle;
pub mod metrics;
pub mod data;
pub mod adversarial;
