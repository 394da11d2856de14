pub mod amputation;
pub mod cart;
pub mod chained;
pub mod data;
pub mod dpm;
pub mod error;
pub mod glm;
pub mod pooling;
pub mod rng;
pub mod simulator;
