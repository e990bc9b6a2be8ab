pub mod federation;
pub mod flowrouting;
pub mod geometry;
pub mod kernel;
pub mod linkmodel;
pub mod localization;
pub mod management;
pub mod metrics;
pub mod rng;
pub mod scenario;
pub mod security;
pub mod sim;
pub mod topology;
pub mod trace;
pub mod verify;
