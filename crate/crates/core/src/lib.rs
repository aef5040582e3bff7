//! Discrete-event simulator for lockstepped tile groups on a reconfigurable
//! fabric, with staged recovery and criticality-driven degradation.

pub mod engine;
pub mod error;
pub mod fabric;
pub mod ids;
pub mod lockstep;
pub mod tile;
pub mod workload;
pub mod criticality;
pub mod faults;
pub mod supervisor;
pub mod scenario;
pub mod trace;
pub mod metrics;
pub mod system;
pub mod sweep;
