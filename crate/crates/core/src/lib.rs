//! WAGMA-SGD: wait-avoiding group model averaging over a deterministic
//! discrete-event network simulator.

pub mod collective;
pub mod harness;
pub mod netsim;
pub mod optim;
pub mod problems;
pub mod topology;
mod util;

pub use netsim::{SimTime, Simulator};
pub use topology::{GroupPartition, GroupingParams, MaskRule, Rank};
pub use util::mix_seed;
