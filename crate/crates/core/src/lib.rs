pub mod data;
pub mod graph;
pub mod morph;
pub mod ndt;
pub mod sched;
pub mod search;
