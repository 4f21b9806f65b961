pub mod model;
pub mod graph;
pub mod energy;
pub mod sim;
pub mod whatif;
pub mod profile;
pub mod schedule;
pub mod exec;
pub mod bundled;
pub mod cli;
