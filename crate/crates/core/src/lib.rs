pub mod anatomy;
pub mod cfm;
pub mod circuit;
pub mod cli;
pub mod desk;
pub mod inflow;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod tuning;
