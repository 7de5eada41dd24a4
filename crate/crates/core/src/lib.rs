pub mod beliefs;
pub mod citymap;
pub mod flight;
pub mod infogain;
pub mod raysim;
pub mod scenefield;
pub mod policies;
pub mod harness;
