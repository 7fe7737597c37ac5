pub mod geometry;
pub mod bismut;
pub mod conditional;
pub mod ito_map;
pub mod stats;
pub mod wiener;
pub mod harness;
