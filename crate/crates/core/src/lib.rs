pub mod dataset;
pub mod diversity;
pub mod eval;
pub mod gateway;
pub mod model;
pub mod parse;
pub mod prompt;
pub mod solution;
pub mod thought;
