pub mod error;
pub mod mat;
pub mod signal;
pub mod diffnet;
pub mod codec;
pub mod corpus;
pub mod speaker;
pub mod defense;
pub mod attack;
pub mod eval;
pub mod config;
