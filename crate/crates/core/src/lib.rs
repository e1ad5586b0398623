//! Joint distillation of a restoration network and a detector trained on
//! frames degraded by simulated atmospheric turbulence.

pub mod data;
pub mod imgops;
pub mod turbsim;
pub mod nets;
pub mod losses;
pub mod distill;
pub mod evalkit;
pub mod config;
pub mod pipeline;
