//! Two-stage control of systems with uncertain parameters: DDPG expert
//! policies trained on representative simulated systems, soft-switched
//! online by FTRL / discounted-FTRL weight estimation on the probability
//! simplex.

pub mod adapt;
pub mod cli;
pub mod ddpg;
pub mod dynamics;
pub mod expert;
pub mod nn;
