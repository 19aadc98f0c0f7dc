//! Early-stopping Byzantine agreement over EIG trees.

pub mod eig;
pub mod resolve;
pub mod detect;
pub mod agreement;
pub mod trace;
pub mod monitor;
pub mod party;
pub mod adversary;
pub mod sim;
pub mod analysis;
pub mod report;
pub mod oracle;
pub mod config;
