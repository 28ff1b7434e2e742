//! Implementation-independent oracles and statistical checks.

pub mod consistency;
pub mod deviation;
pub mod lqg;
pub mod oracle;
pub mod static_game;
pub mod stats;
