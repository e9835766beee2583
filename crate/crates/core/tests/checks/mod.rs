//! Test-side oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod fake_quant;
pub mod gradient;
pub mod grouped_conv;
pub mod layout;
