//! Behavioral simulator of a four sub-array 1T1R resistive memory
//! characterization chip, with the host-side driver that programs it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array;
pub mod config;
pub mod controller;
pub mod device;
pub mod error;
pub mod frontend;
pub mod host;
pub mod population;
pub mod serializer;

pub use error::{Error, Result};
