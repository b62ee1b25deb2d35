// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(clippy::needless_range_loop)]

pub mod artifact;
pub mod calibration;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod fbn;
pub mod model;
pub mod numerics;
pub mod pruning;

pub use error::{Error, Result};
