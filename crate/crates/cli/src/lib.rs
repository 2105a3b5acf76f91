//! Configuration, commands and verification suites behind the `fedsurrogate` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod commands;
pub mod config;
pub mod verify;
