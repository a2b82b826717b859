#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod colocation;
pub mod geometry;
pub mod mllm;
pub mod privacy;
pub mod protocol;
pub mod server;
pub mod sync;
pub mod sim;
