//! Helpers shared by several test targets.
#![allow(dead_code)]

pub mod geometry;
pub mod gradcheck;
pub mod nets;
