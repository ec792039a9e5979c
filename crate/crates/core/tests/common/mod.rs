//! Helpers shared by several integration-test targets.
#![allow(dead_code)]

pub mod fd;
