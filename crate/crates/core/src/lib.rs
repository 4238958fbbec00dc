//! Trace-focused diffusion policies on a toy multi-stage manipulation
//! workspace.

pub mod config;
pub mod genmodel;
pub mod geometry;
pub mod policy;
pub mod simenv;
pub mod tff;
pub mod tinynet;
