//! Failure-aware video-language reward learning, clustering and planning on a toy tabletop simulator.

pub mod clustering;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod planner;
pub mod sim;

pub use error::{Error, Result};
