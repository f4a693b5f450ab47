//! Unsupervised anomaly detection by reverse distillation from frozen
//! vision-language encoders, guided by learned normality prompts.

pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fnp;
pub mod fusion_moe;
pub mod nn;
pub mod normality;
pub mod params;
pub mod pipeline;
pub mod sample;
pub mod scoring;

#[cfg(test)]
mod testutil;

pub use config::RunConfig;
pub use error::{Error, Result};
