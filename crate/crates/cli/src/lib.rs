//! Service and payload layer behind the `archseek` binary.

pub mod api;
pub mod config;
pub mod service;
