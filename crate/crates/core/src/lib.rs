//! Passport-protected deep neural networks: models whose normalization
//! scale and shift are derived from secret passports, sign-encoded
//! signatures, ownership verification, watermark baselines and attacks.

pub mod container;
pub mod data;
pub mod error;
pub mod models;
pub mod ops;
pub mod optim;
pub mod passports;
pub mod signatures;
pub mod stats;
pub mod tensor;
pub mod training;
pub mod verification;
pub mod baselines;
pub mod attacks;
pub mod experiment;

pub use error::{Error, Result};
