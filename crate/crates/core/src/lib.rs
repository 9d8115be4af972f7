//! Adapter-only test-time adaptation of a frozen image encoder through soft
//! prototype estimation, prototype-anchored reconstruction, contrastive
//! alignment and entropy minimisation.

pub mod adaptation;
pub mod association;
pub mod encoders;
pub mod error;
pub mod numerics;
pub mod objectives;

pub use error::{Error, Result};
