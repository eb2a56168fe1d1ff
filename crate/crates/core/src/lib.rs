pub mod channel;
pub mod collocation;
pub mod control;
pub mod eigen;
pub mod error;
pub mod harness;
pub mod modal;
pub mod observability;
pub mod quadrature;
pub mod spectral;
pub mod verify;

pub const SCHEMA_VERSION: u32 = 1;
