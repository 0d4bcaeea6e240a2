//! Success/failure monitoring of liquid pouring from first-person visual
//! features and wrist IMU windows.
//!
//! The model is a hierarchical LSTM that fuses per-modality encodings and is
//! trained jointly with two auxiliary tasks: adversarial one-step forecasting
//! of the wrist pose and classification of the initial object state. The crate
//! also carries a seeded kinematic simulator of pouring demonstrations, the
//! leave-one-out evaluation protocols, and bit-exact dataset and checkpoint
//! formats.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod persist;
pub mod simulator;
pub mod train;

pub use error::{Error, Result};
