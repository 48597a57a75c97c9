//! Information competing representation learning at desk scale.
//!
//! A representation `r = [z, y]` is split into a capacity-limited part `z`
//! (KL-bounded toward a standard normal) and an information-maximized part
//! `y` (Jensen-Shannon discriminator surrogate). Each part must solve the
//! downstream task on its own, an adversarial predictor pushes the parts
//! toward independence, and the fused `r` solves the task jointly.

pub mod datasets;
pub mod distributions;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
