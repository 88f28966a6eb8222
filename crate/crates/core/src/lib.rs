//! Memory-efficient DoRA building blocks.
//!
//! The factored row norm computes `‖W + sBA‖` per output row without forming
//! the dense `BA` product. The compose engine applies the magnitude scale in a
//! cancellation-safe form. Dense fp64 oracles, closed-form memory accounting,
//! and a stability lab check both.

pub mod compose;
pub mod dispatch;
pub mod dora_layer;
pub mod error;
pub mod factored_norm;
pub mod linalg;
pub mod memory_model;
pub mod numerics;
pub mod reference_oracle;
pub mod stability_lab;

pub use error::{DoraError, Result};
pub use linalg::{RealMatrix, RealVector};
pub use numerics::DType;
