//! Invertible layers. Each provides a forward map with its log-determinant,
//! the exact inverse, and hand-derived gradients for both directions.

pub mod actnorm;
pub mod coupling;
pub mod dense;
pub mod invconv;
pub mod squeeze;

pub use actnorm::Actnorm;
pub use coupling::Coupling;
pub use dense::DenseSubnet;
pub use invconv::InvConv;
pub use squeeze::{squeeze_forward, squeeze_inverse};
