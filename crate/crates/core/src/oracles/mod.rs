//! Closed-form models with known Fisher information.

pub mod channel;
pub mod edge;
pub mod numeric_fim;
pub mod quadrature;
pub mod theory;
