//! Forward-mode duals, finite differences and the batched reverse-mode tape.

pub mod dual;
pub mod fd;
pub mod real;
pub mod tape;

pub use dual::Dual;
pub use fd::{checked_ln, checked_sqrt, directional_derivatives, fd_gradient, fd_jacobian, FD_STEP};
pub use real::Real;
pub use tape::{GradTape, Gradients, Var};
