//! Fully coupled forward-backward SDEs on a recombining lattice, their
//! first- and second-order adjoints, spike variations, and numerical checks
//! of the global stochastic maximum principle.

pub mod adjoint;
pub mod assumptions;
pub mod error;
pub mod expr;
pub mod fbsde;
pub mod jet;
pub mod lq;
pub mod model;
mod par;
pub mod paths;
pub mod presets;
pub mod problem;
pub mod smp;
pub mod tree;
pub mod variation;

pub use error::{Error, Result};
