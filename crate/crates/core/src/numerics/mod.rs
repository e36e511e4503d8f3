//! Small numerical kernels shared by the simulation and the solvers.

pub mod ode;
pub mod quad;
pub mod roots;
