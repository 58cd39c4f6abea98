//! Entropic optimal transport with cost `c_A`: costs, the semi-dual and its
//! coupling, neural potential training and a Sinkhorn reference solver.

pub mod cost;
pub mod newton;
pub mod semidual;
pub mod sinkhorn;
pub mod train;

pub use cost::{cost_matrix, CostColumns, CostKind, CostSpec, PairCost};
pub use newton::{newton_eot, solve_eot};
pub use semidual::{
    coupling, cross_moment, ctransform, kl_between, semidual_grad_fvals, semidual_value,
    semidual_with_cross_moment, semidual_with_grad, Coupling,
};
pub use sinkhorn::{sinkhorn, sinkhorn_from, SinkhornSolution};
pub use train::{train_potential, PotentialTrainer};
