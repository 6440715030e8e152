//! Conic optimization: a structured program builder and a dense
//! interior-point solver for semidefinite programs.

pub mod cones;
pub mod program;
pub mod solver;

pub use program::{
    BlockId, CompiledProgram, ConicSolution, HermMatExpr, LinExpr, ProgramBuilder, SymMatExpr,
};
pub use solver::{check_kkt, solve, KktReport, RawSolution, SolveStatus, SolverSettings};
