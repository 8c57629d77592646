//! Worst-case uncertainty quantification for slow-fast diffusions whose
//! diffusion coefficient is only known to lie in an interval.
//!
//! The crate is organised bottom-up:
//!
//! - [`sublinear`]: the G-nonlinearity, uncertainty intervals and the
//!   worst-case (sublinear) Monte Carlo expectation.
//! - [`models`]: linear-quadratic slow-fast blocks and their averaged limit,
//!   the triad climate model and its homogenised limit, and the pitchfork
//!   averaging example.
//! - [`sde_sim`]: deterministic Euler–Maruyama ensembles with common random
//!   numbers and strong-error rate fitting.
//! - [`hjb_fd`]: explicit finite differences for G-HJB equations in one and
//!   two dimensions, worst-case parameter fields and a Riccati oracle.
//! - [`twobsde`]: a regression-based solver for second-order BSDEs.
//! - [`rng`]: the counter-based per-path random streams shared by all
//!   Monte Carlo code.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod hjb_fd;
pub mod models;
pub mod rng;
pub mod sde_sim;
pub mod sublinear;
pub mod twobsde;

pub use error::{Error, Result};
pub use hjb_fd::{
    riccati_solve, riccati_value, sigma_star_field, solve_ghjb, solve_ghjb_richardson, Axis,
    GhjbProblem, GridSpec, RiccatiProblem, RiccatiSolution, SigmaStarField, ValueField, ValueSlice,
};
pub use models::{
    conserved_quantity, pitchfork_limit_vector_field, pitchfork_roots, reduce_lq, triad_equilibria,
    triad_full_drift, triad_limit_diffusion, triad_limit_drift, BlockMatrices, FastScaling,
    MultiscaleLQModel, PitchforkModel, ReducedLQModel, TriadLimit, TriadModel,
};
pub use sde_sim::{
    coupled_sup_sq_error, coupled_terminal_error, simulate, simulate_coupled, strong_error_rate,
    CoupledFamily, LqFamily, PathEnsemble, PitchforkFamily, Scheme, SdeSystem, SimConfig,
    StrongErrorReport,
};
pub use sublinear::{
    g_argmax, g_nonlinearity, worst_case_expectation, ThetaGrid, ThetaMean, UncertaintyInterval,
    WorstCaseEstimate,
};
pub use twobsde::{
    make_lq_driver, make_lq_problem, make_triad_qoi_problem, solve_2bsde, ApproximatorSpec, Driver,
    TriadSystem, TwoBsdeProblem, TwoBsdeSolution,
};
