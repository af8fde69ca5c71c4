//! Safety semantics: target function, discounted safety backup, an exact
//! grid oracle for the backward reachable tube, and a tabular solver.

mod backup;
mod oracle;
mod target;

pub use backup::{safety_backup, tabular_fixed_point, FiniteMdp, FixedPoint};
pub use oracle::{
    action_lattice, backward_induction, compute_brt_oracle, mask_hamming, refinement_study,
    sign_agreement, BrtGrid, GridSpec, OracleOptions, RefinementStep, StateGrid,
};
pub use target::{calibrate_beta, target_ell, target_ell_from_norm, Calibration, TargetFnParams};
