//! Instruments for representation quality and for the conditioning theory.

mod gn;
mod probe;
mod theory;

pub use crate::data::SubspaceSpec;
pub use gn::{gn_conditioning, gn_spectrum, GnReport};
pub use probe::{class_means, class_separation, features_at, linear_probe, probe_split, probe_vs_t, ProbeConfig, TRAIN_FRACTION};
pub use theory::{
    check_prop4, check_prop5, coordinate_basis, fuzz, g_req, gain_on_basis, gd_complexity, op_norm, prop4_instance,
    prop5_bound, prop5_instance, slow_mode_iterations, subspace_gain, PropCheckResult, Which, HOLD_TOL,
};
