//! Assimilation baselines the learned filter is judged against: a serial
//! ensemble adjustment filter on the full model state, optimal
//! interpolation from tracer displacements, and the no-skill references.

pub mod eakf;
pub mod eakf_qg;
pub mod oi;
pub mod reference;
