//! MCMC for the hierarchical model: Gaussian block Gibbs draws for the
//! effects, inverse-gamma Gibbs draws for the variances and adaptive
//! random-walk Metropolis-Hastings for the voxel-level parameters.

mod chain;
pub mod conditionals;
mod init;
mod io;
mod steps;

pub use chain::{
    run_chain, run_chain_with, AcceptanceReport, ChainContext, ChainSamples, Family, McmcConfig,
    ProposalScales, Tally,
};
pub use init::{initial_state, initial_state_from_fits, pre_injection_noise};
pub use io::{column_names, flatten_state, load_chain, save_chain, sidecar_path, CHAIN_FORMAT};
pub use steps::{
    adapt_proposals, gibbs_effects_block, gibbs_noise_variances, gibbs_patient_variances,
    gibbs_voxel_variances, mh_voxel_psi, mh_vp, psi_log_acceptance_ratio, vp_log_acceptance_ratio,
    EffectsBlock, NoiseVariances, PatientVariances, StepFactory, StepRegistry, UpdateStep,
    VascularFraction, VoxelPsi, VoxelVariances, DEFAULT_SCHEDULE,
};
