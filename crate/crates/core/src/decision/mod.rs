//! Feature construction, rewards, posterior updates and action selection for
//! both trial profiles.

pub mod action;
pub mod context;
pub mod posterior;
pub mod profile;
pub mod reward;
pub mod smooth;

pub use action::draw_action;
pub use context::{
    build_context_oralytics, design_row_miwaves, exp_average, feature_map_miwaves, feature_map_oralytics,
    HistoryPoint, MiwavesState, OralyticsContext,
};
pub use posterior::{
    posterior_update_blr, posterior_update_mixed, JointPosteriorState, Observation, PosteriorState,
};
pub use profile::{CostParams, PriorSpec, ProfileKind, RhoParams, TrialProfile, UpdateCadence};
pub use reward::{compute_reward_miwaves, compute_reward_oralytics, ConditionFlags, RewardRecord};
pub use smooth::{rho, smooth_probability, SmoothProbability};
