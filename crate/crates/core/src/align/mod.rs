//! Dynamics alignment: delta action learning, delta dynamics, SysID grid
//! search, action-noise fine-tuning and training-free action correction.

pub mod correct;
pub mod dataset;
pub mod delta_action;
pub mod delta_dynamics;
pub mod finetune;
pub mod sysid;

pub use dataset::{collect_rollouts, excitation_rollouts, CollectConfig, Episode, Provenance, TrajectoryDataset};
pub use delta_action::{
    action_norm_reward, train_delta_action, DeltaActionConfig, DeltaActionEnv, DeltaActionModel,
    DeltaTrainResult,
};
pub use delta_dynamics::{
    one_step_mse, train_delta_dynamics, DeltaDynamicsConfig, DeltaDynamicsModel, DeltaDynamicsReport,
};
pub use sysid::{replay_error, sysid_grid_search, GridPoint, SysIdGrid, SysIdResult};
pub use correct::{
    fixed_point_correct, gradient_correct, CorrectedController, CorrectionMethod, DeltaFunction,
    FixedPointReport, GradientReport,
};
pub use finetune::{
    build_asap_env, delta_magnitude_report, finetune_delta_dynamics, finetune_in, finetune_policy,
    noise_finetune, same_parameters, ConstantDelta, FinetuneConfig,
};
