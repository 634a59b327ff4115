//! Toy meta-task suites, ego-state masking, reward shaping and the latched
//! success metric.

mod ego;
mod metric;
mod shaping;
mod suite;

pub use ego::{ego_extract, EgoMask};
pub use metric::{avg_episode_success, EpisodeSuccess};
pub use shaping::{shape_reward, shape_reward_branch_gap};
pub use suite::{make_suite, reset, step, EnvState, StepOutcome, SuiteConfig, SuiteKind, TaskSpec};
