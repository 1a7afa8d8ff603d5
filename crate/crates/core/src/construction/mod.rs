//! Separated sets, schedules, the join oracles and the tree construction.

pub mod limit;
pub mod schedule;
pub mod separated;
pub mod tree;

pub use limit::{divergence_check, limit_point, trajectory_heights, DivergenceReport, LimitPoint};
pub use schedule::{divergence_ratio, f_schedule, limit_tail_bound, Schedule, TreeParams, K0};
pub use separated::{
    build_separated_set, ln_separated_count, verify_separated_set, SeparatedSet, SeparatedSetReport, SeparatedSetSpec,
    DEFAULT_CAP,
};
pub use tree::{check_tree, OracleMode, Stage, Tree, TreeConfig, TreeNode, TreeReport};
