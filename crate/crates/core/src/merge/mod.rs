//! Merge rules and the checkpoint-level orchestrator.

mod engine;
mod methods;

pub use engine::{
    run_merge, MergeJob, MergeMethod, MergeSummary, MethodKind, SkippedTensor, TensorSummary,
};
pub use methods::{
    merge_dare, merge_della, merge_karcher, merge_lerp, merge_model_stock, merge_multislerp,
    merge_slerp, merge_task_arithmetic, merge_ties, model_stock_ratio, Combine, DropMerge,
    SolverStats,
};
