//! Built-in benchmark domains.

pub mod packing;
pub mod strings;

pub use packing::{
    check_packing, packing_evaluator, render_packing, score_packing, Circle, Packing, PackingConfig, PackingReport,
    DEFAULT_CIRCLE_COUNT, DEFAULT_PENALTY, PACKING_TOLERANCE,
};
pub use strings::{
    fixed_task_evaluator, make_generalization_suite, make_multitask_suite, mismatch_fixer, score_string,
    string_task_evaluator, StringScorer, StringTask,
};
