//! Overlap metrics, dataset evaluation and ablation grids.

mod ablation;
mod evaluate;
mod metrics;

pub use ablation::{ablation_run, AblationAxis, AblationRow, AblationSetup, AblationTable};
pub use evaluate::{
    eval_prompts, evaluate_model, evaluate_with, AbsentPolicy, ClassMetrics, EvalProtocol, MetricsReport, REPORT_CSV,
    REPORT_JSON,
};
pub use metrics::{dice, iou, OverlapCounts};
