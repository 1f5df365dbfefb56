//! Evaluation over a dataset split and rendering of the resulting tables.

mod harness;
mod report;

pub use harness::{
    compare, run_eval, EvalError, EvalOptions, EvalReport, EvalRun, FailureRecord, Uplift,
};
pub use report::{
    parse_csv_table, parse_sweep_csv, render_report, render_sweep, render_table, ReportError,
    ReportFormat, SweepTable, Table,
};
