//! Seed × ratio × ε experiment sweeps with a resumable results log and
//! aggregated reports.

mod config;
mod property_spec;
mod records;
mod report;
mod sweep;

pub use config::{DataConfig, DatasetChoice, SweepConfig, MNIST_FILES};
pub use property_spec::PropertySpec;
pub use records::{read_log, InstanceKey, LogEntry, LogWriter, ModelRecord, ResultLog, ResultRecord};
pub use report::{
    aggregate, model_label, parse_report_csv, render_report, Cell, CsvRow, ExperimentReport, ReportFormat, ReportRow,
    Stat, CSV_HEADER,
};
pub use sweep::{
    anchor, model_file_name, run_sweep, verify_with_watchdog, write_reports, SweepOptions, SweepSummary, CONFIG_FILE,
    LOG_FILE, REPORT_CSV, REPORT_MD,
};
