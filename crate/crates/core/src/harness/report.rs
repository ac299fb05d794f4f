use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::SweepConfig;
use super::records::ResultLog;
use crate::error::{Error, Result};
use crate::verify::Verdict;

/// Mean and sample standard deviation (divisor `n − 1`; 0 for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    /// Sorts first so the result does not depend on input order.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub epsilon: f64,
    /// Verified count per seed, aggregated.
    pub verified: Stat,
    /// Totals over seeds.
    pub falsified: usize,
    pub timeout: usize,
    pub unknown: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub ratio: f64,
    pub label: String,
    pub accuracy: Option<Stat>,
    pub failed_models: usize,
    /// One entry per epsilon; `None` where no seed has records.
    pub cells: Vec<Option<Cell>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub epsilons: Vec<f64>,
    pub n_inputs: usize,
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

/// "Unpruned" for 0, else "40% Pruned".
pub fn model_label(ratio: f64) -> String {
    if ratio == 0.0 {
        return "Unpruned".into();
    }
    let pct = ratio * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}% Pruned", pct.round() as i64)
    } else {
        format!("{}% Pruned", pct)
    }
}

pub fn aggregate(log: &ResultLog, cfg: &SweepConfig) -> ExperimentReport {
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    let mut ratios = cfg.ratios.clone();
    ratios.sort_by(f64::total_cmp);
    let mut epsilons = cfg.epsilons.clone();
    epsilons.sort_by(f64::total_cmp);
    let mut warnings = Vec::new();
    let rows = ratios
        .iter()
        .map(|&ratio| {
            let models: Vec<_> = seeds.iter().filter_map(|&s| log.model(s, ratio)).collect();
            let accuracy = Stat::of(&models.iter().map(|m| m.accuracy).collect::<Vec<_>>());
            let failed_models = models.iter().filter(|m| !m.reached_threshold).count();
            let cells = epsilons
                .iter()
                .map(|&epsilon| {
                    let mut verified = Vec::new();
                    let (mut falsified, mut timeout, mut unknown) = (0, 0, 0);
                    for &seed in &seeds {
                        let recs: Vec<_> = log
                            .instances
                            .iter()
                            .filter(|r| {
                                r.seed == seed
                                    && r.ratio.to_bits() == ratio.to_bits()
                                    && r.epsilon.to_bits() == epsilon.to_bits()
                            })
                            .collect();
                        if recs.is_empty() {
                            continue;
                        }
                        let count = |v: Verdict| recs.iter().filter(|r| r.verdict == v).count();
                        verified.push(count(Verdict::Verified) as f64);
                        falsified += count(Verdict::Falsified);
                        timeout += count(Verdict::Timeout);
                        unknown += count(Verdict::Unknown);
                    }
                    let Some(verified) = Stat::of(&verified) else {
                        warnings.push(format!("no results for {} at ε = {epsilon}", model_label(ratio)));
                        return None;
                    };
                    Some(Cell {
                        epsilon,
                        verified,
                        falsified,
                        timeout,
                        unknown,
                    })
                })
                .collect();
            ReportRow {
                ratio,
                label: model_label(ratio),
                accuracy,
                failed_models,
                cells,
            }
        })
        .collect();
    ExperimentReport {
        dataset: cfg.data.choice.to_string(),
        seeds,
        epsilons,
        n_inputs: cfg.n_inputs,
        rows,
        warnings,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::InvalidArgument(format!("unknown report format {s:?}"))),
        }
    }
}

pub const CSV_HEADER: &str =
    "model,ratio,epsilon,seeds,verified_mean,verified_std,falsified,timeout,unknown,accuracy_mean,accuracy_std";

pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => render_markdown(report),
    }
}

fn render_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        let (am, asd) = row.accuracy.map_or((f64::NAN, f64::NAN), |a| (a.mean, a.std));
        for cell in row.cells.iter().flatten() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                row.label,
                row.ratio,
                cell.epsilon,
                cell.verified.n,
                cell.verified.mean,
                cell.verified.std,
                cell.falsified,
                cell.timeout,
                cell.unknown,
                am,
                asd
            );
        }
    }
    out
}

fn render_markdown(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Local robustness verification ({})\n", report.dataset);
    let _ = writeln!(
        out,
        "Verified instances out of {} inputs per model: mean ± sample standard deviation (n − 1) over seeds {:?}.\n",
        report.n_inputs, report.seeds
    );
    out.push_str("| Model |");
    for e in &report.epsilons {
        let _ = write!(out, " ε = {e} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(report.epsilons.len()));
    out.push('\n');
    for row in &report.rows {
        let _ = write!(out, "| {} |", row.label);
        for cell in &row.cells {
            match cell {
                Some(c) => {
                    let _ = write!(out, " {:.1} ± {:.1} |", c.verified.mean, c.verified.std);
                }
                None => out.push_str(" n/a |"),
            }
        }
        out.push('\n');
    }
    out.push_str("\n## Outcome totals over seeds\n\n");
    out.push_str("| Model | ε | Verified | Falsified | Timeout | Unknown |\n|---|---|---|---|---|---|\n");
    for row in &report.rows {
        for c in row.cells.iter().flatten() {
            let verified = (c.verified.mean * c.verified.n as f64).round() as usize;
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                row.label, c.epsilon, verified, c.falsified, c.timeout, c.unknown
            );
        }
    }
    out.push_str("\n## Test accuracy\n\n| Model | Accuracy | Below threshold |\n|---|---|---|\n");
    for row in &report.rows {
        let acc = row.accuracy.map_or("n/a".to_string(), |a| {
            format!("{:.3}% ± {:.3}%", 100.0 * a.mean, 100.0 * a.std)
        });
        let _ = writeln!(out, "| {} | {} | {} |", row.label, acc, row.failed_models);
    }
    if !report.warnings.is_empty() {
        out.push_str("\n## Warnings\n\n");
        for w in &report.warnings {
            let _ = writeln!(out, "- {w}");
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub model: String,
    pub ratio: f64,
    pub epsilon: f64,
    pub seeds: usize,
    pub verified_mean: f64,
    pub verified_std: f64,
    pub falsified: usize,
    pub timeout: usize,
    pub unknown: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::InvalidArgument("report CSV header mismatch".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::InvalidArgument(format!("report CSV row {}: bad {what}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(bad("field count"));
            }
            let float = |k: usize, name: &str| f[k].parse::<f64>().map_err(|_| bad(name));
            let int = |k: usize, name: &str| f[k].parse::<usize>().map_err(|_| bad(name));
            Ok(CsvRow {
                model: f[0].to_string(),
                ratio: float(1, "ratio")?,
                epsilon: float(2, "epsilon")?,
                seeds: int(3, "seeds")?,
                verified_mean: float(4, "verified_mean")?,
                verified_std: float(5, "verified_std")?,
                falsified: int(6, "falsified")?,
                timeout: int(7, "timeout")?,
                unknown: int(8, "unknown")?,
                accuracy_mean: float(9, "accuracy_mean")?,
                accuracy_std: float(10, "accuracy_std")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 3));
        let s = Stat::of(&[7.0]).unwrap();
        assert_eq!((s.mean, s.std), (7.0, 0.0));
        assert_eq!(Stat::of(&[3.0, 1.0, 2.0]), Stat::of(&[1.0, 2.0, 3.0]));
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn labels() {
        assert_eq!(model_label(0.0), "Unpruned");
        assert_eq!(model_label(0.1), "10% Pruned");
        assert_eq!(model_label(0.7), "70% Pruned");
        assert_eq!(model_label(0.45), "45% Pruned");
    }

    #[test]
    fn csv_header_is_enforced() {
        assert!(parse_report_csv("a,b\n").is_err());
        assert!(parse_report_csv(&format!("{CSV_HEADER}\nx,1,2\n")).is_err());
        assert_eq!(parse_report_csv(&format!("{CSV_HEADER}\n")).unwrap(), vec![]);
    }
}
