use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use super::config::SweepConfig;
use super::records::{read_log, LogEntry, LogWriter, ModelRecord, ResultLog, ResultRecord};
use super::report::{aggregate, render_report, ReportFormat};
use crate::data::{select_verification_inputs, Dataset, VerificationInput};
use crate::error::{Error, Result};
use crate::model_io::{load_model, save_model, write_atomic, ModelMeta};
use crate::net::Network;
use crate::prune::prune_and_finetune;
use crate::tensor::Tensor;
use crate::train::{init_network, train};
use crate::verify::{make_property, verify_until, RobustnessProperty, VerificationOutcome, Verdict, VerifyConfig, VerifyStats};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "results.jsonl";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Concurrent verification instances; 0 is treated as 1.
    pub jobs: usize,
    /// Stop after appending this many new instance records.
    pub stop_after: Option<usize>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub new_models: usize,
    pub new_records: usize,
    pub skipped_records: usize,
    pub failed_models: usize,
    pub interrupted: bool,
}

pub fn model_file_name(seed: u64, ratio: f64) -> String {
    format!("models/seed{seed}_ratio{ratio}.pcv")
}

/// Runs (or resumes) a sweep into `results_dir` and writes the reports once
/// every instance has a record.
pub fn run_sweep(cfg: &SweepConfig, results_dir: &Path, opts: &SweepOptions) -> Result<SweepSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(results_dir).map_err(|e| Error::io(results_dir, e))?;
    let cfg_path = results_dir.join(CONFIG_FILE);
    if cfg_path.exists() {
        if SweepConfig::load(&cfg_path)? != *cfg {
            return Err(Error::InvalidArgument(format!(
                "{} holds a different sweep configuration",
                results_dir.display()
            )));
        }
    } else {
        write_atomic(&cfg_path, serde_json::to_string_pretty(cfg)?.as_bytes())?;
    }
    let log_path = results_dir.join(LOG_FILE);
    let mut log = read_log(&log_path)?;
    let mut writer = LogWriter::open(&log_path)?;
    let (train_ds, test_ds) = cfg.data.load()?;
    let inputs = select_verification_inputs(&test_ds, cfg.n_inputs)?;
    let mut run = Run {
        cfg,
        dir: results_dir,
        opts,
        train_ds: &train_ds,
        test_ds: &test_ds,
        writer: &mut writer,
        summary: SweepSummary::default(),
    };
    for &seed in &cfg.seeds {
        let mut baseline: Option<Network<f32>> = None;
        let mut ratios = cfg.ratios.clone();
        ratios.sort_by(f64::total_cmp);
        for ratio in ratios {
            let (net, record) = run.model(&mut log, seed, ratio, &mut baseline)?;
            if !record.reached_threshold {
                run.summary.failed_models += 1;
                continue;
            }
            if run.verify_model(&mut log, &net, &record, &inputs)? {
                run.summary.interrupted = true;
                return Ok(run.summary);
            }
        }
    }
    write_reports(cfg, &log, results_dir)?;
    Ok(run.summary)
}

/// Aggregates `log` and writes both report formats.
pub fn write_reports(cfg: &SweepConfig, log: &ResultLog, results_dir: &Path) -> Result<()> {
    let report = aggregate(log, cfg);
    write_atomic(
        &results_dir.join(REPORT_MD),
        render_report(&report, ReportFormat::Markdown).as_bytes(),
    )?;
    write_atomic(
        &results_dir.join(REPORT_CSV),
        render_report(&report, ReportFormat::Csv).as_bytes(),
    )
}

struct Run<'a> {
    cfg: &'a SweepConfig,
    dir: &'a Path,
    opts: &'a SweepOptions,
    train_ds: &'a Dataset,
    test_ds: &'a Dataset,
    writer: &'a mut LogWriter,
    summary: SweepSummary,
}

impl Run<'_> {
    fn say(&self, msg: impl FnOnce() -> String) {
        if self.opts.verbose {
            eprintln!("{}", msg());
        }
    }

    fn baseline(&mut self, log: &mut ResultLog, seed: u64, slot: &mut Option<Network<f32>>) -> Result<Network<f32>> {
        if let Some(net) = slot {
            return Ok(net.clone());
        }
        let (net, _) = self.model(log, seed, 0.0, slot)?;
        Ok(net)
    }

    /// Loads the model for `(seed, ratio)` if the log has it, else trains
    /// (or prunes and fine-tunes) it and logs the result.
    fn model(
        &mut self,
        log: &mut ResultLog,
        seed: u64,
        ratio: f64,
        baseline: &mut Option<Network<f32>>,
    ) -> Result<(Network<f32>, ModelRecord)> {
        let file = model_file_name(seed, ratio);
        let path: PathBuf = self.dir.join(&file);
        if let Some(record) = log.model(seed, ratio) {
            let (net, _) = load_model(&path)?;
            if ratio == 0.0 {
                *baseline = Some(net.clone());
            }
            return Ok((net, record.clone()));
        }
        let tcfg = self.cfg.train_config(seed);
        let result = if ratio == 0.0 {
            self.say(|| format!("training seed {seed}"));
            let r = train(init_network(&self.cfg.arch, seed)?, self.train_ds, self.test_ds, &tcfg, false)?;
            *baseline = Some(r.network.clone());
            r
        } else {
            let base = self.baseline(log, seed, baseline)?;
            self.say(|| format!("pruning seed {seed} at ratio {ratio}"));
            prune_and_finetune(&base, self.train_ds, self.test_ds, ratio, &tcfg)?.1
        };
        let meta = ModelMeta {
            arch: Some(self.cfg.arch),
            train_config: Some(tcfg),
            seed: Some(seed),
            prune_ratio: ratio,
            accuracy: Some(result.final_accuracy),
            epochs: Some(result.epochs_run),
        };
        save_model(&path, &result.network, &meta)?;
        let record = ModelRecord {
            seed,
            ratio,
            accuracy: result.final_accuracy,
            epochs: result.epochs_run,
            reached_threshold: result.reached_threshold(),
            file,
        };
        self.say(|| {
            format!(
                "seed {seed} ratio {ratio}: accuracy {:.4} after {} epochs",
                record.accuracy, record.epochs
            )
        });
        let entry = LogEntry::Model(record.clone());
        self.writer.append(&entry)?;
        log.push(entry);
        self.summary.new_models += 1;
        Ok((result.network, record))
    }

    /// Verifies every missing instance of one model. Returns `true` when the
    /// `stop_after` budget interrupted the run.
    fn verify_model(
        &mut self,
        log: &mut ResultLog,
        net: &Network<f32>,
        model: &ModelRecord,
        inputs: &[VerificationInput],
    ) -> Result<bool> {
        let net = Arc::new(net.cast::<f64>());
        let done = log.completed();
        let mut pending = Vec::new();
        for &epsilon in &self.cfg.epsilons {
            for input in inputs {
                let key = (model.seed, model.ratio.to_bits(), epsilon.to_bits(), input.index);
                if done.contains(&key) {
                    self.summary.skipped_records += 1;
                } else {
                    pending.push((epsilon, input));
                }
            }
        }
        let jobs = self.opts.jobs.max(1);
        for chunk in pending.chunks(jobs) {
            let outcomes: Vec<Result<VerificationOutcome>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&(epsilon, input)| {
                        let net = Arc::clone(&net);
                        let vcfg = self.cfg.verify_config(model.seed, input.index);
                        s.spawn(move || {
                            let prop = make_property(&input.image.cast::<f64>(), input.label, epsilon)?;
                            verify_with_watchdog(net, prop, vcfg)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("verification worker panicked")).collect()
            });
            for (&(epsilon, input), outcome) in chunk.iter().zip(outcomes) {
                let outcome = outcome?;
                let record = ResultRecord {
                    seed: model.seed,
                    ratio: model.ratio,
                    epsilon,
                    input: input.index,
                    label: input.label,
                    verdict: outcome.verdict,
                    bound: outcome.margin_lower_bound,
                    wall_time_s: outcome.stats.wall_time_s,
                    subdomains: outcome.stats.subdomains,
                    model_accuracy: model.accuracy,
                };
                self.say(|| {
                    format!(
                        "seed {} ratio {} eps {} input {}: {:?} ({:.2}s, {} subdomains)",
                        record.seed, record.ratio, epsilon, record.input, record.verdict, record.wall_time_s, record.subdomains
                    )
                });
                let entry = LogEntry::Instance(record);
                self.writer.append(&entry)?;
                log.push(entry);
                self.summary.new_records += 1;
                if self.opts.stop_after.is_some_and(|k| self.summary.new_records >= k) {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }
}

/// Cooperative deadline inside the verifier, plus a hard cut-off at twice
/// the budget in case a single bounding step overruns.
pub fn verify_with_watchdog(
    net: Arc<Network<f64>>,
    prop: RobustnessProperty,
    vcfg: VerifyConfig,
) -> Result<VerificationOutcome> {
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let flag = Arc::clone(&stop);
    std::thread::spawn(move || {
        let _ = tx.send(verify_until(&net, &prop, &vcfg, &flag));
    });
    let Some(budget) = vcfg.timeout_s else {
        return rx.recv().expect("verifier thread ended without a result");
    };
    let hard = Duration::from_secs_f64(2.0 * budget);
    match rx.recv_timeout(hard) {
        Ok(outcome) => outcome,
        Err(_) => {
            stop.store(true, Ordering::Relaxed);
            Ok(VerificationOutcome {
                verdict: Verdict::Timeout,
                counterexample: None,
                margin_lower_bound: None,
                stats: VerifyStats {
                    wall_time_s: hard.as_secs_f64(),
                    ..VerifyStats::default()
                },
            })
        }
    }
}

/// The anchor image for test item `index`, as a 64-bit tensor.
pub fn anchor(ds: &Dataset, index: usize) -> Result<Tensor<f64>> {
    if index >= ds.len() {
        return Err(Error::InvalidArgument(format!(
            "input index {index} outside a dataset of {}",
            ds.len()
        )));
    }
    let data = ds.image(index).iter().map(|&v| v as f64).collect();
    Tensor::new(ds.image_shape().to_vec(), data)
}
