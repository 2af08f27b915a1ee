//! Leave-one-domain-out protocol: every domain takes a turn as the held-out
//! target while the others train, crossed with model variants and seeds.
//! Results come back in task order (target, then variant, then seed) no
//! matter how many worker threads ran them.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::{ModelConfig, StageConfig};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::pipeline::{run_one, IterLog, RunRecord, RunSpec, Variant};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct ProtocolSpec {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Shots per class from each target; 0 runs the zero-shot protocol.
    pub shots: usize,
    pub jobs: usize,
}

/// One line of the results table.
#[derive(Debug, Clone)]
pub struct ProtocolRow {
    pub target: String,
    pub variant: Variant,
    pub seed: u64,
    pub hter: f64,
    pub auc: f64,
    pub tpr_at_fpr1: f64,
    pub stability_mean: f64,
    pub stability_std: f64,
}

pub fn leave_one_out<T: Scalar>(
    model_base: &ModelConfig,
    stage_cfg: &StageConfig,
    datasets: &[DomainDataset<T>],
    spec: &ProtocolSpec,
) -> Result<Vec<RunRecord>> {
    if spec.variants.is_empty() || spec.seeds.is_empty() {
        return Err(Error::usage(
            "protocol needs at least one variant and one seed".to_string(),
        ));
    }
    let mut tasks = Vec::new();
    for t in 0..datasets.len() {
        for &v in &spec.variants {
            for &s in &spec.seeds {
                tasks.push((t, v, s));
            }
        }
    }

    let jobs = spec.jobs.max(1).min(tasks.len().max(1));
    let slots: Vec<Mutex<Option<Result<RunRecord>>>> =
        tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let (t, v, s) = tasks[i];
                let run = run_one(
                    model_base,
                    stage_cfg,
                    datasets,
                    t,
                    &RunSpec {
                        variant: v,
                        seed: s,
                        shots: spec.shots,
                        ckpt_dir: None,
                    },
                );
                *slots[i].lock().unwrap() = Some(run);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

/// Headline numbers of each run, taken at its best checkpoint.
pub fn protocol_rows(records: &[RunRecord]) -> Vec<ProtocolRow> {
    records
        .iter()
        .map(|r| {
            let report = r.best_report();
            ProtocolRow {
                target: r.target.clone(),
                variant: r.variant,
                seed: r.seed,
                hter: report.hter,
                auc: report.auc,
                tpr_at_fpr1: report
                    .tpr_at_standard()
                    .expect("runs always request the 1% FPR target"),
                stability_mean: r.stability_mean,
                stability_std: r.stability_std,
            }
        })
        .collect()
}

pub fn render_protocol_csv(rows: &[ProtocolRow]) -> String {
    let mut out =
        String::from("target,variant,seed,hter,auc,tpr_at_fpr1,stability_mean,stability_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.target,
            r.variant.name(),
            r.seed,
            r.hter,
            r.auc,
            r.tpr_at_fpr1,
            r.stability_mean,
            r.stability_std
        ));
    }
    out
}

/// Per-iteration loss table of one run.
pub fn render_training_log(iters: &[IterLog]) -> String {
    let mut out = String::from("iter,stage,ce,cos,total\n");
    for l in iters {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            l.iter,
            l.stage.name(),
            l.loss.ce,
            l.loss.cos,
            l.loss.total
        ));
    }
    out
}
