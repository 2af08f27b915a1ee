//! Two-stage training pipeline and single-run orchestration.
//!
//! A run fixes (target domain, variant, seed), pretrains the head on the
//! source domains, then fine-tunes the variant's trainable groups with the
//! target's shot pool mixed in. Fine-tuning evaluates the model on the
//! target remainder at every checkpoint; the run's headline metrics come
//! from the checkpoint with the best AUC, and the closing checkpoints feed
//! a stability summary.

pub mod protocol;

pub use protocol::{
    leave_one_out, protocol_rows, render_protocol_csv, render_training_log, ProtocolRow,
    ProtocolSpec,
};

use std::path::{Path, PathBuf};

use crate::checkpoint::save_model;
use crate::config::{ModelConfig, StageConfig};
use crate::data::{few_shot_split, sample_batch, Batch, DomainDataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{stage_loss, LossBreakdown, Stage};
use crate::metrics::{eval_report, EvalReport, HterMode, FPR_TARGET};
use crate::model::{AdaptiveVit, FreezePolicy, FwtNoise, Mode};
use crate::rng::{derive_seed, stream_rng, Rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::tape::Tape;
use crate::tensor::{adam_step, AdamConfig, AdamState};

/// Images per forward pass when scoring a whole sample list.
pub const EVAL_CHUNK: usize = 64;
/// Checkpoints entering the end-of-run stability summary.
pub const STABILITY_WINDOW: usize = 8;

/// The four model configurations the evaluation protocol compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Plain backbone, fully fine-tuned; no adapters, no FWT.
    VitFull,
    /// One adapter per module, frozen backbone.
    VitAdapter,
    /// One adapter per module plus feature-wise transform noise.
    VitAdapterFwt,
    /// Adapter ensemble, FWT, and the diversity loss: the full method.
    VitEnsembleAdapterFwt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::VitFull,
        Variant::VitAdapter,
        Variant::VitAdapterFwt,
        Variant::VitEnsembleAdapterFwt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VitFull => "vit_full",
            Variant::VitAdapter => "vit_adapter",
            Variant::VitAdapterFwt => "vit_adapter_fwt",
            Variant::VitEnsembleAdapterFwt => "vit_ensemble_adapter_fwt",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::usage(format!(
                    "unknown variant '{s}' (expected one of {})",
                    names.join(", ")
                ))
            })
    }

    /// The base geometry with this variant's adapter/FWT settings applied.
    /// The ensemble variant keeps the configured member count (minimum 2,
    /// otherwise there is nothing for the diversity loss to separate).
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let (ensemble_size, fwt_enabled) = match self {
            Variant::VitFull => (0, false),
            Variant::VitAdapter => (1, false),
            Variant::VitAdapterFwt => (1, true),
            Variant::VitEnsembleAdapterFwt => (base.ensemble_size.max(2), true),
        };
        ModelConfig {
            ensemble_size,
            fwt_enabled,
            ..base.clone()
        }
    }

    /// What fine-tuning may touch. The plain backbone trains everything;
    /// every adapter variant keeps the backbone frozen.
    pub fn finetune_policy(self) -> FreezePolicy {
        match self {
            Variant::VitFull => FreezePolicy::Full,
            _ => FreezePolicy::AdaptersAndFwt,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterLog {
    /// 1-based within its stage.
    pub iter: usize,
    pub stage: Stage,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct CheckpointEval {
    /// Fine-tune iteration the checkpoint was taken after.
    pub iter: usize,
    pub report: EvalReport,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub target: String,
    pub variant: Variant,
    pub seed: u64,
    pub shots: usize,
    pub iters: Vec<IterLog>,
    pub checkpoints: Vec<CheckpointEval>,
    /// Index into `checkpoints`: highest AUC, earliest on ties.
    pub best: usize,
    pub stability_mean: f64,
    pub stability_std: f64,
}

impl RunRecord {
    pub fn best_report(&self) -> &EvalReport {
        &self.checkpoints[self.best].report
    }
}

/// Per-run knobs of [`run_one`]; dataset- and stage-level settings live in
/// the config structs.
#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub variant: Variant,
    pub seed: u64,
    /// Shots per class taken from the target; 0 is the zero-shot protocol.
    pub shots: usize,
    pub ckpt_dir: Option<&'a Path>,
}

/// Scores every sample with the eval-mode model: P(live), in sample order.
pub fn score_samples<T: Scalar>(model: &AdaptiveVit<T>, samples: &[Sample<T>]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut images = Vec::with_capacity(chunk.len() * chunk[0].pixels.len());
        for s in chunk {
            images.extend_from_slice(&s.pixels);
        }
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &images, chunk.len(), Mode::Eval, None)?;
        let probs = tape.softmax_last(out.logits)?;
        let v = tape.values(probs);
        for i in 0..chunk.len() {
            scores.push(v[2 * i + 1].as_f64());
        }
    }
    Ok(scores)
}

/// Full metric report of the model on a labeled sample list.
pub fn evaluate_samples<T: Scalar>(
    model: &AdaptiveVit<T>,
    samples: &[Sample<T>],
) -> Result<EvalReport> {
    let scores = score_samples(model, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    eval_report(&scores, &labels, HterMode::AtEerThreshold, &[FPR_TARGET])
}

/// Mean and population standard deviation of AUC over the last
/// [`STABILITY_WINDOW`] checkpoints. A run too short to fill the window has
/// no defined stability; that is a configuration error, not a zero.
pub fn stability(checkpoints: &[CheckpointEval]) -> Result<(f64, f64)> {
    if checkpoints.len() < STABILITY_WINDOW {
        return Err(Error::config(format!(
            "stability needs the last {STABILITY_WINDOW} checkpoints, run produced only {}",
            checkpoints.len()
        )));
    }
    let tail = &checkpoints[checkpoints.len() - STABILITY_WINDOW..];
    let mean = tail.iter().map(|c| c.report.auc).sum::<f64>() / tail.len() as f64;
    let var = tail
        .iter()
        .map(|c| (c.report.auc - mean).powi(2))
        .sum::<f64>()
        / tail.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Highest AUC, earliest on ties.
pub fn best_checkpoint(checkpoints: &[CheckpointEval]) -> usize {
    let mut best = 0;
    for (i, c) in checkpoints.iter().enumerate().skip(1) {
        if c.report.auc > checkpoints[best].report.auc {
            best = i;
        }
    }
    best
}

/// One optimization step on one batch: build the graph, take the gradient,
/// apply the update. Pretraining always runs the FWT-free forward pass.
fn train_iter<T: Scalar>(
    model: &mut AdaptiveVit<T>,
    batch: &Batch<T>,
    stage: Stage,
    cos_weight: f64,
    adam_cfg: &AdamConfig,
    adam: &mut AdamState<T>,
    fwt_rng: &mut Rng,
) -> Result<LossBreakdown> {
    let (mode, noise) = match stage {
        Stage::Pretrain => (Mode::Eval, None),
        Stage::Finetune if model.cfg.fwt_enabled => (
            Mode::Train,
            Some(FwtNoise::sample(&model.cfg, batch.len(), fwt_rng)),
        ),
        Stage::Finetune => (Mode::Train, None),
    };
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch.images, batch.len(), mode, noise.as_ref())?;
    let (loss, breakdown) = stage_loss(
        &mut tape,
        out.logits,
        &out.adapter_outputs,
        &batch.labels,
        &batch.domain_ids,
        stage,
        cos_weight,
    )?;
    model.store.zero_grad();
    tape.backward(loss, &mut model.store)?;
    adam_step(&mut model.store, adam, adam_cfg)?;
    Ok(breakdown)
}

/// One complete (target, variant, seed) run: pretrain on the sources,
/// fine-tune with the target's shots, evaluate on the target remainder at
/// every checkpoint.
pub fn run_one<T: Scalar>(
    model_base: &ModelConfig,
    stage_cfg: &StageConfig,
    datasets: &[DomainDataset<T>],
    target_idx: usize,
    spec: &RunSpec,
) -> Result<RunRecord> {
    if datasets.len() < 2 {
        return Err(Error::config(
            "leave-one-out needs at least 2 domains".to_string(),
        ));
    }
    if target_idx >= datasets.len() {
        return Err(Error::usage(format!(
            "target index {target_idx} out of range ({} domains)",
            datasets.len()
        )));
    }
    let stage_cfg = stage_cfg.clone().resolved()?;
    let target = &datasets[target_idx];
    let model_cfg = spec.variant.model_config(model_base);
    if model_cfg.image_size != target.image_size || model_cfg.channels != target.channels {
        return Err(Error::config(format!(
            "model expects {}x{}x{} input, dataset is {}x{}x{}",
            model_cfg.channels,
            model_cfg.image_size,
            model_cfg.image_size,
            target.channels,
            target.image_size,
            target.image_size
        )));
    }

    let run_seed = derive_seed(
        spec.seed,
        &["target", &target.domain_id, "variant", spec.variant.name()],
    );
    let mut model = AdaptiveVit::<T>::new(model_cfg, run_seed)?;
    let sources: Vec<&DomainDataset<T>> = datasets
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_idx)
        .map(|(_, d)| d)
        .collect();

    let adam_cfg = AdamConfig {
        lr: stage_cfg.lr,
        weight_decay: stage_cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut iters = Vec::with_capacity(stage_cfg.pretrain_iters + stage_cfg.finetune_iters);

    // stage 1: head-only warmup on the sources, FWT inactive
    model.apply_freeze_policy(FreezePolicy::HeadOnly)?;
    let mut adam = AdamState::new(&model.store);
    let mut data_rng = stream_rng(derive_seed(run_seed, &["pretrain"]), Stream::Data);
    let mut fwt_rng = stream_rng(derive_seed(run_seed, &["pretrain"]), Stream::Fwt);
    for it in 1..=stage_cfg.pretrain_iters {
        let batch = sample_batch(&sources, None, stage_cfg.block_size, true, &mut data_rng)?;
        let loss = train_iter(
            &mut model,
            &batch,
            Stage::Pretrain,
            stage_cfg.cos_weight,
            &adam_cfg,
            &mut adam,
            &mut fwt_rng,
        )?;
        iters.push(IterLog {
            iter: it,
            stage: Stage::Pretrain,
            loss,
        });
    }

    // stage 2: variant-specific adaptation, fresh optimizer
    model.apply_freeze_policy(spec.variant.finetune_policy())?;
    let mut adam = AdamState::new(&model.store);
    let split = if spec.shots > 0 {
        Some(few_shot_split(target, spec.shots, run_seed)?)
    } else {
        None
    };
    let eval_samples: &[Sample<T>] = match &split {
        Some(s) => &s.remainder,
        None => &target.samples,
    };
    let mut data_rng = stream_rng(derive_seed(run_seed, &["finetune"]), Stream::Data);
    let mut fwt_rng = stream_rng(derive_seed(run_seed, &["finetune"]), Stream::Fwt);
    let mut checkpoints = Vec::with_capacity(stage_cfg.checkpoint_count());
    for it in 1..=stage_cfg.finetune_iters {
        let batch = sample_batch(
            &sources,
            split.as_ref(),
            stage_cfg.block_size,
            true,
            &mut data_rng,
        )?;
        let loss = train_iter(
            &mut model,
            &batch,
            Stage::Finetune,
            stage_cfg.cos_weight,
            &adam_cfg,
            &mut adam,
            &mut fwt_rng,
        )?;
        iters.push(IterLog {
            iter: it,
            stage: Stage::Finetune,
            loss,
        });
        if it % stage_cfg.checkpoint_every == 0 {
            let report = evaluate_samples(&model, eval_samples)?;
            let path = match spec.ckpt_dir {
                Some(dir) => {
                    let p = dir.join(format!("ckpt_{it:05}.avitckpt"));
                    save_model(&p, &model.store, Some(&adam))?;
                    Some(p)
                }
                None => None,
            };
            checkpoints.push(CheckpointEval { iter: it, report, path });
        }
    }

    let (stability_mean, stability_std) = stability(&checkpoints)?;
    let best = best_checkpoint(&checkpoints);
    Ok(RunRecord {
        target: target.domain_id.clone(),
        variant: spec.variant,
        seed: spec.seed,
        shots: spec.shots,
        iters,
        checkpoints,
        best,
        stability_mean,
        stability_std,
    })
}
