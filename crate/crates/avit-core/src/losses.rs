//! Training objectives: domain-balanced cross-entropy and the ensemble
//! diversity penalty.

use std::collections::BTreeMap;

use crate::config::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tape};

/// Floor applied to predicted probabilities before the log, so a saturated
/// softmax cannot produce an infinite loss.
pub const PROB_FLOOR: f64 = 1e-7;

/// Which terms the stage objective includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Source-only warmup: cross-entropy alone.
    Pretrain,
    /// Few-shot adaptation: cross-entropy plus the weighted diversity term.
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Host-side snapshot of one optimization step's objective.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cos: f64,
    pub total: f64,
    /// Mean cross-entropy per domain, keyed by ascending domain id.
    pub per_domain_ce: Vec<(usize, f64)>,
}

/// Per-domain (live, spoof) counts; usable in error messages.
fn domain_counts(labels: &[usize], domain_ids: &[usize]) -> BTreeMap<usize, (usize, usize)> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&l, &d) in labels.iter().zip(domain_ids) {
        let e = counts.entry(d).or_default();
        if l == 1 {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    counts
}

/// Cross-entropy over a domain-balanced batch, normalized by B*D where B is
/// the per-domain live count and D the number of domains present. Every
/// domain must contribute exactly B live and B spoof samples.
///
/// Returns the scalar loss node plus the per-domain mean cross-entropy
/// (an eager diagnostic, not part of the graph).
pub fn balanced_ce_node<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    labels: &[usize],
    domain_ids: &[usize],
) -> Result<(NodeId, Vec<(usize, f64)>)> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != NUM_CLASSES {
        return Err(Error::usage(format!(
            "balanced cross-entropy expects [n, {NUM_CLASSES}] logits, got {shape:?}"
        )));
    }
    if labels.len() != shape[0] || domain_ids.len() != shape[0] {
        return Err(Error::usage(format!(
            "{} logits rows vs {} labels / {} domain ids",
            shape[0],
            labels.len(),
            domain_ids.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::usage(format!("label {bad} out of range")));
    }

    let counts = domain_counts(labels, domain_ids);
    let live = counts.values().map(|&(l, _)| l).collect::<Vec<_>>();
    let balanced = counts.values().all(|&(l, s)| l == s && l > 0)
        && live.windows(2).all(|w| w[0] == w[1]);
    if !balanced {
        let detail = counts
            .iter()
            .map(|(d, (l, s))| format!("domain {d}: {l} live / {s} spoof"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::usage(format!(
            "batch is not domain-balanced ({detail})"
        )));
    }
    let b = live[0];
    let d = counts.len();

    let probs = tape.softmax_last(logits)?;
    let p_true = tape.select_per_row(probs, labels)?;
    let clamped = tape.clamp_min(p_true, T::from_f64(PROB_FLOOR));
    let logs = tape.log(clamped);
    let sum = tape.reduce_sum(logs);
    let loss = tape.scale(sum, T::from_f64(-1.0 / (b as f64 * d as f64)));

    let log_vals = tape.values(logs).to_vec();
    let mut per_domain: BTreeMap<usize, f64> = counts.keys().map(|&k| (k, 0.0)).collect();
    for (i, &dom) in domain_ids.iter().enumerate() {
        *per_domain.get_mut(&dom).unwrap() -= log_vals[i].as_f64();
    }
    let per_domain = per_domain
        .into_iter()
        .map(|(k, v)| (k, v / b as f64))
        .collect();
    Ok((loss, per_domain))
}

/// Mean over modules of the summed squared cosine similarity between every
/// unordered pair of member outputs. `modules[m]` holds the K member output
/// nodes of one adapter module, each shaped [rows, d].
///
/// Returns `None` when no module has two or more members (nothing to
/// diversify), which callers treat as a zero term.
pub fn cosine_diversity_node<T: Scalar>(
    tape: &mut Tape<T>,
    modules: &[Vec<NodeId>],
) -> Result<Option<NodeId>> {
    let mut acc: Option<NodeId> = None;
    let mut any_pair = false;
    for members in modules {
        for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                any_pair = true;
                let c = tape.row_cosine(members[i], members[j])?;
                let sq = tape.mul(c, c)?;
                let term = tape.reduce_mean(sq);
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
        }
    }
    if !any_pair {
        return Ok(None);
    }
    let total = tape.scale(acc.unwrap(), T::from_f64(1.0 / modules.len() as f64));
    Ok(Some(total))
}

/// Stage objective: cross-entropy, plus `cos_weight` times the diversity
/// term during finetuning. Returns the loss node to differentiate and an
/// eager breakdown for logging.
pub fn stage_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    adapter_outputs: &[Vec<NodeId>],
    labels: &[usize],
    domain_ids: &[usize],
    stage: Stage,
    cos_weight: f64,
) -> Result<(NodeId, LossBreakdown)> {
    let (ce_node, per_domain_ce) = balanced_ce_node(tape, logits, labels, domain_ids)?;
    let ce = tape.scalar(ce_node)?.as_f64();

    let cos_node = match stage {
        Stage::Pretrain => None,
        Stage::Finetune => cosine_diversity_node(tape, adapter_outputs)?,
    };
    match cos_node {
        None => Ok((
            ce_node,
            LossBreakdown {
                ce,
                cos: 0.0,
                total: ce,
                per_domain_ce,
            },
        )),
        Some(c) => {
            let cos = tape.scalar(c)?.as_f64();
            let weighted = tape.scale(c, T::from_f64(cos_weight));
            let total_node = tape.add(ce_node, weighted)?;
            let total = tape.scalar(total_node)?.as_f64();
            Ok((
                total_node,
                LossBreakdown {
                    ce,
                    cos,
                    total,
                    per_domain_ce,
                },
            ))
        }
    }
}
