//! End-to-end gradient verification: compares every analytic parameter
//! gradient of the full training loss (balanced CE + weighted cosine
//! diversity, FWT active with fixed noise) against central finite
//! differences on one small two-domain batch. Runs in f64 only; f32 FD
//! noise would drown the tolerances.

use crate::config::{default_domains, DataConfig, ModelConfig};
use crate::data::{few_shot_split, generate_domain, sample_batch, Batch};
use crate::error::Result;
use crate::losses::{stage_loss, Stage};
use crate::model::{AdaptiveVit, FreezePolicy, FwtNoise, Mode};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::params::ParamGroup;
use crate::tensor::tape::Tape;

const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-3;
/// Weight on the diversity term: chosen nonzero so the check exercises
/// both loss branches.
const COS_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub tol: f64,
    /// Per-tensor coordinate budget; tensors at or under it are checked
    /// exhaustively, larger ones on a seeded sample of this many entries.
    pub max_coords: usize,
    /// Negative control: deliberately corrupts one analytic gradient so a
    /// healthy run of the checker must fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 7,
            tol: 1e-4,
            max_coords: 24,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordFailure {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub per_group: Vec<(ParamGroup, f64)>,
    pub failures: Vec<CoordFailure>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "checked {} coordinates, max rel err {:.3e} (worst: {}), tol {:.0e}",
            self.coords_checked, self.max_rel_err, self.worst_tensor, self.tol
        )?;
        for (g, e) in &self.per_group {
            writeln!(f, "  {:<10} max rel err {:.3e}", g.name(), e)?;
        }
        for c in &self.failures {
            writeln!(
                f,
                "  FAIL {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                c.tensor, c.index, c.analytic, c.numeric, c.rel_err
            )?;
        }
        Ok(())
    }
}

/// One deterministic two-domain batch (a source pair plus a shot pair from
/// a second domain) sized to the model's input geometry.
fn fixture_batch(cfg: &ModelConfig, seed: u64) -> Result<Batch<f64>> {
    let mut domains = default_domains();
    domains.truncate(2);
    let data = DataConfig {
        image_size: cfg.image_size,
        channels: cfg.channels,
        count_per_class: 4,
        domains,
    };
    let source = generate_domain::<f64>(&data.domains[0], &data, seed)?;
    let target = generate_domain::<f64>(&data.domains[1], &data, seed)?;
    let split = few_shot_split(&target, 2, seed)?;
    let mut rng = stream_rng(derive_seed(seed, &["gradcheck", "batch"]), Stream::Check);
    sample_batch(&[&source], Some(&split), 2, false, &mut rng)
}

fn loss_value(model: &AdaptiveVit<f64>, batch: &Batch<f64>, noise: &FwtNoise<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch.images, batch.len(), Mode::Train, Some(noise))?;
    let (loss, _) = stage_loss(
        &mut tape,
        out.logits,
        &out.adapter_outputs,
        &batch.labels,
        &batch.domain_ids,
        Stage::Finetune,
        COS_WEIGHT,
    )?;
    Ok(tape.scalar(loss)?.as_f64())
}

pub fn gradcheck_model(cfg: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut model = AdaptiveVit::<f64>::new(cfg.clone(), opts.seed)?;
    model.apply_freeze_policy(FreezePolicy::Full)?;
    let batch = fixture_batch(cfg, opts.seed)?;
    let mut noise_rng = stream_rng(derive_seed(opts.seed, &["gradcheck", "fwt"]), Stream::Check);
    let noise = FwtNoise::sample(cfg, batch.len(), &mut noise_rng);

    model.store.zero_grad();
    {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch.images, batch.len(), Mode::Train, Some(&noise))?;
        let (loss, _) = stage_loss(
            &mut tape,
            out.logits,
            &out.adapter_outputs,
            &batch.labels,
            &batch.domain_ids,
            Stage::Finetune,
            COS_WEIGHT,
        )?;
        tape.backward(loss, &mut model.store)?;
    }

    if opts.corrupt {
        // shift the whole first tensor so any sampled coordinate trips
        let id = model.store.ids().next().expect("model has parameters");
        if let Some(g) = model.store.get_mut(id).grad.as_mut() {
            for v in g.iter_mut() {
                *v += 1.0;
            }
        }
    }

    let ids: Vec<_> = model.store.ids().collect();
    let mut coord_rng = stream_rng(derive_seed(opts.seed, &["gradcheck", "coords"]), Stream::Check);
    let mut report = GradcheckReport {
        coords_checked: 0,
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        per_group: ParamGroup::ALL.iter().map(|&g| (g, 0.0)).collect(),
        failures: Vec::new(),
        tol: opts.tol,
    };

    for id in ids {
        let (name, group, len) = {
            let p = model.store.get(id);
            (p.name.clone(), p.group, p.values.len())
        };
        let coords: Vec<usize> = if len <= opts.max_coords {
            (0..len).collect()
        } else {
            let mut picked = rand::seq::index::sample(&mut coord_rng, len, opts.max_coords).into_vec();
            picked.sort_unstable();
            picked
        };
        for c in coords {
            let analytic = model
                .store
                .get(id)
                .grad
                .as_ref()
                .map_or(0.0, |g| g[c]);
            // fourth-order stencil: the plain central difference leaves an
            // f'''·h²/6 residue that the cosine term blows past tolerance on
            // near-zero-norm rows (its derivatives grow like 1/‖row‖ powers)
            let orig = model.store.get(id).values[c];
            let mut probe = |t: f64| -> Result<f64> {
                model.store.get_mut(id).values[c] = orig + t;
                loss_value(&model, &batch, &noise)
            };
            let f1 = probe(FD_STEP)?;
            let f2 = probe(2.0 * FD_STEP)?;
            let fm1 = probe(-FD_STEP)?;
            let fm2 = probe(-2.0 * FD_STEP)?;
            model.store.get_mut(id).values[c] = orig;
            let numeric = (fm2 - 8.0 * fm1 + 8.0 * f1 - f2) / (12.0 * FD_STEP);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);

            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_tensor = name.clone();
            }
            let slot = report
                .per_group
                .iter_mut()
                .find(|(g, _)| *g == group)
                .expect("every group is listed");
            slot.1 = slot.1.max(rel);
            if rel >= opts.tol {
                report.failures.push(CoordFailure {
                    tensor: name.clone(),
                    index: c,
                    analytic,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smallest geometry that still exercises every module kind.
    fn micro() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_hidden: 24,
            head_hidden: 12,
            adapter_bottleneck: 4,
            ensemble_size: 2,
            fwt_enabled: true,
            fwt_init_alpha: 0.3,
            fwt_init_beta: 0.5,
        }
    }

    #[test]
    fn micro_config_passes_exhaustively() {
        let opts = GradcheckOptions {
            max_coords: usize::MAX,
            ..GradcheckOptions::default()
        };
        let report = gradcheck_model(&micro(), &opts).unwrap();
        assert!(report.passed(), "{report}");
        // exhaustive means every parameter coordinate was compared
        let model = AdaptiveVit::<f64>::new(micro(), 0).unwrap();
        let total: usize = model.store.iter().map(|(_, p)| p.values.len()).sum();
        assert_eq!(report.coords_checked, total);
        eprintln!("exhaustive max rel err: {:.3e}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-4);
    }

    #[test]
    fn single_member_and_adapterless_variants_pass() {
        let k1 = ModelConfig {
            ensemble_size: 1,
            ..micro()
        };
        let opts = GradcheckOptions {
            max_coords: 6,
            ..GradcheckOptions::default()
        };
        let report = gradcheck_model(&k1, &opts).unwrap();
        assert!(report.passed(), "{report}");

        // plain backbone: no adapters, no FWT, CE-only loss path
        let k0 = ModelConfig {
            ensemble_size: 0,
            fwt_enabled: false,
            ..micro()
        };
        let report = gradcheck_model(&k0, &opts).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn desk_geometry_passes_on_sampled_coordinates() {
        let opts = GradcheckOptions {
            max_coords: 3,
            ..GradcheckOptions::default()
        };
        let report = gradcheck_model(&ModelConfig::desk(), &opts).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_gradient_is_caught_and_named() {
        let opts = GradcheckOptions {
            corrupt: true,
            max_coords: 4,
            ..GradcheckOptions::default()
        };
        let report = gradcheck_model(&micro(), &opts).unwrap();
        assert!(!report.passed());
        assert!(report.failures.iter().all(|f| f.tensor == "embed.patch.w"));
        assert!(!report.failures.is_empty());
    }

    #[test]
    fn report_is_deterministic_for_a_seed() {
        let opts = GradcheckOptions {
            max_coords: 5,
            ..GradcheckOptions::default()
        };
        let a = gradcheck_model(&micro(), &opts).unwrap();
        let b = gradcheck_model(&micro(), &opts).unwrap();
        assert_eq!(a.max_rel_err, b.max_rel_err);
        assert_eq!(a.coords_checked, b.coords_checked);
        assert_eq!(a.worst_tensor, b.worst_tensor);
    }
}
