//! The adaptive vision transformer: a pre-norm ViT backbone with two
//! ensemble adapter modules per block, an optional feature-wise
//! transformation (FWT) layer per block, and a two-layer MLP head.
//!
//! Every parameter lives in a [`ParamStore`]; the forward pass (see
//! [`forward`]) stages them onto a fresh tape each call.

mod forward;

pub use forward::{patchify_one, ForwardOut, FwtNoise, Mode};

use crate::config::{ModelConfig, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::{fill_normal, stream_rng, Rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::params::{ParamGroup, ParamId, ParamStore};

/// Which parameters train in a given stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Only the MLP head (pre-training stage).
    HeadOnly,
    /// Adapters, FWT layers, and the head (fine-tuning stage).
    AdaptersAndFwt,
    /// Everything in the last k transformer blocks, plus the head.
    LastKLayers(usize),
    /// Everything.
    Full,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AdapterIds {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub attn: AttnIds,
    pub mod1: Vec<AdapterIds>,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub mod2: Vec<AdapterIds>,
    pub fwt: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub(crate) struct ModelIds {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_g: ParamId,
    pub final_b: ParamId,
    pub head_fc1_w: ParamId,
    pub head_fc1_b: ParamId,
    pub head_fc2_w: ParamId,
    pub head_fc2_b: ParamId,
}

/// Exact per-group parameter totals for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub backbone: u64,
    pub adapters: u64,
    pub fwt: u64,
    pub head: u64,
}

impl ParamCounts {
    pub fn total(&self) -> u64 {
        self.backbone + self.adapters + self.fwt + self.head
    }

    pub fn group(&self, g: ParamGroup) -> u64 {
        match g {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Adapters => self.adapters,
            ParamGroup::Fwt => self.fwt,
            ParamGroup::Head => self.head,
        }
    }
}

/// Closed-form parameter totals per group.
///
/// Adapters: 2·L·K·(2nm + m + n). FWT: 2·D·L (when enabled).
pub fn count_params(cfg: &ModelConfig) -> ParamCounts {
    let (d, l, p) = (
        cfg.embed_dim as u64,
        cfg.depth as u64,
        cfg.num_patches() as u64,
    );
    let (n, m, k) = (
        cfg.adapter_in() as u64,
        cfg.adapter_bottleneck as u64,
        cfg.ensemble_size as u64,
    );
    let mlp = cfg.mlp_hidden as u64;
    let hh = cfg.head_hidden as u64;
    let pd = cfg.patch_dim() as u64;

    let per_block = 4 * d                       // two layer norms
        + 4 * (d * d + d)                       // q, k, v, o projections
        + (d * mlp + mlp + mlp * d + d); // MLP
    let backbone = (pd * d + d) + d + p * d + l * per_block + 2 * d;
    let adapters = 2 * l * k * (2 * n * m + m + n);
    let fwt = if cfg.fwt_enabled { 2 * d * l } else { 0 };
    let head = d * hh + hh + hh * NUM_CLASSES as u64 + NUM_CLASSES as u64;
    ParamCounts {
        backbone,
        adapters,
        fwt,
        head,
    }
}

/// The model: configuration, parameter store, and the id map into it.
#[derive(Debug)]
pub struct AdaptiveVit<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub(crate) ids: ModelIds,
    /// 1-based inclusive block range whose adapter modules are bypassed.
    ablation: Option<(usize, usize)>,
}

impl<T: Scalar> AdaptiveVit<T> {
    /// Builds and initializes a model. Initialization draws come from the
    /// seed's init stream in registration order, so two models with the same
    /// (config, seed) are bit-identical.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let mut store = ParamStore::new();
        let d = cfg.embed_dim;
        let (n, m) = (cfg.adapter_in(), cfg.adapter_bottleneck);

        let normal = |store: &mut ParamStore<T>,
                          name: String,
                          shape: Vec<usize>,
                          std: f64,
                          group: ParamGroup,
                          rng: &mut Rng| {
            let len: usize = shape.iter().product();
            let mut v = vec![T::zero(); len];
            fill_normal(rng, std, &mut v);
            store.add(name, shape, v, group)
        };
        let zeros = |store: &mut ParamStore<T>, name: String, shape: Vec<usize>, group| {
            let len: usize = shape.iter().product();
            store.add(name, shape, vec![T::zero(); len], group)
        };
        let filled = |store: &mut ParamStore<T>, name: String, shape: Vec<usize>, v: f64, group| {
            let len: usize = shape.iter().product();
            store.add(name, shape, vec![T::from_f64(v); len], group)
        };

        const W_STD: f64 = 0.02;
        const ADAPTER_DOWN_STD: f64 = 1e-3;
        let bb = ParamGroup::Backbone;

        let patch_w = normal(
            &mut store,
            "embed.patch.w".into(),
            vec![cfg.patch_dim(), d],
            W_STD,
            bb,
            &mut rng,
        );
        let patch_b = zeros(&mut store, "embed.patch.b".into(), vec![d], bb);
        let cls = normal(&mut store, "embed.cls".into(), vec![d], W_STD, bb, &mut rng);
        let pos = normal(
            &mut store,
            "embed.pos".into(),
            vec![cfg.num_patches(), d],
            W_STD,
            bb,
            &mut rng,
        );

        let adapter = |store: &mut ParamStore<T>, prefix: String, rng: &mut Rng| {
            // near-zero init made exact: the up projection starts at zero so
            // the adapter is the identity at initialization
            let down_w = normal(
                store,
                format!("{prefix}.down.w"),
                vec![n, m],
                ADAPTER_DOWN_STD,
                ParamGroup::Adapters,
                rng,
            );
            let down_b = zeros(store, format!("{prefix}.down.b"), vec![m], ParamGroup::Adapters);
            let up_w = zeros(store, format!("{prefix}.up.w"), vec![m, n], ParamGroup::Adapters);
            let up_b = zeros(store, format!("{prefix}.up.b"), vec![n], ParamGroup::Adapters);
            AdapterIds {
                down_w,
                down_b,
                up_w,
                up_b,
            }
        };

        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let ln1_g = filled(&mut store, format!("block{l}.ln1.g"), vec![d], 1.0, bb);
            let ln1_b = zeros(&mut store, format!("block{l}.ln1.b"), vec![d], bb);
            let proj = |store: &mut ParamStore<T>, which: &str, rng: &mut Rng| {
                let w = normal(
                    store,
                    format!("block{l}.attn.{which}.w"),
                    vec![d, d],
                    W_STD,
                    bb,
                    rng,
                );
                let b = zeros(store, format!("block{l}.attn.{which}.b"), vec![d], bb);
                (w, b)
            };
            let (q_w, q_b) = proj(&mut store, "q", &mut rng);
            let (k_w, k_b) = proj(&mut store, "k", &mut rng);
            let (v_w, v_b) = proj(&mut store, "v", &mut rng);
            let (o_w, o_b) = proj(&mut store, "o", &mut rng);
            let mod1 = (0..cfg.ensemble_size)
                .map(|a| adapter(&mut store, format!("block{l}.mod1.ad{a}"), &mut rng))
                .collect();
            let ln2_g = filled(&mut store, format!("block{l}.ln2.g"), vec![d], 1.0, bb);
            let ln2_b = zeros(&mut store, format!("block{l}.ln2.b"), vec![d], bb);
            let fc1_w = normal(
                &mut store,
                format!("block{l}.mlp.fc1.w"),
                vec![d, cfg.mlp_hidden],
                W_STD,
                bb,
                &mut rng,
            );
            let fc1_b = zeros(&mut store, format!("block{l}.mlp.fc1.b"), vec![cfg.mlp_hidden], bb);
            let fc2_w = normal(
                &mut store,
                format!("block{l}.mlp.fc2.w"),
                vec![cfg.mlp_hidden, d],
                W_STD,
                bb,
                &mut rng,
            );
            let fc2_b = zeros(&mut store, format!("block{l}.mlp.fc2.b"), vec![d], bb);
            let mod2 = (0..cfg.ensemble_size)
                .map(|a| adapter(&mut store, format!("block{l}.mod2.ad{a}"), &mut rng))
                .collect();
            let fwt = if cfg.fwt_enabled {
                let a = filled(
                    &mut store,
                    format!("block{l}.fwt.alpha"),
                    vec![1, d],
                    cfg.fwt_init_alpha,
                    ParamGroup::Fwt,
                );
                let b = filled(
                    &mut store,
                    format!("block{l}.fwt.beta"),
                    vec![1, d],
                    cfg.fwt_init_beta,
                    ParamGroup::Fwt,
                );
                Some((a, b))
            } else {
                None
            };
            blocks.push(BlockIds {
                ln1_g,
                ln1_b,
                attn: AttnIds {
                    q_w,
                    q_b,
                    k_w,
                    k_b,
                    v_w,
                    v_b,
                    o_w,
                    o_b,
                },
                mod1,
                ln2_g,
                ln2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
                mod2,
                fwt,
            });
        }

        let final_g = filled(&mut store, "final.ln.g".into(), vec![d], 1.0, bb);
        let final_b = zeros(&mut store, "final.ln.b".into(), vec![d], bb);
        let head_fc1_w = normal(
            &mut store,
            "head.fc1.w".into(),
            vec![d, cfg.head_hidden],
            W_STD,
            ParamGroup::Head,
            &mut rng,
        );
        let head_fc1_b = zeros(
            &mut store,
            "head.fc1.b".into(),
            vec![cfg.head_hidden],
            ParamGroup::Head,
        );
        let head_fc2_w = normal(
            &mut store,
            "head.fc2.w".into(),
            vec![cfg.head_hidden, NUM_CLASSES],
            W_STD,
            ParamGroup::Head,
            &mut rng,
        );
        let head_fc2_b = zeros(
            &mut store,
            "head.fc2.b".into(),
            vec![NUM_CLASSES],
            ParamGroup::Head,
        );

        Ok(AdaptiveVit {
            cfg,
            store,
            ids: ModelIds {
                patch_w,
                patch_b,
                cls,
                pos,
                blocks,
                final_g,
                final_b,
                head_fc1_w,
                head_fc1_b,
                head_fc2_w,
                head_fc2_b,
            },
            ablation: None,
        })
    }

    /// Sets trainable flags per the policy. Gradients only ever flow to
    /// trainable parameters, so this also bounds backward work.
    pub fn apply_freeze_policy(&mut self, policy: FreezePolicy) -> Result<()> {
        match policy {
            FreezePolicy::HeadOnly => self
                .store
                .set_trainable_where(|p| p.group == ParamGroup::Head),
            FreezePolicy::AdaptersAndFwt => self.store.set_trainable_where(|p| {
                matches!(
                    p.group,
                    ParamGroup::Adapters | ParamGroup::Fwt | ParamGroup::Head
                )
            }),
            FreezePolicy::Full => self.store.set_trainable_where(|_| true),
            FreezePolicy::LastKLayers(k) => {
                let depth = self.cfg.depth;
                if k > depth {
                    return Err(Error::config(format!(
                        "LastKLayers({k}) exceeds depth {depth}"
                    )));
                }
                let prefixes: Vec<String> =
                    (depth - k..depth).map(|l| format!("block{l}.")).collect();
                self.store.set_trainable_where(|p| {
                    p.group == ParamGroup::Head
                        || prefixes.iter().any(|pre| p.name.starts_with(pre))
                });
            }
        }
        Ok(())
    }

    /// Bypasses both adapter modules in blocks `first..=last` (1-based).
    pub fn ablate_adapters(&mut self, first: usize, last: usize) -> Result<()> {
        if first < 1 || last > self.cfg.depth || first > last {
            return Err(Error::usage(format!(
                "ablation range {first}..={last} invalid for depth {}",
                self.cfg.depth
            )));
        }
        self.ablation = Some((first, last));
        Ok(())
    }

    pub fn clear_ablation(&mut self) {
        self.ablation = None;
    }

    pub fn ablation(&self) -> Option<(usize, usize)> {
        self.ablation
    }

    pub(crate) fn block_ablated(&self, index0: usize) -> bool {
        match self.ablation {
            Some((f, l)) => f <= index0 + 1 && index0 + 1 <= l,
            None => false,
        }
    }
}
