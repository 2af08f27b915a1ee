//! Run configuration: model geometry, training-stage hyperparameters, and
//! synthetic-data domain specifications, loadable from TOML with a named
//! preset as the base and per-key overrides on top.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric precision of a run. Training defaults to f32; gradient checking
/// requires f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::usage(format!(
                "unknown precision '{other}' (expected f32 or f64)"
            ))),
        }
    }
}

pub const NUM_CLASSES: usize = 2;

/// Geometry and initialization of the adaptive ViT.
///
/// The adapter input width always equals `embed_dim`; `ensemble_size` 0
/// means no adapter modules at all (the plain-backbone variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    pub adapter_bottleneck: usize,
    pub ensemble_size: usize,
    pub fwt_enabled: bool,
    pub fwt_init_alpha: f64,
    pub fwt_init_beta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small geometry for fast CPU runs.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_hidden: 128,
            head_hidden: 64,
            adapter_bottleneck: 8,
            ensemble_size: 2,
            fwt_enabled: true,
            fwt_init_alpha: 0.3,
            fwt_init_beta: 0.5,
        }
    }

    /// Full-scale geometry (ViT-Base backbone).
    pub fn paper() -> Self {
        ModelConfig {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_hidden: 3072,
            head_hidden: 512,
            adapter_bottleneck: 64,
            ensemble_size: 2,
            fwt_enabled: true,
            fwt_init_alpha: 0.3,
            fwt_init_beta: 0.5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ModelConfig::desk()),
            "paper" => Ok(ModelConfig::paper()),
            other => Err(Error::usage(format!(
                "unknown preset '{other}' (expected desk or paper)"
            ))),
        }
    }

    /// Adapter input width n (always the embedding dim).
    pub fn adapter_in(&self) -> usize {
        self.embed_dim
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("model config: {msg} ({self:?})")))
            }
        };
        c(self.image_size > 0 && self.patch_size > 0, "zero image or patch size")?;
        c(
            self.image_size % self.patch_size == 0,
            "image_size must be divisible by patch_size",
        )?;
        c(self.channels > 0, "channels must be positive")?;
        c(
            self.embed_dim > 0 && self.depth > 0 && self.heads > 0,
            "embed_dim, depth, heads must be positive",
        )?;
        c(
            self.embed_dim % self.heads == 0,
            "embed_dim must be divisible by heads",
        )?;
        c(
            self.mlp_hidden > 0 && self.head_hidden > 0,
            "mlp_hidden and head_hidden must be positive",
        )?;
        // ensemble_size 0 is the adapter-free variant; when adapters exist
        // the bottleneck must be a strict reduction.
        if self.ensemble_size > 0 {
            c(
                self.adapter_bottleneck > 0 && self.adapter_bottleneck < self.adapter_in(),
                "adapter_bottleneck must satisfy 0 < m < n",
            )?;
        }
        Ok(())
    }
}

/// Hyperparameters of the two training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub pretrain_iters: usize,
    pub finetune_iters: usize,
    /// Checkpoint (and evaluation) interval during fine-tuning; must divide
    /// `finetune_iters`. 0 means "pick the divisor nearest iters/16".
    pub checkpoint_every: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Images per domain block in a batch (half live, half spoof).
    pub block_size: usize,
    pub cos_weight: f64,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            pretrain_iters: 100,
            finetune_iters: 1500,
            checkpoint_every: 0,
            lr: 1e-4,
            weight_decay: 1e-6,
            block_size: 8,
            cos_weight: 1.0,
            seed: 1,
        }
    }
}

impl StageConfig {
    /// Full-scale iteration counts.
    pub fn paper() -> Self {
        StageConfig {
            finetune_iters: 4000,
            ..StageConfig::default()
        }
    }

    /// Resolves `checkpoint_every == 0` to the divisor of `finetune_iters`
    /// nearest to iters/16 (the intended ~16 checkpoints per run).
    pub fn resolved(mut self) -> Result<Self> {
        if self.checkpoint_every == 0 {
            self.checkpoint_every = nearest_divisor(self.finetune_iters, 16);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn checkpoint_count(&self) -> usize {
        self.finetune_iters / self.checkpoint_every.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("stage config: {msg}")))
            }
        };
        c(self.pretrain_iters > 0, "pretrain_iters must be positive")?;
        c(self.finetune_iters > 0, "finetune_iters must be positive")?;
        // 0 is the "pick a default" placeholder, resolved before any run
        c(
            self.checkpoint_every == 0 || self.finetune_iters % self.checkpoint_every == 0,
            "checkpoint_every must divide finetune_iters",
        )?;
        c(
            self.block_size >= 2 && self.block_size % 2 == 0,
            "block_size must be even and >= 2",
        )?;
        c(self.lr > 0.0, "lr must be positive")?;
        c(self.weight_decay >= 0.0, "weight_decay must be non-negative")?;
        c(self.cos_weight >= 0.0, "cos_weight must be non-negative")?;
        Ok(())
    }
}

/// Divisor of `n` closest to `n/parts` (searching outward; ties prefer the
/// smaller divisor, i.e. more checkpoints).
fn nearest_divisor(n: usize, parts: usize) -> usize {
    let ideal = (n as f64 / parts as f64).round().max(1.0) as usize;
    for delta in 0..n {
        if ideal > delta && n % (ideal - delta) == 0 {
            return ideal - delta;
        }
        if ideal + delta <= n && n % (ideal + delta) == 0 {
            return ideal + delta;
        }
    }
    n
}

/// Class-distinguishing artifact stamped onto spoof images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    /// Low-frequency sinusoidal interference grid.
    GridCoarse,
    /// High-frequency interference grid.
    GridFine,
    /// Brightened border frame.
    Frame,
    /// Uniform per-channel color cast.
    ColorCast,
}

/// One synthetic capture domain: which spoof artifact it exhibits and the
/// nuisance transform (sensor color, illumination, resolution, noise)
/// applied to both classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: String,
    pub artifact: ArtifactKind,
    /// Phase of the periodic grid artifact, radians on both axes. Domains
    /// sharing a grid frequency at different phases present the same spoof
    /// cue with decorrelated pixel templates. Ignored by Frame/ColorCast.
    #[serde(default)]
    pub grid_phase: f64,
    #[serde(default)]
    pub color_shift: [f64; 3],
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub blur_radius: usize,
    #[serde(default = "one")]
    pub brightness: f64,
}

fn one() -> f64 {
    1.0
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domain_id.is_empty() {
            return Err(Error::config("domain_id must be non-empty".to_string()));
        }
        if self.noise_std < 0.0 || self.noise_std > 0.5 {
            return Err(Error::config(format!(
                "domain '{}': noise_std {} outside [0, 0.5]",
                self.domain_id, self.noise_std
            )));
        }
        if self.brightness <= 0.0 || self.brightness > 2.0 {
            return Err(Error::config(format!(
                "domain '{}': brightness {} outside (0, 2]",
                self.domain_id, self.brightness
            )));
        }
        if self.color_shift.iter().any(|c| c.abs() > 0.5) {
            return Err(Error::config(format!(
                "domain '{}': |color_shift| components must be <= 0.5",
                self.domain_id
            )));
        }
        if self.blur_radius > 4 {
            return Err(Error::config(format!(
                "domain '{}': blur_radius {} > 4 destroys the signal",
                self.domain_id, self.blur_radius
            )));
        }
        if !self.grid_phase.is_finite() {
            return Err(Error::config(format!(
                "domain '{}': grid_phase must be finite",
                self.domain_id
            )));
        }
        Ok(())
    }
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub channels: usize,
    pub count_per_class: usize,
    /// Amplitude of the random-phase background texture present in both
    /// classes. It puts genuine within-class variance into the frequency
    /// band the spoof artifact occupies, so cross-domain transfer is a
    /// measurable gap rather than a free lunch for any linear template.
    pub ambient_amp: f64,
    pub domains: Vec<DomainSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 32,
            channels: 3,
            count_per_class: 200,
            ambient_amp: 0.06,
            domains: default_domains(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count_per_class == 0 {
            return Err(Error::config("count_per_class must be >= 1".to_string()));
        }
        if self.channels != 3 {
            return Err(Error::config("generator requires 3 channels".to_string()));
        }
        if !(self.ambient_amp.is_finite() && self.ambient_amp >= 0.0) {
            return Err(Error::config(
                "ambient_amp must be finite and >= 0".to_string(),
            ));
        }
        if self.domains.len() < 2 {
            return Err(Error::config(
                "need at least 2 domains for cross-domain runs".to_string(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.domains {
            d.validate()?;
            if !seen.insert(d.domain_id.as_str()) {
                return Err(Error::config(format!(
                    "duplicate domain_id '{}'",
                    d.domain_id
                )));
            }
        }
        Ok(())
    }
}

/// Four capture domains sharing one spoof-artifact family (a periodic
/// recapture grid at two frequencies) under different nuisance transforms.
/// The grid phase rotates across domains that share a frequency, so the
/// spoof cue transfers as a concept while its pixel template decorrelates:
/// a model trained on any three domains generalizes to the fourth with the
/// right sign but an appreciable gap.
pub fn default_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            domain_id: "studio".to_string(),
            artifact: ArtifactKind::GridFine,
            grid_phase: 0.0,
            color_shift: [0.0, 0.0, 0.0],
            noise_std: 0.02,
            blur_radius: 0,
            brightness: 1.0,
        },
        DomainSpec {
            domain_id: "warmcam".to_string(),
            artifact: ArtifactKind::GridFine,
            grid_phase: 0.9,
            color_shift: [0.12, 0.02, -0.10],
            noise_std: 0.03,
            blur_radius: 0,
            brightness: 1.15,
        },
        DomainSpec {
            domain_id: "lowres".to_string(),
            artifact: ArtifactKind::GridCoarse,
            grid_phase: 0.0,
            color_shift: [-0.04, 0.0, 0.05],
            noise_std: 0.02,
            blur_radius: 1,
            brightness: 0.85,
        },
        DomainSpec {
            domain_id: "nightcast".to_string(),
            artifact: ArtifactKind::GridCoarse,
            grid_phase: 1.1,
            color_shift: [-0.10, -0.06, 0.12],
            noise_std: 0.05,
            blur_radius: 0,
            brightness: 0.7,
        },
    ]
}

/// Whole-run configuration as read from a TOML file. A `preset` name, when
/// present, supplies the base values; explicit sections override per key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub stage: StageConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(RunConfig {
            precision: Precision::F32,
            model: ModelConfig::preset(name)?,
            stage: if name == "paper" {
                StageConfig::paper()
            } else {
                StageConfig::default()
            },
            data: DataConfig::default(),
        })
    }

    /// Loads a config file on top of `base`: every key present in the file
    /// replaces the base value, everything else is inherited.
    pub fn load_over(base: RunConfig, toml_text: &str) -> Result<RunConfig> {
        let base_val =
            toml::Table::try_from(&base).map_err(|e| Error::config(format!("config: {e}")))?;
        let over: toml::Table = toml_text
            .parse()
            .map_err(|e| Error::config(format!("config parse: {e}")))?;
        let merged = merge_tables(base_val, over);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e| Error::config(format!("config: {e}")))?;
        Ok(cfg)
    }

    /// Applies one `section.key=value` override (the CLI `--set` flag).
    pub fn set_key(self, dotted: &str) -> Result<RunConfig> {
        let toml_text = dotted_to_toml(dotted)?;
        RunConfig::load_over(self, &toml_text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage.validate()?;
        self.data.validate()?;
        if self.data.image_size != self.model.image_size {
            return Err(Error::config(format!(
                "data image_size {} != model image_size {}",
                self.data.image_size, self.model.image_size
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Rewrites `section.key=value` into a TOML snippet, quoting values that are
/// not valid bare TOML scalars.
fn dotted_to_toml(arg: &str) -> Result<String> {
    let (path, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::usage(format!("--set expects section.key=value, got '{arg}'")))?;
    let (section, key) = path
        .rsplit_once('.')
        .ok_or_else(|| Error::usage(format!("--set path must be dotted, got '{path}'")))?;
    let value = if raw.parse::<f64>().is_ok() || raw == "true" || raw == "false" {
        raw.to_string()
    } else {
        format!("{raw:?}")
    };
    Ok(format!("[{section}]\n{key} = {value}\n"))
}

fn merge_tables(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(bt)), toml::Value::Table(ot)) => {
                let merged = merge_tables(std::mem::take(bt), ot);
                base.insert(k, toml::Value::Table(merged));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        RunConfig::preset("desk").unwrap().validate().unwrap();
    }

    #[test]
    fn preset_geometry() {
        let p = ModelConfig::paper();
        assert_eq!(p.num_patches(), 196);
        assert_eq!(p.tokens(), 197);
        assert_eq!(p.patch_dim(), 768);
        let d = ModelConfig::desk();
        assert_eq!(d.num_patches(), 16);
        assert_eq!(d.patch_dim(), 192);
        assert_eq!(d.head_dim(), 16);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut c = ModelConfig::desk();
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.adapter_bottleneck = 64; // == embed_dim, not a reduction
        assert!(c.validate().is_err());
        // adapter-free variant ignores the bottleneck entirely
        let mut c = ModelConfig::desk();
        c.ensemble_size = 0;
        c.adapter_bottleneck = 0;
        c.validate().unwrap();
    }

    #[test]
    fn checkpoint_interval_default_resolves_to_divisor() {
        // 1500/16 = 93.75 is not a divisor; nearest divisor is 100
        let s = StageConfig::default().resolved().unwrap();
        assert_eq!(s.checkpoint_every, 100);
        assert_eq!(s.checkpoint_count(), 15);
        // 4000/16 = 250 divides exactly
        let s = StageConfig::paper().resolved().unwrap();
        assert_eq!(s.checkpoint_every, 250);
        assert_eq!(s.checkpoint_count(), 16);
    }

    #[test]
    fn checkpoint_interval_must_divide() {
        let s = StageConfig {
            checkpoint_every: 93,
            ..StageConfig::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn toml_override_keeps_base_values() {
        let base = RunConfig::preset("desk").unwrap();
        let cfg = RunConfig::load_over(base, "[stage]\nfinetune_iters = 600\n").unwrap();
        assert_eq!(cfg.stage.finetune_iters, 600);
        assert_eq!(cfg.stage.pretrain_iters, 100); // inherited
        assert_eq!(cfg.model.embed_dim, 64); // untouched section
    }

    #[test]
    fn set_flag_parses_numbers_and_strings() {
        let cfg = RunConfig::default()
            .set_key("model.ensemble_size=1")
            .unwrap()
            .set_key("stage.lr=0.001")
            .unwrap();
        assert_eq!(cfg.model.ensemble_size, 1);
        assert!((cfg.stage.lr - 1e-3).abs() < 1e-12);
        assert!(RunConfig::default().set_key("nodot").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let base = RunConfig::preset("desk").unwrap();
        assert!(RunConfig::load_over(base, "[stage]\nlearning_rate = 1\n").is_err());
    }

    #[test]
    fn default_domains_are_valid_and_distinct() {
        let d = DataConfig::default();
        d.validate().unwrap();
        assert_eq!(d.domains.len(), 4);
        // domains share the grid artifact family but never a full transform
        for i in 0..d.domains.len() {
            for j in i + 1..d.domains.len() {
                let (a, b) = (&d.domains[i], &d.domains[j]);
                assert!(
                    a.artifact != b.artifact
                        || a.color_shift != b.color_shift
                        || a.brightness != b.brightness,
                    "{} and {} are indistinguishable",
                    a.domain_id,
                    b.domain_id
                );
            }
        }
    }

    #[test]
    fn round_trip_toml() {
        let cfg = RunConfig::preset("desk").unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::load_over(RunConfig::default(), &text).unwrap();
        assert_eq!(cfg, back);
    }
}
