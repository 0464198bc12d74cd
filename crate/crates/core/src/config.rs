//! Run configuration: a single TOML file with sections mirroring the
//! subsystem modules (`[synthdata]`, `[backends]`, `[networks]`, `[losses]`,
//! `[trainer]`, `[metrics]`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture hyper-parameters for every trainable component.
///
/// Derived quantities follow from the channel lists: `fnid_depth` is the
/// number of stride-2 encoder convs, `n_f`/`n_a` are the decoder pyramid
/// lengths, `n_s` the number of fusion blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub resolution: usize,
    /// Output channels of each stride-2 FNID encoder conv, shallow to deep.
    pub fnid_channels: Vec<usize>,
    /// Output channels of each FNID decoder stage, coarse to fine.
    pub fnid_dec_channels: Vec<usize>,
    /// Output channels of each stride-2 NFA encoder conv.
    pub nfa_channels: Vec<usize>,
    /// Channel width of the NFA residual blocks (the Z^nfa width).
    pub nfa_res_channels: usize,
    pub nfa_resblocks: usize,
    /// Output channels of each NFA decoder stage, coarse to fine.
    pub nfa_dec_channels: Vec<usize>,
    /// Output channels of each fusion block, coarse to fine.
    pub fusion_channels: Vec<usize>,
    /// Per-scale patch discriminator conv widths.
    pub disc_channels: Vec<usize>,
    pub disc_scales: usize,
    pub id_dim: usize,
    pub pose_dim: usize,
    pub exp_dim: usize,
    pub advhead_hidden: usize,
    /// Ablation toggle: concatenate encoder shallow features into the
    /// decoding path (identity-leak study). Off in the full model.
    pub use_skip_connections: bool,
    /// Ablation toggle: build the NFA encoder/decoder branch.
    pub use_nfa: bool,
}

impl ModelConfig {
    pub fn fnid_depth(&self) -> usize {
        self.fnid_channels.len()
    }

    /// FNID pyramid length.
    pub fn n_f(&self) -> usize {
        self.fnid_dec_channels.len()
    }

    pub fn nfa_down_depth(&self) -> usize {
        self.nfa_channels.len()
    }

    /// NFA pyramid length (0 when the branch is disabled).
    pub fn n_a(&self) -> usize {
        if self.use_nfa {
            self.nfa_dec_channels.len()
        } else {
            0
        }
    }

    /// Number of fusion blocks.
    pub fn n_s(&self) -> usize {
        self.fusion_channels.len()
    }

    pub fn code_channels(&self) -> usize {
        *self.fnid_channels.last().expect("validated non-empty")
    }

    /// Spatial side of Z^fnid.
    pub fn code_side(&self) -> usize {
        self.resolution >> self.fnid_depth()
    }

    /// Spatial side of Z^nfa.
    pub fn nfa_side(&self) -> usize {
        self.resolution >> self.nfa_down_depth()
    }

    pub fn reghead_dim(&self) -> usize {
        self.pose_dim + self.exp_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("[networks] {msg}")));
        if self.fnid_channels.is_empty() {
            return fail("fnid_channels must not be empty".into());
        }
        let depth = self.fnid_depth();
        if self.resolution == 0 || self.resolution % (1 << depth) != 0 {
            return fail(format!(
                "resolution {} not divisible by 2^fnid_depth = {}",
                self.resolution,
                1 << depth
            ));
        }
        if self.n_f() != depth - 1 {
            return fail(format!(
                "fnid_dec_channels length {} must be fnid_depth - 1 = {}",
                self.n_f(),
                depth - 1
            ));
        }
        if self.n_s() < self.n_f() {
            return fail(format!("n_s = {} must be >= n_f = {}", self.n_s(), self.n_f()));
        }
        if self.use_nfa {
            if self.nfa_dec_channels.is_empty() || self.nfa_channels.is_empty() {
                return fail("NFA branch enabled but channel lists are empty".into());
            }
            let n_a = self.nfa_dec_channels.len();
            if n_a >= self.n_f() {
                return fail(format!("n_a = {} must be < n_f = {}", n_a, self.n_f()));
            }
            let down = self.nfa_down_depth();
            if down >= depth {
                return fail(format!(
                    "nfa_down_depth {down} must be < fnid_depth {depth} so \
                     Z^nfa stays spatially larger than Z^fnid"
                ));
            }
            if down != n_a && down != n_a + 1 {
                return fail(format!(
                    "nfa_down_depth {down} must be n_a or n_a + 1 (n_a = {n_a}) so the \
                     NFA pyramid lands on the FNID pyramid resolutions"
                ));
            }
            if self.nfa_res_channels == 0 || self.nfa_resblocks == 0 {
                return fail("nfa_res_channels and nfa_resblocks must be positive".into());
            }
        }
        if self.disc_scales == 0 || self.disc_channels.is_empty() {
            return fail("discriminator needs at least one scale and one conv".into());
        }
        let coarsest = self.resolution >> (self.disc_scales - 1);
        if coarsest >> self.disc_channels.len() == 0 {
            return fail(format!(
                "discriminator too deep: {} stride-2 convs on a {}px coarsest scale",
                self.disc_channels.len(),
                coarsest
            ));
        }
        if self.id_dim == 0 || self.pose_dim == 0 || self.exp_dim == 0 || self.advhead_hidden == 0 {
            return fail("id_dim, pose_dim, exp_dim, advhead_hidden must be positive".into());
        }
        if self.code_side() == 0 {
            return fail("fnid encoder reduces the image below 1px".into());
        }
        Ok(())
    }

    /// Architecture of the original 256px model.
    pub fn paper() -> Self {
        ModelConfig {
            resolution: 256,
            fnid_channels: vec![32, 64, 128, 256, 512, 1024, 1024],
            fnid_dec_channels: vec![1024, 512, 256, 128, 64, 32],
            nfa_channels: vec![32, 64, 128, 256],
            nfa_res_channels: 512,
            nfa_resblocks: 3,
            nfa_dec_channels: vec![256, 128, 64, 32],
            fusion_channels: vec![1024, 1024, 512, 256, 128, 64, 32],
            disc_channels: vec![64, 128, 256, 512],
            disc_scales: 3,
            id_dim: 512,
            pose_dim: 3,
            exp_dim: 64,
            advhead_hidden: 1024,
            use_skip_connections: false,
            use_nfa: true,
        }
    }

    /// 64px configuration sized for CPU training; preserves every structural
    /// relation of the full model (n_a < n_f, Z^nfa spatially larger than
    /// Z^fnid, n_s = n_f + 1).
    pub fn desk() -> Self {
        ModelConfig {
            resolution: 64,
            fnid_channels: vec![32, 64, 128, 256, 256],
            fnid_dec_channels: vec![128, 64, 32, 16],
            nfa_channels: vec![32, 64, 128],
            nfa_res_channels: 128,
            nfa_resblocks: 3,
            nfa_dec_channels: vec![64, 32],
            fusion_channels: vec![128, 128, 64, 32, 16],
            disc_channels: vec![32, 64, 128, 256],
            disc_scales: 3,
            id_dim: 512,
            pose_dim: 3,
            exp_dim: 64,
            advhead_hidden: 256,
            use_skip_connections: false,
            use_nfa: true,
        }
    }

    /// Miniature configuration for unit tests and gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            resolution: 16,
            fnid_channels: vec![6, 10, 12],
            fnid_dec_channels: vec![10, 8],
            nfa_channels: vec![6, 10],
            nfa_res_channels: 10,
            nfa_resblocks: 1,
            nfa_dec_channels: vec![8],
            fusion_channels: vec![10, 8, 6],
            disc_channels: vec![6, 8],
            disc_scales: 2,
            id_dim: 12,
            pose_dim: 3,
            exp_dim: 5,
            advhead_hidden: 16,
            use_skip_connections: false,
            use_nfa: true,
        }
    }
}

/// The beta coefficients of the composite training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta_adv_fnid: f64,
    pub beta_rec: f64,
    pub beta_attr: f64,
    pub beta_glb: f64,
    pub beta_fnid: f64,
    pub beta_nfa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_adv_fnid: 0.1,
            beta_rec: 0.2,
            beta_attr: 0.5,
            beta_glb: 5.0,
            beta_fnid: 2.0,
            beta_nfa: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("beta_adv_fnid", self.beta_adv_fnid),
            ("beta_rec", self.beta_rec),
            ("beta_attr", self.beta_attr),
            ("beta_glb", self.beta_glb),
            ("beta_fnid", self.beta_fnid),
            ("beta_nfa", self.beta_nfa),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "[losses] {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_identities: usize,
    pub resolution: usize,
    pub pose_dim: usize,
    pub exp_dim: usize,
    /// Probability that a sampled training pair is a self-swap.
    pub p_self: f64,
    /// Seed for the identity-pattern / texture tables (not the per-run
    /// sampling stream).
    pub pattern_seed: u64,
    /// When set, `train` exports the eval split as PNGs plus a sidecar
    /// metadata file under this directory.
    pub export_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_identities: 32,
            resolution: 64,
            pose_dim: 3,
            exp_dim: 64,
            p_self: 0.5,
            pattern_seed: 0x5eed_fa11,
            export_dir: None,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_self) {
            return Err(Error::Config(format!(
                "[synthdata] p_self must be in [0, 1], got {}",
                self.p_self
            )));
        }
        if self.num_identities < 2 {
            return Err(Error::Config(
                "[synthdata] num_identities must be at least 2".into(),
            ));
        }
        if self.resolution < 16 {
            return Err(Error::Config(format!(
                "[synthdata] resolution {} too small (minimum 16)",
                self.resolution
            )));
        }
        if self.pose_dim != 3 {
            return Err(Error::Config("[synthdata] pose_dim must be 3".into()));
        }
        if self.exp_dim == 0 {
            return Err(Error::Config("[synthdata] exp_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Learned,
}

/// Selection of the pluggable external-model backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsConfig {
    pub id_backend: BackendKind,
    pub pose_backend: BackendKind,
    pub seg_backend: BackendKind,
    /// Seed of the training-side ID embedding.
    pub id_seed: u64,
    /// Seed of the evaluation-side ID embedding (a distinct instance).
    pub eval_id_seed: u64,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            id_backend: BackendKind::Oracle,
            pose_backend: BackendKind::Oracle,
            seg_backend: BackendKind::Oracle,
            id_seed: 101,
            eval_id_seed: 202,
        }
    }
}

/// Optimization loop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_advhead: f64,
    /// Ablation toggle for the Z^fnid regularization heads.
    pub regularize_fnid: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 2000,
            batch_size: 2,
            seed: 17,
            checkpoint_every: 500,
            lr_generator: 1e-4,
            lr_discriminator: 4e-4,
            lr_advhead: 1e-4,
            regularize_fnid: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "[trainer] steps and batch_size must be positive".into(),
            ));
        }
        for (name, lr) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_advhead", self.lr_advhead),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("[trainer] {name} must be > 0, got {lr}")));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("[trainer] checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Evaluation protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// N^c: number of eval sources; the grid has N^c * (N^c - 1) swaps.
    pub num_sources: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { num_sources: 8 }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sources < 3 {
            return Err(Error::Config(format!(
                "[metrics] num_sources must be at least 3 (identity consistency needs \
                 two swaps per source), got {}",
                self.num_sources
            )));
        }
        Ok(())
    }
}

/// On-disk `[networks]` section: a preset name plus optional overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworksSection {
    pub preset: Option<String>,
    pub resolution: Option<usize>,
    pub fnid_channels: Option<Vec<usize>>,
    pub fnid_dec_channels: Option<Vec<usize>>,
    pub nfa_channels: Option<Vec<usize>>,
    pub nfa_res_channels: Option<usize>,
    pub nfa_resblocks: Option<usize>,
    pub nfa_dec_channels: Option<Vec<usize>>,
    pub fusion_channels: Option<Vec<usize>>,
    pub disc_channels: Option<Vec<usize>>,
    pub disc_scales: Option<usize>,
    pub id_dim: Option<usize>,
    pub advhead_hidden: Option<usize>,
    pub use_skip_connections: Option<bool>,
    pub use_nfa: Option<bool>,
}

impl NetworksSection {
    fn resolve(&self, pose_dim: usize, exp_dim: usize) -> Result<ModelConfig> {
        let mut model = match self.preset.as_deref() {
            None | Some("desk") => ModelConfig::desk(),
            Some("paper") => ModelConfig::paper(),
            Some("tiny") => ModelConfig::tiny(),
            Some(other) => {
                return Err(Error::Config(format!(
                    "[networks] unknown preset '{other}' (expected desk, paper or tiny)"
                )))
            }
        };
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = self.$field.clone() {
                    model.$field = v;
                }
            };
        }
        take!(resolution);
        take!(fnid_channels);
        take!(fnid_dec_channels);
        take!(nfa_channels);
        take!(nfa_res_channels);
        take!(nfa_resblocks);
        take!(nfa_dec_channels);
        take!(fusion_channels);
        take!(disc_channels);
        take!(disc_scales);
        take!(id_dim);
        take!(advhead_hidden);
        take!(use_skip_connections);
        take!(use_nfa);
        model.pose_dim = pose_dim;
        model.exp_dim = exp_dim;
        model.validate()?;
        Ok(model)
    }

    fn from_model(model: &ModelConfig) -> Self {
        NetworksSection {
            preset: None,
            resolution: Some(model.resolution),
            fnid_channels: Some(model.fnid_channels.clone()),
            fnid_dec_channels: Some(model.fnid_dec_channels.clone()),
            nfa_channels: Some(model.nfa_channels.clone()),
            nfa_res_channels: Some(model.nfa_res_channels),
            nfa_resblocks: Some(model.nfa_resblocks),
            nfa_dec_channels: Some(model.nfa_dec_channels.clone()),
            fusion_channels: Some(model.fusion_channels.clone()),
            disc_channels: Some(model.disc_channels.clone()),
            disc_scales: Some(model.disc_scales),
            id_dim: Some(model.id_dim),
            advhead_hidden: Some(model.advhead_hidden),
            use_skip_connections: Some(model.use_skip_connections),
            use_nfa: Some(model.use_nfa),
        }
    }
}

/// On-disk run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub synthdata: DatasetConfig,
    pub backends: BackendsConfig,
    pub networks: NetworksSection,
    pub losses: LossWeights,
    pub trainer: TrainerConfig,
    pub metrics: MetricsConfig,
}

/// Fully resolved and validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub backends: BackendsConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub trainer: TrainerConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: RunConfigFile =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::resolve(file)
    }

    pub fn resolve(file: RunConfigFile) -> Result<Self> {
        file.synthdata.validate()?;
        file.losses.validate()?;
        file.trainer.validate()?;
        file.metrics.validate()?;
        let model = file
            .networks
            .resolve(file.synthdata.pose_dim, file.synthdata.exp_dim)?;
        if model.resolution != file.synthdata.resolution {
            return Err(Error::Config(format!(
                "[synthdata] resolution {} disagrees with [networks] resolution {}",
                file.synthdata.resolution, model.resolution
            )));
        }
        Ok(RunConfig {
            dataset: file.synthdata,
            backends: file.backends,
            model,
            weights: file.losses,
            trainer: file.trainer,
            metrics: file.metrics,
        })
    }

    /// Canonical TOML rendering; parses back to an identical `RunConfig`.
    pub fn to_toml(&self) -> String {
        let file = RunConfigFile {
            synthdata: self.dataset.clone(),
            backends: self.backends.clone(),
            networks: NetworksSection::from_model(&self.model),
            losses: self.weights,
            trainer: self.trainer.clone(),
            metrics: self.metrics.clone(),
        };
        toml::to_string_pretty(&file).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    /// `desk` preset with default sections; used by tests and examples.
    pub fn desk() -> Self {
        Self::resolve(RunConfigFile::default()).expect("desk defaults are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn paper_shapes() {
        let m = ModelConfig::paper();
        assert_eq!(m.code_side(), 2);
        assert_eq!(m.code_channels(), 1024);
        assert_eq!(m.nfa_side(), 16);
        assert_eq!(m.nfa_res_channels, 512);
        assert_eq!(m.n_f(), 6);
        assert_eq!(m.n_a(), 4);
        assert_eq!(m.n_s(), 7);
        assert_eq!(m.reghead_dim(), 67);
    }

    #[test]
    fn desk_shapes() {
        let m = ModelConfig::desk();
        assert_eq!(m.code_side(), 2);
        assert_eq!(m.code_channels(), 256);
        assert_eq!(m.nfa_side(), 8);
        assert!(m.n_a() < m.n_f());
        assert_eq!(m.n_s(), m.n_f() + 1);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut m = ModelConfig::desk();
        m.resolution = 60;
        assert!(m.validate().is_err());

        let mut m = ModelConfig::desk();
        m.nfa_dec_channels = vec![64, 32, 16, 8]; // n_a == n_f
        assert!(m.validate().is_err());

        let mut m = ModelConfig::desk();
        m.nfa_channels = vec![32, 64, 128, 256, 256]; // down depth = fnid depth
        assert!(m.validate().is_err());
    }

    #[test]
    fn nfa_disabled_skips_branch_checks() {
        let mut m = ModelConfig::desk();
        m.use_nfa = false;
        m.nfa_dec_channels = vec![];
        m.nfa_channels = vec![];
        m.validate().unwrap();
        assert_eq!(m.n_a(), 0);
    }

    #[test]
    fn default_file_resolves_to_desk() {
        let cfg = RunConfig::desk();
        assert_eq!(cfg.model, ModelConfig::desk());
        assert_eq!(cfg.weights, LossWeights::default());
    }

    #[test]
    fn paper_loss_weights_are_default() {
        let w = LossWeights::default();
        assert_eq!(w.beta_adv_fnid, 0.1);
        assert_eq!(w.beta_rec, 0.2);
        assert_eq!(w.beta_attr, 0.5);
        assert_eq!(w.beta_glb, 5.0);
        assert_eq!(w.beta_fnid, 2.0);
        assert_eq!(w.beta_nfa, 100.0);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::desk();
        let text = cfg.to_toml();
        let reparsed = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(cfg.content_hash(), reparsed.content_hash());
    }

    #[test]
    fn missing_section_uses_defaults_and_unknown_key_fails() {
        let cfg = RunConfig::from_toml("[trainer]\nsteps = 5\n").unwrap();
        assert_eq!(cfg.trainer.steps, 5);
        let err = RunConfig::from_toml("[trainer]\nstepz = 5\n").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let text = "[synthdata]\nresolution = 32\n";
        let err = RunConfig::from_toml(text).unwrap_err();
        assert!(err.to_string().contains("resolution"), "{err}");
    }
}
