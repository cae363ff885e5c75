//! Run configuration: a TOML file with `[model]`, `[optimizer]` and
//! `[run]` tables, merged with command-line overrides. Unknown keys are
//! rejected, and the effective configuration is echoed into the run's
//! output directory.

use std::path::Path;

use light_dvae::error::{Error, Result};
use light_dvae::model::{BaseArch, ModelConfig, Variant};
use light_dvae::training::{OptimizerConfig, RunConfig};
use serde::{Deserialize, Serialize};

/// `[model]` table: everything except `f_bins`, which is derived from the
/// STFT window (F = window/2 + 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub l_z: usize,
    pub l_w: usize,
    pub rnn_hidden: usize,
    pub variant: String,
    pub base: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_model: m.d_model,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            n_heads: m.n_heads,
            l_z: m.l_z,
            l_w: m.l_w,
            rnn_hidden: m.rnn_hidden,
            variant: m.variant.to_string(),
            base: m.base.to_string(),
        }
    }
}

/// The whole configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub optimizer: OptimizerConfig,
    pub run: RunConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("serializing config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Resolved model configuration; `f_bins` comes from the STFT window.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let variant: Variant = self.model.variant.parse()?;
        let base: BaseArch = self.model.base.parse()?;
        let cfg = ModelConfig {
            f_bins: self.run.stft.f_bins(),
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            d_ff: self.model.d_ff,
            n_heads: self.model.n_heads,
            l_z: self.model.l_z,
            l_w: self.model.l_w,
            rnn_hidden: self.model.rnn_hidden,
            variant,
            base,
        };
        cfg.validate()?;
        self.run.stft.validate()?;
        self.optimizer.validate()?;
        Ok(cfg)
    }
}

/// Optional command-line overrides applied on top of a [`FileConfig`].
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Model variant: hit, light, inv-s or inv-s-nr.
    #[arg(long)]
    pub variant: Option<String>,
    /// Stack layout for the ablations: hit or light.
    #[arg(long)]
    pub base: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub l_z: Option<usize>,
    #[arg(long)]
    pub l_w: Option<usize>,
    #[arg(long)]
    pub rnn_hidden: Option<usize>,
    /// STFT window length in samples.
    #[arg(long)]
    pub window: Option<usize>,
    /// STFT hop in samples.
    #[arg(long)]
    pub hop: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training segment length in frames.
    #[arg(long)]
    pub t_seg: Option<usize>,
    /// Silence-trim threshold in dB below the loudest frame.
    #[arg(long)]
    pub trim_db: Option<f64>,
    #[arg(long)]
    pub beta_w: Option<f64>,
    #[arg(long)]
    pub beta_z: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub warmup_iters: Option<u64>,
    #[arg(long)]
    pub cosine_iters: Option<u64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut FileConfig) {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(cfg.model.variant, self.variant.clone());
        set!(cfg.model.base, self.base.clone());
        set!(cfg.model.d_model, self.d_model);
        set!(cfg.model.n_layers, self.n_layers);
        set!(cfg.model.d_ff, self.d_ff);
        set!(cfg.model.n_heads, self.n_heads);
        set!(cfg.model.l_z, self.l_z);
        set!(cfg.model.l_w, self.l_w);
        set!(cfg.model.rnn_hidden, self.rnn_hidden);
        set!(cfg.run.stft.window_length, self.window);
        set!(cfg.run.stft.hop, self.hop);
        set!(cfg.run.seed, self.seed);
        set!(cfg.run.iterations, self.iterations);
        set!(cfg.run.batch_size, self.batch_size);
        set!(cfg.run.t_seg, self.t_seg);
        set!(cfg.run.trim_db, self.trim_db);
        set!(cfg.run.beta_w, self.beta_w);
        set!(cfg.run.beta_z, self.beta_z);
        set!(cfg.run.clip_norm, self.clip_norm);
        set!(cfg.run.checkpoint_every, self.checkpoint_every);
        set!(cfg.optimizer.lr_max, self.lr_max);
        set!(cfg.optimizer.lr_min, self.lr_min);
        set!(cfg.optimizer.warmup_iters, self.warmup_iters);
        set!(cfg.optimizer.cosine_iters, self.cosine_iters);
        set!(cfg.optimizer.weight_decay, self.weight_decay);
    }
}
