//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid by flags.

use std::path::Path;

use msnet_core::cssl::{AugmentPolicy, DecMode, NetworkConfig, PretrainConfig, SpLossConfig};
use msnet_core::encoder::{EncoderConfig, SizeFallback};
use msnet_core::probe::ProbeConfig;
use msnet_core::sieb::SiebConfig;
use msnet_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "MSNET_SEED";

/// Every tunable of a run. Field names are the config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub warmup_epochs: usize,
    /// Fully supervised schedule length; recorded for reference, no command trains it.
    pub supervised_epochs: usize,
    pub pretrain_epochs: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Key-encoder momentum coefficient.
    pub momentum: f64,
    pub tau: f64,
    pub queue_size: usize,
    pub batch_size: usize,
    pub sieb_n: usize,
    pub saem_heads: usize,
    pub saem_kernel: usize,
    pub size_range: (f64, f64),
    pub input_size: usize,
    pub use_saem: bool,
    pub use_sieb: bool,
    pub size_fallback: SizeFallback,
    pub dec_mode: DecMode,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            base_lr: 0.01,
            sgd_momentum: 0.9,
            warmup_epochs: 5,
            supervised_epochs: 400,
            pretrain_epochs: 30,
            probe_epochs: 50,
            probe_lr: 0.1,
            momentum: 0.999,
            tau: 0.07,
            queue_size: 1024,
            batch_size: 32,
            sieb_n: 2,
            saem_heads: 4,
            saem_kernel: 3,
            size_range: (0.0, 100.0),
            input_size: 64,
            use_saem: true,
            use_sieb: true,
            size_fallback: SizeFallback::Estimate,
            dec_mode: DecMode::Pairwise,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    /// Full-length schedules instead of the shortened desk ones.
    pub fn full_scale() -> Self {
        RunConfig { pretrain_epochs: 300, probe_epochs: 200, ..Self::default() }
    }

    /// Defaults, then `file` (if any), then `MSNET_SEED` when the file sets no seed.
    /// Flags are applied afterwards by the caller.
    pub fn layered(full_scale: bool, file: Option<&Path>, env_seed: Option<String>) -> Result<Self> {
        let base = if full_scale { Self::full_scale() } else { Self::default() };
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let mut file_has_seed = false;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
            let overlay: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let unknown: Vec<&String> = overlay.keys().filter(|k| !table.contains_key(*k)).collect();
            if !unknown.is_empty() {
                let names: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
                return Err(Error::Config(format!("{}: unknown key(s): {}", path.display(), names.join(", "))));
            }
            file_has_seed = overlay.contains_key("seed");
            table.extend(overlay);
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if !file_has_seed {
            if let Some(s) = env_seed {
                cfg.seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn network(&self) -> NetworkConfig {
        let encoder = EncoderConfig {
            input_size: self.input_size,
            heads: self.saem_heads,
            kernel: self.saem_kernel,
            saem_enabled: vec![self.use_saem; 3],
            sieb: self.use_sieb.then(|| SiebConfig { n: self.sieb_n, size_range: self.size_range, ..SiebConfig::default() }),
            size_fallback: self.size_fallback,
            ..EncoderConfig::default()
        };
        NetworkConfig { encoder, ..NetworkConfig::default() }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            sgd_momentum: self.sgd_momentum,
            warmup_epochs: self.warmup_epochs,
            momentum: self.momentum,
            queue_size: self.queue_size,
            loss: SpLossConfig { tau: self.tau, dec_mode: self.dec_mode },
            augment: AugmentPolicy { output_size: self.input_size, ..AugmentPolicy::default() },
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig { epochs: self.probe_epochs, lr: self.probe_lr, momentum: self.sgd_momentum, batch_size: self.batch_size, seed: self.seed }
    }
}
