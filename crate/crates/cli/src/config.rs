//! Training configuration resolution: flags > config file > defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use rmih_core::train::{QuantScale, Robust, ScaleRefresh, Tradeoff};
use rmih_core::{PoolMode, TrainConfig};

/// Flags that override fields of [`TrainConfig`]. Every flag is optional so
/// that an unset flag falls through to the config file or the default.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with keys named after the training config fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of training epochs (t_max).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Per-epoch multiplicative learning-rate decay.
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub lambda_q: Option<f64>,
    #[arg(long)]
    pub lambda_w: Option<f64>,
    /// pairs | sum
    #[arg(long)]
    pub quant_scale: Option<QuantScale>,
    /// max | mean
    #[arg(long)]
    pub pool: Option<PoolMode>,
    /// huber | l2
    #[arg(long)]
    pub robust: Option<Robust>,
    /// decay | equal | no_si
    #[arg(long)]
    pub tradeoff: Option<Tradeoff>,
    /// batch | epoch
    #[arg(long)]
    pub scale_refresh: Option<ScaleRefresh>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Width of the feature layer.
    #[arg(long)]
    pub dz: Option<usize>,
    /// Code length K.
    #[arg(long)]
    pub bits: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

pub fn load_config_file(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config_file(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$flag {
                    cfg.$field = v.clone();
                })*
            };
        }
        apply!(
            epochs => t_max,
            batch_size => batch_size,
            lr => lr0,
            lr_decay => lr_decay,
            momentum => momentum,
            lambda_q => lambda_q,
            lambda_w => lambda_w,
            quant_scale => quant_scale,
            pool => pool,
            robust => robust,
            tradeoff => tradeoff,
            scale_refresh => scale_refresh,
            seed => seed,
            hidden => hidden_dims,
            dz => dz,
            bits => bits,
            checkpoint_every => checkpoint_every,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "t_max = 7\nlr0 = 0.2\nrobust = \"l2\"\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            lr: Some(0.5),
            ..ConfigArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.t_max, 7);
        assert_eq!(cfg.lr0, 0.5);
        assert_eq!(cfg.robust, Robust::L2);
        assert_eq!(cfg.bits, TrainConfig::default().bits);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "epochz = 3\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            ..ConfigArgs::default()
        };
        assert!(args.resolve().is_err());
    }
}
