//! Training configuration and the `key = value` config-file format.
//! Lines may carry `#` comments; unknown keys are hard errors.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{BranchId, ModelConfig};

/// Where training data comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synth {
        num_ids: usize,
        per_id: usize,
        num_cams: usize,
    },
    Dir(PathBuf),
}

/// Everything a training run needs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_p: usize,
    pub batch_k: usize,
    pub lambda_center: f64,
    pub label_smoothing: f64,
    pub center_lr: f64,
    pub flip_p: f64,
    pub erase_p: f64,
    pub model: ModelConfig,
    pub data: DataSource,
    /// Samples per identity held out for evaluation (0 = evaluate on train).
    pub eval_holdout: usize,
    /// Evaluate every this many epochs (0 = never).
    pub eval_interval: usize,
    pub k_max: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// The benchmark-scale recipe: warmup from 3.5e-5 to 3.5e-4 over 10
    /// epochs, decay by 0.1 at epochs 40 and 70, P=16/K=4 batches. This is
    /// the schedule used on the full re-identification benchmarks; desk-scale
    /// runs use [`TrainConfig::toy`].
    pub fn benchmark_recipe() -> Self {
        TrainConfig {
            epochs: 120,
            base_lr: 3.5e-4,
            warmup_epochs: 10,
            warmup_start: 3.5e-5,
            decay_epochs: vec![40, 70],
            decay_factor: 0.1,
            batch_p: 16,
            batch_k: 4,
            lambda_center: 5e-4,
            label_smoothing: 0.1,
            center_lr: 0.5,
            flip_p: 0.5,
            erase_p: 0.5,
            model: ModelConfig::deep_miner(8),
            data: DataSource::Synth {
                num_ids: 8,
                per_id: 16,
                num_cams: 2,
            },
            eval_holdout: 4,
            eval_interval: 5,
            k_max: 5,
            seed: 42,
            checkpoint: None,
        }
    }

    /// The desk-scale default: 8 synthetic identities x 16 samples x 2
    /// cameras at 48x16, the full four-branch model, 30 epochs of P=4/K=4
    /// batches. The learning rate is scaled up for the tiny step budget
    /// (60 optimizer steps); the benchmark rates are too conservative to
    /// converge at this scale.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 30,
            base_lr: 1e-2,
            warmup_epochs: 5,
            warmup_start: 1e-3,
            batch_p: 4,
            batch_k: 4,
            ..Self::benchmark_recipe()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "decay_epochs {:?} must be sorted and distinct",
                self.decay_epochs
            )));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("warmup_start", self.warmup_start),
            ("decay_factor", self.decay_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("flip_p", self.flip_p), ("erase_p", self.erase_p)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if self.lambda_center < 0.0 {
            return Err(Error::Config("lambda_center must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0,1)".into()));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be >= 1".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

enum AttentionSpec {
    Default,
    None,
    Explicit(Vec<(BranchId, usize)>),
}

/// Parses the config-file text; missing keys keep toy defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::toy();
    let mut attention = AttentionSpec::Default;
    let mut synth = (8usize, 16usize, 2usize);
    let mut data_dir: Option<PathBuf> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", lineno + 1));

        match key {
            "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
            "base_lr" => cfg.base_lr = value.parse().map_err(|_| bad("base_lr"))?,
            "warmup_epochs" => {
                cfg.warmup_epochs = value.parse().map_err(|_| bad("warmup_epochs"))?
            }
            "warmup_start" => cfg.warmup_start = value.parse().map_err(|_| bad("warmup_start"))?,
            "decay_epochs" => cfg.decay_epochs = parse_list(value).map_err(|_| bad("decay_epochs"))?,
            "decay_factor" => cfg.decay_factor = value.parse().map_err(|_| bad("decay_factor"))?,
            "batch_p" => cfg.batch_p = value.parse().map_err(|_| bad("batch_p"))?,
            "batch_k" => cfg.batch_k = value.parse().map_err(|_| bad("batch_k"))?,
            "lambda_center" => {
                cfg.lambda_center = value.parse().map_err(|_| bad("lambda_center"))?
            }
            "label_smoothing" => {
                cfg.label_smoothing = value.parse().map_err(|_| bad("label_smoothing"))?
            }
            "center_lr" => cfg.center_lr = value.parse().map_err(|_| bad("center_lr"))?,
            "flip_p" => cfg.flip_p = value.parse().map_err(|_| bad("flip_p"))?,
            "erase_p" => cfg.erase_p = value.parse().map_err(|_| bad("erase_p"))?,
            "eval_holdout" => cfg.eval_holdout = value.parse().map_err(|_| bad("eval_holdout"))?,
            "eval_interval" => {
                cfg.eval_interval = value.parse().map_err(|_| bad("eval_interval"))?
            }
            "k_max" => cfg.k_max = value.parse().map_err(|_| bad("k_max"))?,
            "checkpoint" => cfg.checkpoint = Some(PathBuf::from(value)),
            "data" => {
                if value == "synth" {
                    data_dir = None;
                } else {
                    data_dir = Some(PathBuf::from(value));
                }
            }
            "synth_ids" => synth.0 = value.parse().map_err(|_| bad("synth_ids"))?,
            "synth_per_id" => synth.1 = value.parse().map_err(|_| bad("synth_per_id"))?,
            "synth_cams" => synth.2 = value.parse().map_err(|_| bad("synth_cams"))?,
            "image_h" => cfg.model.input_h = value.parse().map_err(|_| bad("image_h"))?,
            "image_w" => cfg.model.input_w = value.parse().map_err(|_| bad("image_w"))?,
            "tau" => cfg.model.tau = value.parse().map_err(|_| bad("tau"))?,
            "ie_positions" => {
                cfg.model.ie_positions = parse_list(value).map_err(|_| bad("ie_positions"))?
            }
            "local_branch" => {
                cfg.model.local_branch = value.parse().map_err(|_| bad("local_branch"))?
            }
            "local_stripes" => {
                cfg.model.local_stripes = value.parse().map_err(|_| bad("local_stripes"))?
            }
            "block_widths" => {
                cfg.model.block_widths = parse_list(value).map_err(|_| bad("block_widths"))?
            }
            "block_strides" => {
                cfg.model.block_strides = parse_list(value).map_err(|_| bad("block_strides"))?
            }
            "attention" => {
                attention = match value {
                    "default" => AttentionSpec::Default,
                    "none" => AttentionSpec::None,
                    list => {
                        let mut sites = Vec::new();
                        for item in list.split(',') {
                            let (br, j) = item
                                .trim()
                                .split_once(':')
                                .ok_or_else(|| bad("attention site"))?;
                            let branch =
                                BranchId::parse(br).ok_or_else(|| bad("attention branch"))?;
                            let block = j.parse().map_err(|_| bad("attention block"))?;
                            sites.push((branch, block));
                        }
                        AttentionSpec::Explicit(sites)
                    }
                };
            }
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown key '{other}'",
                    lineno + 1
                )))
            }
        }
    }

    cfg.model.attention_sites = match attention {
        AttentionSpec::Default => {
            ModelConfig::default_attention_sites(&[2, 3], &cfg.model.ie_positions)
        }
        AttentionSpec::None => Vec::new(),
        AttentionSpec::Explicit(sites) => sites,
    };
    cfg.data = match data_dir {
        Some(dir) => DataSource::Dir(dir),
        None => {
            cfg.model.num_identities = synth.0;
            DataSource::Synth {
                num_ids: synth.0,
                per_id: synth.1,
                num_cams: synth.2,
            }
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_list(value: &str) -> std::result::Result<Vec<usize>, ()> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| ()))
        .collect()
}

pub fn load_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_example() {
        let text = "\
# toy run
epochs = 3
seed = 7
data = synth
synth_ids = 4          # identities
synth_per_id = 6
batch_p = 2
batch_k = 2
tau = 0.7
ie_positions = 3
local_branch = false
attention = none
image_h = 16
image_w = 8
block_widths = 16,16,16,16
eval_interval = 1
eval_holdout = 2
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.tau, 0.7);
        assert_eq!(cfg.model.ie_positions, vec![3]);
        assert!(!cfg.model.local_branch);
        assert!(cfg.model.attention_sites.is_empty());
        assert_eq!(cfg.model.num_identities, 4);
        assert!(matches!(cfg.data, DataSource::Synth { num_ids: 4, .. }));
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let err = parse_config("epochs = 3\nbogus_key = 1\n").unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("bogus_key")),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn default_attention_follows_ie_positions() {
        let cfg = parse_config("ie_positions = 3\n").unwrap();
        // fork at 3 owns only block 4; no inherited sites
        assert_eq!(
            cfg.model.attention_sites,
            vec![(BranchId::Global, 2), (BranchId::Global, 3)]
        );
        let cfg = parse_config("").unwrap();
        assert_eq!(
            cfg.model.attention_sites,
            vec![
                (BranchId::Global, 2),
                (BranchId::Global, 3),
                (BranchId::Erased(1), 3)
            ]
        );
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse_config("epochs = zero\n").is_err());
        assert!(parse_config("tau = 1.5\n").is_err());
        assert!(parse_config("decay_epochs = 70,40\n").is_err());
        assert!(parse_config("this is not a kv line\n").is_err());
    }

    #[test]
    fn toy_config_is_valid() {
        TrainConfig::toy().validate().unwrap();
    }
}
