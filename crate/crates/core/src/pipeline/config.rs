use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::artifacts::sha256_bytes;
use crate::corpus::{CorpusConfig, EncodeMode};
use crate::error::{Error, Result};
use crate::grpo::RlConfig;
use crate::policy::{PretrainPlan, Schedule, TrainConfig};
use crate::rewards::{RewardsConfig, RmTrainConfig};
use crate::uq2i::Uq2iConfig;
use crate::world::WorldConfig;

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "TUNECHAT_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub sft_fraction: f64,
    pub rl_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            sft_fraction: 0.6,
            rl_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub schedule: Schedule,
    pub mode: EncodeMode,
    pub plan: PretrainPlan,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::Curriculum,
            mode: EncodeMode::NextBehavior,
            plan: PretrainPlan::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Probes of each kind.
    pub n_probes: usize,
    /// Corpus fractions for the data-scaling sweep.
    pub scaling_budgets: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_probes: 400,
            scaling_budgets: vec![0.25, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub split: SplitConfig,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub uq2i: Uq2iConfig,
    pub rm: RmTrainConfig,
    pub sft: TrainConfig,
    pub rewards: RewardsConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("out"),
            world: WorldConfig::default(),
            split: SplitConfig::default(),
            corpus: CorpusConfig::default(),
            pretrain: PretrainConfig::default(),
            uq2i: Uq2iConfig::default(),
            rm: RmTrainConfig::default(),
            sft: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            rewards: RewardsConfig::default(),
            rl: RlConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Use `seed` for the world and every downstream stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let s = &self.split;
        if !(s.sft_fraction > 0.0 && s.rl_fraction > 0.0 && s.sft_fraction + s.rl_fraction < 1.0) {
            return Err(Error::Config(
                "split fractions must be positive and leave room for eval users".into(),
            ));
        }
        if self.pretrain.plan.replay < 0.0 {
            return Err(Error::Config("pretrain replay must be nonnegative".into()));
        }
        self.uq2i.validate()?;
        self.rewards.validate()?;
        self.rl.validate()?;
        if self.eval.scaling_budgets.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("scaling budgets must lie in [0, 1]".into()));
        }
        if self.uq2i.n_sft == 0 || self.uq2i.n_rl == 0 || self.uq2i.n_eval == 0 {
            return Err(Error::Config("uq2i sample counts must be positive".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Hash of everything that influences artifacts (the output location
    /// excluded).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_bytes(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// `$TUNECHAT_OUT` when set, else `out_dir`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.out_dir.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(matches!(PipelineConfig::from_toml("sed = 3"), Err(Error::Toml(_))));
        assert!(PipelineConfig::from_toml("[rl]\ngroup_size = 8\nbogus = 1").is_err());
    }

    #[test]
    fn fingerprint_ignores_output_location() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), a.clone().with_seed(99).fingerprint());
    }
}
