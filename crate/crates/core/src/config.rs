//! Run configuration: every component's parameters in one TOML file.
//!
//! Component seeds derive from the root `seed`: the first eight bytes
//! (little endian) of SHA-256 over the root seed's little-endian bytes
//! followed by the component name (`dataset`, `train`, `sim`, `bench`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chain::{load_chain, KinematicChain};
use crate::dataset::{CommandSpace, CurateOptions};
use crate::error::{Error, Result};
use crate::kmp::{TrainConfig, Variant};
use crate::rewards::RewardParams;
use crate::sim::SimConfig;

pub const DATASET_COMPONENT: &str = "dataset";
pub const TRAIN_COMPONENT: &str = "train";
pub const SIM_COMPONENT: &str = "sim";
pub const BENCH_COMPONENT: &str = "bench";

pub fn derive_seed(root: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(component.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub space: CommandSpace,
    pub curate: CurateOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Chain description file; the bundled humanoid when unset.
    pub chain: Option<PathBuf>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub variant: Variant,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub rewards: RewardParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            chain: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
            variant: Variant::L,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            rewards: RewardParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_col(text, s.start))
                .unwrap_or((0, 0));
            Error::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Input(format!("config serialization failed: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.space.validate()?;
        self.train.validate()?;
        self.sim.validate()?;
        self.rewards.validate()
    }

    pub fn chain(&self) -> Result<KinematicChain> {
        match &self.chain {
            Some(p) => load_chain(p),
            None => Ok(KinematicChain::default_humanoid()),
        }
    }

    pub fn component_seed(&self, component: &str) -> u64 {
        derive_seed(self.seed, component)
    }

    /// Curation options with the derived dataset seed.
    pub fn curate_options(&self) -> CurateOptions {
        CurateOptions {
            seed: self.component_seed(DATASET_COMPONENT),
            ..self.dataset.curate.clone()
        }
    }

    /// Training options with the derived training seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.component_seed(TRAIN_COMPONENT),
            ..self.train.clone()
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_round_trips_exactly() {
        let c = RunConfig::default();
        let text = c.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string().unwrap(), text);
    }

    #[test]
    fn infinite_prune_threshold_survives() {
        let mut c = RunConfig::default();
        c.dataset.curate.prune_threshold = f64::INFINITY;
        let back = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back.dataset.curate.prune_threshold, f64::INFINITY);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_toml_str("seed = 9\n[sim]\ndrift_sigma = 0.002\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.sim.drift_sigma, 0.002);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        match RunConfig::from_toml_str("seed = 1\nbogus = 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn component_seeds_differ_and_are_stable() {
        let c = RunConfig::default();
        let a = c.component_seed(DATASET_COMPONENT);
        assert_ne!(a, c.component_seed(TRAIN_COMPONENT));
        assert_eq!(a, derive_seed(0, "dataset"));
        assert_eq!(c.curate_options().seed, a);
    }

    proptest! {
        #[test]
        fn float_fields_round_trip_bit_exact(
            lr in 1e-6f64..1.0,
            sigma in 0.0f64..0.01,
            gain in 0.01f64..10.0,
            seed in any::<u64>(),
        ) {
            let mut c = RunConfig::default();
            c.train.learning_rate = lr;
            c.sim.drift_sigma = sigma;
            c.sim.commander.linear_gain = gain;
            c.seed = seed;
            let back = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
            prop_assert_eq!(back.train.learning_rate.to_bits(), lr.to_bits());
            prop_assert_eq!(back.sim.drift_sigma.to_bits(), sigma.to_bits());
            prop_assert_eq!(back, c);
        }
    }
}
