//! Experiment configuration: named presets, TOML files and `--set` overrides.
//!
//! Resolution order, later wins: the preset, the config file, `--set
//! key=value` flags. Paths may also come from `SGN_WORK_DIR` or
//! `--work-dir`, which beat the file. No other setting reads the environment.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sgn_core::corpus::{ImageFeatureMode, Split, SynthSpec};
use sgn_core::generator::SgnConfig;
use sgn_core::onlstm::{QtTrainConfig, Recipe2TreeConfig};
use sgn_core::retrieval::RetrievalConfig;

pub const WORK_DIR_ENV: &str = "SGN_WORK_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => bail!("unknown preset {other:?} (expected desk or paper)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Root of every artifact a run reads or writes.
    pub work_dir: PathBuf,
}

/// Synthetic corpus shape; each split gets its own seed and id prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub sentence_count_range: (usize, usize),
    pub vocab_size: usize,
    pub image_dim: usize,
    pub image_feature_mode: ImageFeatureMode,
    pub seed: u64,
}

impl DataConfig {
    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn spec(&self, split: Split) -> SynthSpec {
        let offset = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        SynthSpec {
            n_recipes: self.size(split),
            sentence_count_range: self.sentence_count_range,
            vocab_size: self.vocab_size,
            image_feature_mode: self.image_feature_mode,
            image_dim: self.image_dim,
            seed: self.seed.wrapping_mul(3).wrapping_add(offset),
            id_prefix: split.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe2TreeSection {
    pub model: Recipe2TreeConfig,
    pub train: QtTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub subset_size: usize,
    pub n_subsets: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Seed for every training stage; `data.seed` drives synthesis.
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub recipe2tree: Recipe2TreeSection,
    pub sgn: SgnConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                preset,
                seed: 0,
                paths: Paths {
                    work_dir: PathBuf::from("runs"),
                },
                data: DataConfig {
                    train: 200,
                    val: 50,
                    test: 100,
                    sentence_count_range: (4, 8),
                    vocab_size: 40,
                    image_dim: 64,
                    image_feature_mode: ImageFeatureMode::DerivedFromText,
                    seed: 0,
                },
                recipe2tree: Recipe2TreeSection {
                    model: Recipe2TreeConfig::desk(),
                    train: QtTrainConfig::desk(),
                },
                sgn: SgnConfig::desk(),
                retrieval: RetrievalConfig::desk(),
                eval: EvalConfig {
                    subset_size: 100,
                    n_subsets: 10,
                    ks: vec![1, 5, 10],
                    seed: 0,
                },
                ablate: AblateConfig {
                    seeds: vec![0, 1, 2],
                },
            },
            Preset::Paper => Self {
                preset,
                seed: 0,
                paths: Paths {
                    work_dir: PathBuf::from("runs"),
                },
                data: DataConfig {
                    train: 2000,
                    val: 500,
                    test: 1000,
                    sentence_count_range: (2, 19),
                    vocab_size: 120,
                    image_dim: 512,
                    image_feature_mode: ImageFeatureMode::DerivedFromText,
                    seed: 0,
                },
                recipe2tree: Recipe2TreeSection {
                    model: Recipe2TreeConfig::paper(),
                    train: QtTrainConfig::paper(),
                },
                sgn: SgnConfig::paper(),
                retrieval: RetrievalConfig::paper(),
                eval: EvalConfig {
                    subset_size: 1000,
                    n_subsets: 10,
                    ks: vec![1, 5, 10],
                    seed: 0,
                },
                ablate: AblateConfig {
                    seeds: vec![0, 1, 2],
                },
            },
        }
    }

    /// Resolves preset, file, environment and overrides into one config.
    pub fn load(
        preset: Option<Preset>,
        file: Option<&Path>,
        work_dir: Option<&Path>,
        sets: &[String],
    ) -> Result<Self> {
        let file_value: Option<toml::Value> = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Some(toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?)
            }
            None => None,
        };
        let preset = match (preset, file_value.as_ref().and_then(|v| v.get("preset"))) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| anyhow!("preset must be a string"))?
                .parse()?,
            (None, None) => Preset::Desk,
        };
        let mut value = toml::Value::try_from(Self::preset(preset))?;
        if let Some(f) = file_value {
            merge(&mut value, f);
        }
        set_path(&mut value, "preset", toml::Value::String(format!("{preset:?}").to_lowercase()))?;
        if let Ok(dir) = std::env::var(WORK_DIR_ENV) {
            set_path(&mut value, "paths.work_dir", toml::Value::String(dir))?;
        }
        if let Some(dir) = work_dir {
            set_path(&mut value, "paths.work_dir", toml::Value::String(dir.display().to_string()))?;
        }
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got {s:?}"))?;
            set_path(&mut value, key.trim(), parse_scalar(raw.trim()))?;
        }
        let cfg: Self = value.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut spec = self.data.spec(split);
            spec.n_recipes = spec.n_recipes.max(1);
            spec.validate().map_err(|e| anyhow!("data: {e}"))?;
        }
        if self.data.train == 0 {
            bail!("invalid data.train: must be positive");
        }
        if self.eval.subset_size == 0 || self.eval.n_subsets == 0 {
            bail!("invalid eval: subset_size and n_subsets must be positive");
        }
        if self.ablate.seeds.is_empty() {
            bail!("invalid ablate.seeds: need at least one seed");
        }
        Ok(())
    }

    /// Stage configs with the run seed applied.
    pub fn recipe2tree_train(&self) -> QtTrainConfig {
        QtTrainConfig {
            seed: self.seed,
            ..self.recipe2tree.train.clone()
        }
    }

    pub fn sgn_config(&self) -> SgnConfig {
        let mut c = self.sgn.clone();
        c.train.seed = self.seed;
        c
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        let mut c = self.retrieval.clone();
        c.train.seed = self.seed;
        c
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(value: &mut toml::Value, key: &str, v: toml::Value) -> Result<()> {
    let mut cur = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| anyhow!("cannot set {key}: {} is not a table", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), v);
            return Ok(());
        }
        cur = table
            .get_mut(*part)
            .ok_or_else(|| anyhow!("unknown config key {key}"))?;
    }
    unreachable!("split yields at least one part")
}

/// Parses an override as a TOML value, falling back to a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_roundtrip_through_toml() {
        for p in [Preset::Desk, Preset::Paper] {
            let c = ExperimentConfig::preset(p);
            let text = toml::to_string(&c).unwrap();
            let back: ExperimentConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn file_and_overrides_layer_over_the_preset() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "preset = \"paper\"\nseed = 4\n[sgn.train]\nepochs = 3\n").unwrap();
        let sets = vec!["sgn.train.lr=0.01".to_string(), "data.train=10".to_string()];
        let c = ExperimentConfig::load(None, Some(&f), Some(dir.path()), &sets).unwrap();
        assert_eq!(c.preset, Preset::Paper);
        assert_eq!(c.seed, 4);
        assert_eq!(c.sgn.train.epochs, 3);
        assert_eq!(c.sgn.train.lr, 0.01);
        assert_eq!(c.sgn.decoder.layers, 16);
        assert_eq!(c.data.train, 10);
        assert_eq!(c.paths.work_dir, dir.path());
        assert_eq!(c.sgn_config().train.seed, 4);
    }

    #[test]
    fn bad_values_name_the_field() {
        let sets = vec!["data.sentence_count_range=[5, 3]".to_string()];
        let err = ExperimentConfig::load(None, None, None, &sets).unwrap_err();
        assert!(format!("{err:#}").contains("sentence_count_range"));
        let sets = vec!["nope.x=1".to_string()];
        assert!(ExperimentConfig::load(None, None, None, &sets).is_err());
    }
}
