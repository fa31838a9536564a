//! Run configuration: one TOML file, layered under `--set key=value`
//! overrides, validated before any stage runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use deskdrive_core::config::{EpdmsWeights, OracleConfig, WorldConfig};
use deskdrive_core::dataset::{DataConfig, Split};
use deskdrive_core::policy::{ImitationConfig, PolicyConfig};
use deskdrive_core::rl::PpoConfig;
use deskdrive_core::rwm::RwmConfig;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Root of every artifact the commands read and write.
    pub out_dir: PathBuf,
    /// Continue pretraining or fine-tuning from the stage's own checkpoint.
    pub resume: bool,
    /// Vocabulary size the policy plans with; must be one of `data.anchor_ks`.
    pub anchors_k: usize,
    pub world: WorldConfig,
    pub oracle: OracleConfig,
    pub weights: EpdmsWeights,
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub pretrain: ImitationConfig,
    pub rwm: RwmConfig,
    pub rl: PpoConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            resume: false,
            anchors_k: 64,
            world: WorldConfig::default(),
            oracle: OracleConfig::default(),
            weights: EpdmsWeights::default(),
            data: DataConfig::default(),
            policy: PolicyConfig::default(),
            pretrain: ImitationConfig::default(),
            rwm: RwmConfig::default(),
            rl: PpoConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSource {
    #[default]
    Policy,
    Expert,
    /// Straight line at the ego's initial speed.
    ConstantVelocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Policy checkpoint; defaults to the fine-tuned policy.
    pub checkpoint: Option<PathBuf>,
    pub source: EvalSource,
    /// Subdirectory of `out_dir/eval` for the report.
    pub name: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            source: EvalSource::Policy,
            name: "default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub values: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            values: vec![1.0, 0.5, 0.1],
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key=value` overrides
    /// and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.weights.validate()?;
        self.data.validate()?;
        self.policy.validate()?;
        self.pretrain.validate()?;
        self.rwm.validate()?;
        self.rl.validate()?;
        if !self.data.anchor_ks.contains(&self.anchors_k) {
            return Err(HarnessError::Config(format!(
                "anchors_k = {} is not among data.anchor_ks {:?}",
                self.anchors_k, self.data.anchor_ks
            )));
        }
        if self.data.eval_scenes == 0 {
            return Err(HarnessError::Config("data.eval_scenes must be positive".into()));
        }
        if self.ablate.values.iter().any(|v| !(*v >= 0.0)) {
            return Err(HarnessError::Config("ablate.values must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Writes the materialized config as `config.toml` into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.out_dir.clone(),
        }
    }
}

/// Sets `a.b.c = value`, parsing the value as TOML and falling back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// File locations under the run root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn scenes(&self, split: Split) -> PathBuf {
        let name = match split {
            Split::Train => "scenes_train.jsonl",
            Split::Eval => "scenes_eval.jsonl",
            Split::Rl => "scenes_rl.jsonl",
        };
        self.data_dir().join(name)
    }

    pub fn anchors(&self, k: usize) -> PathBuf {
        self.data_dir().join(format!("anchors_K{k}.json"))
    }

    pub fn reward_samples(&self) -> PathBuf {
        self.data_dir().join("reward_samples.jsonl")
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.pretrain_dir().join("policy.ckpt")
    }

    pub fn rwm_dir(&self) -> PathBuf {
        self.root.join("rwm")
    }

    pub fn rwm_checkpoint(&self) -> PathBuf {
        self.rwm_dir().join("rwm.ckpt")
    }

    pub fn rl_dir(&self) -> PathBuf {
        self.root.join("rl")
    }

    pub fn eval_dir(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.root.join("ablate")
    }
}
