use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intrinsic::RewardMode;
use crate::sac::SacConfig;
use crate::tasks::{TaskKind, TaskSpec};

/// Flat training configuration. Every key lives at the top level of the TOML
/// or JSON document; `task` is required, everything else falls back to the
/// defaults of [`TrainConfig::for_task`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub task: TaskSpec,
    pub reward_mode: RewardMode,
    pub episodes_per_epoch: usize,
    pub episode_length: usize,
    pub max_epochs: usize,
    pub convergence_patience: usize,
    /// Std of the Gaussian noise added to reward-time dynamics predictions.
    pub noise_sigma: f64,
    /// Gradient updates per lockstep environment step (one step of all
    /// `episodes_per_epoch` episodes).
    pub update_ratio: f64,
    /// Transitions drawn from `D` and re-scored into `D'` each epoch.
    pub reward_samples: usize,
    pub eval_episodes: usize,
    pub dyn_hidden: Vec<usize>,
    pub dyn_lr: f64,
    pub dyn_batch_size: usize,
    /// Transitions drawn from `D` for dynamics training each epoch.
    pub dyn_samples: usize,
    /// Passes over that sample per epoch.
    pub dyn_epochs: usize,
    #[serde(flatten)]
    pub sac: SacConfig,
}

impl TrainConfig {
    pub fn for_task(kind: TaskKind) -> Self {
        Self {
            task: TaskSpec::default_for(kind),
            reward_mode: RewardMode::ElignTeam,
            episodes_per_epoch: 64,
            episode_length: 25,
            max_epochs: 150,
            convergence_patience: 100,
            noise_sigma: 0.0,
            update_ratio: 1.0,
            reward_samples: 1600,
            eval_episodes: 32,
            dyn_hidden: vec![128, 128],
            dyn_lr: 0.001,
            dyn_batch_size: 256,
            dyn_samples: 4096,
            dyn_epochs: 1,
            sac: SacConfig::default(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.task.seed
    }

    pub fn updates_per_epoch(&self) -> usize {
        (self.update_ratio * self.episode_length as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.reward_mode.check_task(&self.task)?;
        let positive = [
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("episode_length", self.episode_length),
            ("max_epochs", self.max_epochs),
            ("convergence_patience", self.convergence_patience),
            ("eval_episodes", self.eval_episodes),
            ("dyn_batch_size", self.dyn_batch_size),
            ("dyn_samples", self.dyn_samples),
            ("dyn_epochs", self.dyn_epochs),
            ("reward_samples", self.reward_samples),
            ("batch_size", self.sac.batch_size),
            ("buffer_capacity", self.sac.buffer_capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        if !(self.update_ratio >= 0.0 && self.update_ratio.is_finite()) {
            return Err(Error::InvalidConfig("update_ratio must be non-negative".into()));
        }
        for (name, v) in [
            ("gamma", self.sac.gamma),
            ("entropy_coeff", self.sac.entropy_coeff),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.sac.soft_update_coeff > 0.0 && self.sac.soft_update_coeff <= 1.0) {
            return Err(Error::InvalidConfig("soft_update_coeff must lie in (0, 1]".into()));
        }
        for (name, v) in [
            ("actor_lr", self.sac.actor_lr),
            ("critic_lr", self.sac.critic_lr),
            ("dyn_lr", self.dyn_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.sac.hidden.contains(&0) || self.dyn_hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    fn to_table(&self) -> Result<toml::Table> {
        match toml::Value::try_from(self)? {
            toml::Value::Table(t) => Ok(t),
            _ => unreachable!("config serializes to a table"),
        }
    }

    /// Builds a config from a flat table of keys. Keys override the task
    /// defaults; unknown keys are rejected.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let kind: TaskKind = match table.get("task") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => {
                return Err(Error::InvalidConfig(format!("task must be a string, got {other}")))
            }
            None => return Err(Error::InvalidConfig("missing key `task`".into())),
        };
        let mut base = Self::for_task(kind).to_table()?;
        for (key, value) in table {
            overlay(&mut base, key, value)?;
        }
        let config: Self = toml::Value::Table(base).try_into()?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::from_table(s.parse::<toml::Table>()?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(s)?;
        match toml::Value::try_from(value)? {
            toml::Value::Table(t) => Self::from_table(t),
            _ => Err(Error::InvalidConfig("config must be a JSON object".into())),
        }
    }

    /// Reads `.json` files as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(&self.to_table()?)?)
    }

    /// Applies `key=value` overrides. Values are parsed as TOML literals, and
    /// fall back to bare strings (`reward_mode=elign_team`).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = self.to_table()?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("override {item:?} is not of the form key=value"))
            })?;
            let key = key.trim();
            let raw = raw.trim();
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            if key == "task" {
                // a different task brings its own defaults
                let mut fresh = toml::Table::new();
                fresh.insert("task".into(), value);
                let kind_defaults = Self::from_table(fresh)?.to_table()?;
                for (k, v) in kind_defaults {
                    if matches!(k.as_str(), "n_agents" | "n_adversaries" | "n_landmarks" | "task") {
                        table.insert(k, v);
                    }
                }
                continue;
            }
            overlay(&mut table, key.to_string(), value)?;
        }
        let config: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            Error::InvalidConfig(format!("incompatible override: {}", e.message()))
        })?;
        config.validate()?;
        Ok(config)
    }
}

fn overlay(table: &mut toml::Table, key: String, value: toml::Value) -> Result<()> {
    let Some(slot) = table.get_mut(&key) else {
        return Err(Error::InvalidConfig(format!("unknown config key `{key}`")));
    };
    // integers are accepted where floats are expected
    *slot = match (&*slot, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_fills_task_defaults() {
        let c = TrainConfig::from_toml_str("task = \"keep_away\"\nreward_mode = \"sparse\"\n").unwrap();
        assert_eq!(c.task, TaskSpec::default_for(TaskKind::KeepAway));
        assert_eq!(c.reward_mode, RewardMode::Sparse);
        assert_eq!(c.episode_length, 25);
        assert_eq!(c.convergence_patience, 100);
        assert_eq!(c.sac.batch_size, 1024);
    }

    #[test]
    fn toml_and_json_agree() {
        let t = TrainConfig::from_toml_str(
            "task = \"coop_nav\"\nn_agents = 2\nn_landmarks = 2\ntau = \"inf\"\nnoise_sigma = 2\n",
        )
        .unwrap();
        let j = TrainConfig::from_json_str(
            r#"{"task":"coop_nav","n_agents":2,"n_landmarks":2,"tau":"inf","noise_sigma":2.0}"#,
        )
        .unwrap();
        assert_eq!(t, j);
        assert!(t.task.tau.is_infinite());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = TrainConfig::for_task(TaskKind::PredPrey);
        c.task.tau = f64::INFINITY;
        c.noise_sigma = 0.5;
        let back = TrainConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides() {
        let c = TrainConfig::for_task(TaskKind::CoopNav);
        let o = c
            .with_overrides(&["reward_mode=sparse", "seed=7", "tau=inf", "update_ratio=2"])
            .unwrap();
        assert_eq!(o.reward_mode, RewardMode::Sparse);
        assert_eq!(o.task.seed, 7);
        assert!(o.task.tau.is_infinite());
        assert_eq!(o.update_ratio, 2.0);
        let swapped = c.with_overrides(&["task=pred_prey"]).unwrap();
        assert_eq!(swapped.task.n_adversaries, 2);
        assert!(c.with_overrides(&["nonsense=1"]).is_err());
        assert!(c.with_overrides(&["max_epochs=many"]).is_err());
        assert!(c.with_overrides(&["no_equals_sign"]).is_err());
    }

    #[test]
    fn invalid_mode_task_combination() {
        let err = TrainConfig::from_toml_str("task = \"coop_nav\"\nreward_mode = \"elign_adv\"\n");
        assert!(err.is_err());
        assert!(TrainConfig::from_toml_str("reward_mode = \"sparse\"\n").is_err());
        assert!(TrainConfig::from_toml_str("task = \"coop_nav\"\nnoise_sigma = -1.0\n").is_err());
    }
}
