//! Run configuration: a single TOML file describing model, task, and
//! training settings. Unknown keys are rejected with a message naming the
//! offending key.

use std::path::Path;

use crate::blocks::StackConfig;
use crate::error::{Error, Result};
use crate::tasks::{TaskConfig, TaskKind};
use crate::train::TrainConfig;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: StackConfig,
    pub task: TaskConfig,
    /// Held-out evaluation task; defaults to the training task.
    #[serde(default)]
    pub eval_task: Option<TaskConfig>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn eval_task(&self) -> &TaskConfig {
        self.eval_task.as_ref().unwrap_or(&self.task)
    }

    /// Cross-field checks beyond what serde enforces.
    pub fn validate(&self) -> Result<()> {
        let tasks = std::iter::once(&self.task).chain(self.eval_task.as_ref());
        for task in tasks {
            match task.kind {
                TaskKind::Nns => {
                    if self.model.real_input_dim != Some(3) {
                        return Err(Error::InvalidConfig(
                            "nns task needs model.real_input_dim = 3".into(),
                        ));
                    }
                    if self.model.vocab_size != 1 {
                        return Err(Error::InvalidConfig(
                            "nns task needs model.vocab_size = 1 (regression width)".into(),
                        ));
                    }
                }
                _ => {
                    if self.model.real_input_dim.is_some() {
                        return Err(Error::InvalidConfig(
                            "token tasks are incompatible with real_input_dim".into(),
                        ));
                    }
                    if self.model.vocab_size < task.vocab {
                        return Err(Error::InvalidConfig(format!(
                            "model vocab {} smaller than task vocab {}",
                            self.model.vocab_size, task.vocab
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[model]
num_blocks = 2
ratio = [0, 1]
embedding_dim = 64
vocab_size = 3

[task]
kind = "parity"
context = 33
vocab = 3
min_len = 2
max_len = 32

[train]
steps = 100
batch_size = 8
seed = 1
eval_interval = 50
eval_samples = 16
peak_lr = 1e-3
"#;

    #[test]
    fn parses_a_full_config() {
        let cfg = RunConfig::from_toml(GOOD).unwrap();
        assert_eq!(cfg.model.num_blocks, 2);
        assert_eq!(cfg.train.steps, 100);
        assert!(cfg.model.slstm_conv, "default on");
        assert_eq!(cfg.eval_task().context, 33);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let bad = GOOD.replace("peak_lr = 1e-3", "learningrate = 1e-3");
        let err = RunConfig::from_toml(&bad).unwrap_err();
        let msg = format!("{err:?}");
        assert!(msg.contains("learningrate"), "message must name the key: {msg}");
    }

    #[test]
    fn cross_field_validation() {
        let bad = GOOD.replace("vocab_size = 3", "vocab_size = 2");
        assert!(RunConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::from_toml(GOOD).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg.to_toml(), again.to_toml());
    }
}
