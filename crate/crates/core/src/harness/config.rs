//! Experiment configuration: a TOML file with `[model]`, `[train]`,
//! `[data]`, and `[output]` tables. `STAGE_OUTPUT_DIR` and `STAGE_SEED`
//! override the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::DistractorSpec;
use crate::error::StageError;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            lr0: 0.016,
            momentum: 0.9,
            batch: 16,
            seq_len: 30,
            seed: 42,
            eval_every: 200,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), StageError> {
        if self.seq_len < 2 {
            return Err(StageError::Config(format!("seq_len must be >= 2, got {}", self.seq_len)));
        }
        if self.iterations == 0 || self.batch == 0 {
            return Err(StageError::Config("iterations and batch must be positive".into()));
        }
        if !(self.lr0 >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(StageError::Config(format!(
                "lr0 {} / momentum {} out of range",
                self.lr0, self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GenerateConfig {
    pub persons: usize,
    pub sequences_per_person: usize,
    pub frames: usize,
    pub image_size: [usize; 2],
    pub distractors: DistractorSpec,
    /// Optional per-person (pitch, yaw) rendering bias, aligned to persons.
    pub person_bias: Vec<[f64; 2]>,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            persons: 10,
            sequences_per_person: 5,
            frames: 30,
            image_size: [64, 64],
            distractors: DistractorSpec::default(),
            person_bias: Vec::new(),
            seed: 1,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<(), StageError> {
        if self.persons == 0 || self.sequences_per_person == 0 {
            return Err(StageError::Config("persons and sequences_per_person must be positive".into()));
        }
        if self.frames < 2 {
            return Err(StageError::Config(format!("frames must be >= 2, got {}", self.frames)));
        }
        if self.image_size[0] < 16 || self.image_size[1] < 16 {
            return Err(StageError::Config(format!(
                "image size {:?} too small to place a face (minimum 16x16)",
                self.image_size
            )));
        }
        if !self.person_bias.is_empty() && self.person_bias.len() != self.persons {
            return Err(StageError::Config(format!(
                "person_bias has {} entries for {} persons",
                self.person_bias.len(),
                self.persons
            )));
        }
        self.distractors.validate()
    }

    pub fn bias_for(&self, person: usize) -> (f64, f64) {
        self.person_bias
            .get(person)
            .map(|b| (b[0], b[1]))
            .unwrap_or((0.0, 0.0))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub generate: Option<GenerateConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, StageError> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| StageError::Config(format!("config parse: {e}")))?;
        cfg.apply_env_overrides();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, StageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StageError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn apply_env_overrides(&mut self) {
        if let Ok(dir) = std::env::var("STAGE_OUTPUT_DIR") {
            if !dir.is_empty() {
                self.output.dir = PathBuf::from(dir);
            }
        }
        if let Ok(seed) = std::env::var("STAGE_SEED") {
            if let Ok(s) = seed.parse::<u64>() {
                self.train.seed = s;
                if let Some(g) = &mut self.data.generate {
                    g.seed = s;
                }
            }
        }
    }

    /// Everything validates before any compute.
    pub fn validate(&self) -> Result<(), StageError> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(g) = &self.data.generate {
            g.validate()?;
        }
        Ok(())
    }

    pub fn variant_tag(&self) -> String {
        format!("{}+{}", self.model.sam.variant.tag(), self.model.tsm.variant.tag())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg.train.lr0, 0.016);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.batch, 16);
        assert_eq!(cfg.train.seq_len, 30);
    }

    #[test]
    fn partial_tables_override_defaults() {
        let text = r#"
[train]
iterations = 5
seq_len = 4

[model.sam]
variant = "dual"
d = 32
attn_heads = 4
attn_layers = 1
dual_hidden = 8
dropout_p = 0.5
groups = 2

[output]
dir = "runs/x"
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.train.iterations, 5);
        assert_eq!(cfg.output.dir, PathBuf::from("runs/x"));
        assert_eq!(cfg.variant_tag(), "dual+lstm");
    }

    #[test]
    fn invalid_seq_len_is_rejected_before_compute() {
        let err = ExperimentConfig::from_toml("[train]\nseq_len = 1\n").unwrap_err();
        assert!(err.to_string().contains("seq_len"));
    }

    #[test]
    fn bias_list_must_match_person_count() {
        let text = r#"
[data.generate]
persons = 3
person_bias = [[0.1, 0.0]]
"#;
        assert!(ExperimentConfig::from_toml(text).is_err());
    }
}
