//! Run configuration (TOML) and the manifest written next to every run's outputs.
//!
//! ```toml
//! method = "efficientxpert"      # or "wanda_baseline"
//! task = "teacher_student"       # or "char_classification"
//!
//! [prune]
//! sparsity = 0.5
//! ema_rate = 0.5
//! lambda = 1e-8
//! rank = 8
//! epochs = 3
//! learning_rate = 1e-4
//! batch_size = 32
//! seed = 0
//! criterion = "foresight"        # foresight | wanda | magnitude
//! pbs_enabled = true
//! pbs_scale_adapter = true
//! final_pbs_pass = false
//! budget = "row"                 # row | global
//! lora_scale = 2.0
//!
//! [prune.calibration]
//! batches = 8
//! seq_len = 16
//!
//! [teacher_student]
//! widths = [64, 64, 64, 64]
//! activation = "relu"
//! n_train = 512
//! n_heldout = 256
//! shift_rank = 4
//! shift_scale = 0.3
//! channel_spread = 0.75
//! noise = 0.01
//! seed = 0
//!
//! [char_classification]
//! alphabet = 12
//! seq_len = 8
//! num_classes = 10
//! hidden = [64, 48]
//! activation = "relu"
//! n_train = 512
//! n_heldout = 256
//! seed = 0
//! ```
//!
//! Every field is optional and defaults to the values above.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xpert_core::toy::{CharClassificationSpec, TeacherStudentSpec, ToyProblem};
use xpert_core::PruneConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Efficientxpert,
    WandaBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    TeacherStudent,
    CharClassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub task: TaskKind,
    pub prune: PruneConfig,
    pub teacher_student: TeacherStudentSpec,
    pub char_classification: CharClassificationSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.prune.validate()?;
        Ok(())
    }

    pub fn generate(&self) -> Result<ToyProblem, CliError> {
        Ok(match self.task {
            TaskKind::TeacherStudent => self.teacher_student.generate(&self.prune)?,
            TaskKind::CharClassification => self.char_classification.generate(&self.prune)?,
        })
    }

    /// Sets both the training seed and the task seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.prune.seed = seed;
        self.teacher_student.seed = seed;
        self.char_classification.seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

/// Everything needed to reproduce a run, plus how long it took.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Config file the run was started from, if any.
    pub input: Option<String>,
    pub outputs: Vec<String>,
    pub threads: usize,
    pub timings: Vec<PhaseTiming>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn toolkit_version() -> String {
    format!("xpert {}", env!("CARGO_PKG_VERSION"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_recipe() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.prune.sparsity, 0.5);
        assert_eq!(c.prune.ema_rate, 0.5);
        assert_eq!(c.prune.lambda, 1e-8);
        assert_eq!(c.prune.rank, 8);
        assert_eq!(c.prune.epochs, 3);
        assert_eq!(c.prune.learning_rate, 1e-4);
        assert_eq!(c.method, Method::Efficientxpert);
    }

    #[test]
    fn toml_round_trip_and_unknown_fields() {
        let c = RunConfig::from_toml("method = \"wanda_baseline\"\n[prune]\nsparsity = 0.25\ncriterion = \"wanda\"\n").unwrap();
        assert_eq!(c.method, Method::WandaBaseline);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(RunConfig::from_toml("[prune]\nsparsty = 0.5\n").is_err());
    }
}
