use std::path::{Path, PathBuf};

use crane_core::attribution::{Aggregation, LrpConfig, Objective};
use crane_core::corpus::{default_languages, validate_languages, LanguageSpec};
use crane_core::model::{Method, ModelConfig, PlantSpec, TrainConfig};
use crane_core::specialization::SelectionConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Everything a pipeline run depends on. Read from TOML; every section
/// except `seeds` has defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantSpec>,
    #[serde(default)]
    pub languages: Languages,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub identification: IdentificationConfig,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("crane-out")
}

/// Either a named preset or an explicit list of language specs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Languages {
    Preset {
        preset: String,
        #[serde(default)]
        overlap: u32,
    },
    Explicit(Vec<LanguageSpec>),
}

impl Default for Languages {
    fn default() -> Self {
        Languages::Preset { preset: "default".into(), overlap: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seq_len: usize,
    /// Permit overlapping vocabularies (only meaningful without a plant).
    pub allow_overlap: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { seq_len: 32, allow_overlap: false }
    }
}

/// SGD on the mixed-language identification corpus before analysis.
/// Zero steps analyses the built model as is.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { steps: 0, lr: 0.05, batch: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentificationConfig {
    pub samples_per_language: usize,
    pub epsilon: f64,
    pub aggregation: Aggregation,
    pub objective: Objective,
    /// Below this many samples per language the run is flagged in the
    /// advisory output.
    pub min_samples: usize,
    /// Also write every per-sample relevance vector.
    pub dump_relevance: bool,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            samples_per_language: 2048,
            epsilon: 1e-9,
            aggregation: Aggregation::Sum,
            objective: Objective::GoldLogitSum,
            min_samples: 256,
            dump_relevance: false,
        }
    }
}

impl IdentificationConfig {
    pub fn lrp(&self) -> LrpConfig {
        LrpConfig { epsilon: self.epsilon, aggregation: self.aggregation, objective: self.objective }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    pub threshold: f64,
    pub budget: usize,
    pub methods: Vec<Method>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self { threshold: 1.0, budget: 16, methods: vec![Method::Crane, Method::Lape, Method::Random] }
    }
}

impl SelectionSection {
    pub fn config(&self) -> SelectionConfig {
        SelectionConfig { threshold: self.threshold, budget: self.budget }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub mc_items: usize,
    pub heldout_samples: usize,
    pub epsilon: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { mc_items: 500, heldout_samples: 256, epsilon: 1e-9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub enabled: bool,
    pub mode: TransferMode,
    /// Fine-tuning schedule (`finetune` mode).
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Relative Gaussian noise on every weight (`perturb` mode).
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Finetune,
    Perturb,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self { enabled: true, mode: TransferMode::Finetune, steps: 200, lr: 0.01, batch: 8, sigma: 0.05 }
    }
}

impl TransferConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { lr: self.lr, steps: self.steps, batch: self.batch, seed }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn language_specs(&self) -> Result<Vec<LanguageSpec>, CliError> {
        match &self.languages {
            Languages::Preset { preset, overlap } if preset == "default" => Ok(default_languages(*overlap)),
            Languages::Preset { preset, .. } => Err(CliError::Config(format!("unknown language preset {preset:?}"))),
            Languages::Explicit(list) => Ok(list.clone()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        self.model.validate()?;
        let langs = self.language_specs()?;
        if langs.len() < 2 {
            return bad("at least two languages are needed".into());
        }
        validate_languages(&langs, self.corpus.allow_overlap && self.plant.is_none())?;
        for l in &langs {
            if l.vocab.hi as usize > self.model.vocab_size {
                return bad(format!("vocabulary of {} exceeds vocab_size {}", l.id, self.model.vocab_size));
            }
        }
        if self.corpus.seq_len < 2 || self.corpus.seq_len > self.model.max_seq_len {
            return bad(format!("seq_len must lie in [2, max_seq_len = {}]", self.model.max_seq_len));
        }
        if self.selection.methods.iter().any(|m| *m == Method::Planted) {
            return bad("methods must be drawn from crane, lape, random".into());
        }
        self.selection.config().validate(self.model.layout())?;
        self.identification.lrp().validate()?;
        if self.identification.samples_per_language < 4 {
            return bad("samples_per_language must be at least 4".into());
        }
        if self.evaluation.mc_items == 0 || self.evaluation.heldout_samples == 0 {
            return bad("evaluation needs at least one item and one held-out sample".into());
        }
        if !(self.evaluation.epsilon > 0.0) {
            return bad("evaluation epsilon must be positive".into());
        }
        if self.training.steps > 0 && self.training.batch == 0 {
            return bad("training batch must be at least 1".into());
        }
        if self.transfer.enabled && self.transfer.mode == TransferMode::Finetune && self.transfer.batch == 0 {
            return bad("transfer batch must be at least 1".into());
        }
        Ok(())
    }

    /// Canonical form: compact JSON of the parsed config with the output
    /// directory blanked, so that relocating a run keeps its hash.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        serde_json::to_string(&c).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = PipelineConfig::from_toml("seeds = [1]").unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.selection.budget, 16);
        assert_eq!(c.language_specs().unwrap().len(), 3);
    }

    #[test]
    fn hash_ignores_output_dir_but_not_content() {
        let a = PipelineConfig::from_toml("seeds = [1]\noutput_dir = \"a\"").unwrap();
        let b = PipelineConfig::from_toml("seeds = [1]\noutput_dir = \"b\"").unwrap();
        let c = PipelineConfig::from_toml("seeds = [2]\noutput_dir = \"a\"").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "seeds = []",
            "seeds = [1]\nbogus = 3",
            "seeds = [1]\n[selection]\nmethods = [\"planted\"]",
            "seeds = [1]\n[model]\nn_layers = 2\nd_model = 10\nn_heads = 3\nd_mlp = 4\nvocab_size = 96\nmax_seq_len = 64\nactivation = \"relu\"\nnorm = \"rmsnorm\"",
            "seeds = [1]\n[languages]\npreset = \"klingon\"",
        ] {
            assert!(matches!(PipelineConfig::from_toml(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn plant_section_parses() {
        let c = PipelineConfig::from_toml("seeds = [0]\n[plant]\nneurons_per_language = 8\ngain = 5.0").unwrap();
        assert_eq!(c.plant.unwrap().neurons_per_language, 8);
    }
}
