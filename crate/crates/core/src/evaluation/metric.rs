use serde::{Deserialize, Serialize};

use crate::corpus::LanguageId;
use crate::error::{ensure, Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-9;

/// Score drop counted only when positive.
pub fn clamped_delta(original: f64, masked: f64) -> f64 {
    (original - masked).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    McAccuracy,
    /// Mean next-token log-likelihood on held-out text, shifted by
    /// `ln(vocab_size)` so that the uniform predictor scores 0.
    OpenendedSurrogate,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::McAccuracy, TaskKind::OpenendedSurrogate];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::McAccuracy => "mc_accuracy",
            TaskKind::OpenendedSurrogate => "openended_surrogate",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc_accuracy" => Ok(TaskKind::McAccuracy),
            "openended_surrogate" => Ok(TaskKind::OpenendedSurrogate),
            other => Err(Error::Format(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub language: LanguageId,
    pub original: f64,
    pub masked: f64,
}

/// Original and masked scores of one task kind across languages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub kind: TaskKind,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            ensure!(r.original.is_finite() && r.masked.is_finite(), Input, "non-finite score for {}", r.language);
            if self.kind == TaskKind::McAccuracy {
                ensure!(
                    (0.0..=1.0).contains(&r.original) && (0.0..=1.0).contains(&r.masked),
                    Input,
                    "accuracy for {} outside [0, 1]",
                    r.language
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangSpecF1 {
    pub precision: f64,
    pub recall: f64,
    pub langspec_f1: f64,
}

/// Precision `D_t / (D_t + max_other D + eps)`, recall `D_t / (S_t + eps)` and
/// their harmonic mean `2PR / (P + R + eps)`, all drops clamped at zero.
pub fn langspec_f1(scores: &ScoreTable, target: &LanguageId, epsilon: f64) -> Result<LangSpecF1> {
    ensure!(epsilon > 0.0, Input, "epsilon must be positive");
    scores.validate()?;
    let row = scores
        .rows
        .iter()
        .find(|r| &r.language == target)
        .ok_or_else(|| Error::Input(format!("no score row for target language {target}")))?;
    let dt = clamped_delta(row.original, row.masked);
    let max_other = scores
        .rows
        .iter()
        .filter(|r| &r.language != target)
        .map(|r| clamped_delta(r.original, r.masked))
        .fold(0.0, f64::max);
    Ok(f1_from_deltas(dt, max_other, row.original, epsilon))
}

pub fn f1_from_deltas(target_delta: f64, max_other_delta: f64, original: f64, epsilon: f64) -> LangSpecF1 {
    let precision = target_delta / (target_delta + max_other_delta + epsilon);
    let recall = target_delta / (original + epsilon);
    let langspec_f1 = 2.0 * precision * recall / (precision + recall + epsilon);
    LangSpecF1 { precision, recall, langspec_f1 }
}
