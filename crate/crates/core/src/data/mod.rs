//! Feature-sequence datasets: container types, binary storage, synthetic
//! generation, speaker-disjoint splitting, and batching.

pub mod batch;
pub mod serf;
pub mod split;
pub mod synthetic;

pub use batch::{make_batches, make_eval_batches, SpeakerSpace};
pub use serf::{read_serf, write_serf};
pub use split::{make_cv_folds, split_by_speaker, CvFold, SessionMap, SpeakerTag, SplitManifest};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use std::collections::{HashMap, HashSet};

/// One feature sequence with its labels. Features are a `d x l` row-major
/// matrix of 32-bit reals (`d` = feature dimension, `l` = frame count);
/// training math widens to 64-bit when batches are built.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Vec<f32>,
    pub frames: usize,
    /// Index into [`Dataset::emotion_names`].
    pub emotion: usize,
    /// Index into [`Dataset::speaker_ids`].
    pub speaker: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub emotion_names: Vec<String>,
    pub speaker_ids: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn num_emotions(&self) -> usize {
        self.emotion_names.len()
    }

    pub fn num_speakers(&self) -> usize {
        self.speaker_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Validation("feature_dim must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(self.utterances.len());
        for utt in &self.utterances {
            if !seen.insert(utt.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate utterance id '{}'",
                    utt.id
                )));
            }
            if utt.frames == 0 {
                return Err(Error::Validation(format!(
                    "utterance '{}' has zero frames",
                    utt.id
                )));
            }
            if utt.features.len() != self.feature_dim * utt.frames {
                return Err(Error::Validation(format!(
                    "utterance '{}': {} values do not match {} x {}",
                    utt.id,
                    utt.features.len(),
                    self.feature_dim,
                    utt.frames
                )));
            }
            if utt.emotion >= self.emotion_names.len() {
                return Err(Error::Validation(format!(
                    "utterance '{}': emotion label {} out of range",
                    utt.id, utt.emotion
                )));
            }
            if utt.speaker >= self.speaker_ids.len() {
                return Err(Error::Validation(format!(
                    "utterance '{}': speaker label {} out of range",
                    utt.id, utt.speaker
                )));
            }
            if utt.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "utterance '{}' contains NaN or Inf",
                    utt.id
                )));
            }
        }
        Ok(())
    }

    /// Utterances for the given ids, preserving id order.
    pub fn by_ids<'a>(&'a self, ids: &[String]) -> Result<Vec<&'a Utterance>> {
        let index: HashMap<&str, &Utterance> = self
            .utterances
            .iter()
            .map(|u| (u.id.as_str(), u))
            .collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("unknown utterance id '{}'", id)))
            })
            .collect()
    }

    /// Distinct speaker indices present in the given utterances.
    pub fn speakers_of<'a>(utts: impl IntoIterator<Item = &'a Utterance>) -> Vec<usize> {
        let mut speakers: Vec<usize> = utts.into_iter().map(|u| u.speaker).collect();
        speakers.sort_unstable();
        speakers.dedup();
        speakers
    }
}
