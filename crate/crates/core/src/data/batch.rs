//! Length-bucketed batching of utterances into padded [`SequenceBatch`]es.

use super::Utterance;
use crate::error::{Error, Result};
use crate::layers::SequenceBatch;
use crate::rng::{indexed, rng_from};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use std::collections::HashMap;

/// Maps dataset speaker indices onto the model's speaker-class space
/// (typically the sorted training-split speakers, matching the speaker
/// head's output size).
#[derive(Debug, Clone)]
pub struct SpeakerSpace {
    classes: Vec<usize>,
    index: HashMap<usize, usize>,
}

impl SpeakerSpace {
    pub fn new(speakers: impl IntoIterator<Item = usize>) -> Self {
        let mut classes: Vec<usize> = speakers.into_iter().collect();
        classes.sort_unstable();
        classes.dedup();
        let index = classes.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        SpeakerSpace { classes, index }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_of(&self, speaker: usize) -> Option<usize> {
        self.index.get(&speaker).copied()
    }

    /// Dataset speaker index behind each model class.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }
}

/// Length-bucketed training batches: utterances are sorted by (length, id),
/// sliced into consecutive chunks of `batch_size`, and the chunk order is
/// shuffled with an epoch-seeded RNG. Every utterance appears exactly once
/// per epoch; padding within a chunk is limited to the chunk's length spread.
pub fn make_batches(
    utterances: &[&Utterance],
    feature_dim: usize,
    num_emotions: usize,
    speaker_space: Option<&SpeakerSpace>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<SequenceBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut sorted: Vec<&Utterance> = utterances.to_vec();
    sorted.sort_by(|a, b| a.frames.cmp(&b.frames).then_with(|| a.id.cmp(&b.id)));
    let mut chunks: Vec<&[&Utterance]> = sorted.chunks(batch_size).collect();
    chunks.shuffle(&mut rng_from(indexed(seed, epoch)));
    chunks
        .into_iter()
        .map(|chunk| build_batch(chunk, feature_dim, num_emotions, speaker_space))
        .collect()
}

/// Batches in the given order, no sorting or shuffling. For evaluation and
/// embedding extraction.
pub fn make_eval_batches(
    utterances: &[&Utterance],
    feature_dim: usize,
    num_emotions: usize,
    speaker_space: Option<&SpeakerSpace>,
    batch_size: usize,
) -> Result<Vec<SequenceBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    utterances
        .chunks(batch_size)
        .map(|chunk| build_batch(chunk, feature_dim, num_emotions, speaker_space))
        .collect()
}

fn build_batch(
    chunk: &[&Utterance],
    feature_dim: usize,
    num_emotions: usize,
    speaker_space: Option<&SpeakerSpace>,
) -> Result<SequenceBatch> {
    let batch = chunk.len();
    let max_len = chunk.iter().map(|u| u.frames).max().unwrap_or(0);
    let mut features = vec![0.0f64; batch * feature_dim * max_len];
    let mut emotion_targets = vec![0.0f64; batch * num_emotions];
    let mut ids = Vec::with_capacity(batch);
    let mut valid_lengths = Vec::with_capacity(batch);
    let mut emotion_labels = Vec::with_capacity(batch);
    let mut speaker_labels = Vec::with_capacity(batch);

    for (b, utt) in chunk.iter().enumerate() {
        if utt.features.len() != feature_dim * utt.frames {
            return Err(Error::Validation(format!(
                "utterance '{}' does not have {} channels",
                utt.id, feature_dim
            )));
        }
        if utt.emotion >= num_emotions {
            return Err(Error::Validation(format!(
                "utterance '{}': emotion {} out of range",
                utt.id, utt.emotion
            )));
        }
        for c in 0..feature_dim {
            for t in 0..utt.frames {
                features[(b * feature_dim + c) * max_len + t] =
                    utt.features[c * utt.frames + t] as f64;
            }
        }
        emotion_targets[b * num_emotions + utt.emotion] = 1.0;
        ids.push(utt.id.clone());
        valid_lengths.push(utt.frames);
        emotion_labels.push(utt.emotion);
        speaker_labels.push(utt.speaker);
    }

    let speaker_targets = match speaker_space {
        Some(space) => {
            let mapped: Option<Vec<usize>> = chunk
                .iter()
                .map(|u| space.class_of(u.speaker))
                .collect();
            mapped.map(|classes| {
                let mut one_hot = vec![0.0f64; batch * space.len()];
                for (b, class) in classes.into_iter().enumerate() {
                    one_hot[b * space.len() + class] = 1.0;
                }
                Tensor::from_parts(vec![batch, space.len()], one_hot)
            })
        }
        None => None,
    };

    Ok(SequenceBatch {
        ids,
        features: Tensor::from_parts(vec![batch, feature_dim, max_len], features),
        valid_lengths,
        emotion_labels,
        speaker_labels,
        emotion_targets: Tensor::from_parts(vec![batch, num_emotions], emotion_targets),
        speaker_targets,
    })
}
