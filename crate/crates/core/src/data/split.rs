//! Speaker-disjoint splitting and the session-based cross-validation driver.

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Per-speaker session tags, as stored in the sidecar metadata JSON
/// `{speaker_id: {"session": string}}`.
pub type SessionMap = BTreeMap<String, SpeakerTag>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SpeakerTag {
    pub session: String,
}

/// Utterance-id lists per split plus the speaker set behind each list.
/// Splits partition the utterances; the speaker sets must be pairwise
/// disjoint, which [`SplitManifest::check_disjoint`] verifies rather than
/// assumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub train_speakers: BTreeSet<String>,
    pub validation_speakers: BTreeSet<String>,
    pub test_speakers: BTreeSet<String>,
}

/// The on-disk form holds only the id lists; speaker sets are rebuilt
/// against a dataset on load.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestJson {
    train: Vec<String>,
    validation: Vec<String>,
    test: Vec<String>,
}

impl SplitManifest {
    pub fn check_disjoint(&self) -> Result<()> {
        let mut offending: BTreeSet<String> = BTreeSet::new();
        for (a, b) in [
            (&self.train_speakers, &self.validation_speakers),
            (&self.train_speakers, &self.test_speakers),
            (&self.validation_speakers, &self.test_speakers),
        ] {
            offending.extend(a.intersection(b).cloned());
        }
        if offending.is_empty() {
            Ok(())
        } else {
            Err(Error::SplitOverlap {
                speakers: offending.into_iter().collect(),
            })
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let json = ManifestJson {
            train: self.train.clone(),
            validation: self.validation.clone(),
            test: self.test.clone(),
        };
        Ok(serde_json::to_string_pretty(&json)?)
    }

    /// Parses the id lists and rebuilds the speaker sets from `dataset`.
    pub fn from_json(text: &str, dataset: &Dataset) -> Result<Self> {
        let json: ManifestJson = serde_json::from_str(text)?;
        Self::from_id_lists(json.train, json.validation, json.test, dataset)
    }

    pub fn from_id_lists(
        train: Vec<String>,
        validation: Vec<String>,
        test: Vec<String>,
        dataset: &Dataset,
    ) -> Result<Self> {
        let speakers_of = |ids: &[String]| -> Result<BTreeSet<String>> {
            Ok(dataset
                .by_ids(ids)?
                .iter()
                .map(|u| dataset.speaker_ids[u.speaker].clone())
                .collect())
        };
        Ok(SplitManifest {
            train_speakers: speakers_of(&train)?,
            validation_speakers: speakers_of(&validation)?,
            test_speakers: speakers_of(&test)?,
            train,
            validation,
            test,
        })
    }
}

/// Shuffles speakers (not utterances) and partitions them by the given
/// fractions; every utterance follows its speaker into the split.
pub fn split_by_speaker(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitManifest> {
    let total = dataset.num_speakers();
    if total < 3 {
        return Err(Error::Config(format!(
            "need at least 3 speakers to form three splits, got {}",
            total
        )));
    }
    let (f_train, f_val, f_test) = fractions;
    if f_train <= 0.0 || f_val <= 0.0 || f_test <= 0.0 || (f_train + f_val + f_test - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {:?} must be positive and sum to 1",
            fractions
        )));
    }

    let mut speakers: Vec<usize> = (0..total).collect();
    speakers.shuffle(&mut rng_from(seed));

    let n_val = ((total as f64 * f_val).round() as usize).max(1);
    let n_test = ((total as f64 * f_test).round() as usize).max(1);
    if n_val + n_test >= total {
        return Err(Error::Config(format!(
            "fractions {:?} leave no training speakers out of {}",
            fractions, total
        )));
    }
    let n_train = total - n_val - n_test;

    let train_set: BTreeSet<usize> = speakers[..n_train].iter().cloned().collect();
    let val_set: BTreeSet<usize> = speakers[n_train..n_train + n_val].iter().cloned().collect();

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for utt in &dataset.utterances {
        if train_set.contains(&utt.speaker) {
            train.push(utt.id.clone());
        } else if val_set.contains(&utt.speaker) {
            validation.push(utt.id.clone());
        } else {
            test.push(utt.id.clone());
        }
    }
    let manifest = SplitManifest::from_id_lists(train, validation, test, dataset)?;
    manifest.check_disjoint()?;
    Ok(manifest)
}

/// One cross-validation fold: train on every other session; the held-out
/// session's two speakers fill the validation and test slots. Which of the
/// two goes where is unstated in the protocol, so both orientations are
/// emitted and experiment recipes average over them.
#[derive(Debug, Clone)]
pub struct CvFold {
    pub held_out_session: String,
    pub orientations: [SplitManifest; 2],
}

/// Builds `k` folds from session-tagged speakers (two speakers per session).
pub fn make_cv_folds(dataset: &Dataset, sessions: &SessionMap, k: usize) -> Result<Vec<CvFold>> {
    for speaker in &dataset.speaker_ids {
        if !sessions.contains_key(speaker) {
            return Err(Error::Config(format!(
                "speaker '{}' has no session tag",
                speaker
            )));
        }
    }
    let mut by_session: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for speaker in &dataset.speaker_ids {
        by_session
            .entry(sessions[speaker].session.as_str())
            .or_default()
            .push(speaker.as_str());
    }
    if by_session.len() != k {
        return Err(Error::Config(format!(
            "expected {} sessions, found {}",
            k,
            by_session.len()
        )));
    }
    for (session, speakers) in &by_session {
        if speakers.len() != 2 {
            return Err(Error::Config(format!(
                "session '{}' has {} speakers, layout requires exactly 2",
                session,
                speakers.len()
            )));
        }
    }

    let speaker_index: BTreeMap<&str, usize> = dataset
        .speaker_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut folds = Vec::with_capacity(k);
    for (session, speakers) in &by_session {
        let mut pair = speakers.clone();
        pair.sort_unstable();
        let (a, b) = (speaker_index[pair[0]], speaker_index[pair[1]]);
        let mut orientations = Vec::with_capacity(2);
        for (val_speaker, test_speaker) in [(a, b), (b, a)] {
            let mut train = Vec::new();
            let mut validation = Vec::new();
            let mut test = Vec::new();
            for utt in &dataset.utterances {
                if utt.speaker == val_speaker {
                    validation.push(utt.id.clone());
                } else if utt.speaker == test_speaker {
                    test.push(utt.id.clone());
                } else {
                    train.push(utt.id.clone());
                }
            }
            let manifest = SplitManifest::from_id_lists(train, validation, test, dataset)?;
            manifest.check_disjoint()?;
            orientations.push(manifest);
        }
        folds.push(CvFold {
            held_out_session: session.to_string(),
            orientations: orientations.try_into().expect("two orientations"),
        });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};

    fn dataset(speakers: usize, per: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            num_speakers: speakers,
            utterances_per_speaker: per,
            feature_dim: 3,
            length_range: (5, 9),
            seed: 21,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn protocol_counts_on_250_speakers() {
        let ds = dataset(250, 2);
        let m = split_by_speaker(&ds, (0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!(m.train_speakers.len(), 200);
        assert_eq!(m.validation_speakers.len(), 25);
        assert_eq!(m.test_speakers.len(), 25);
    }

    #[test]
    fn splits_partition_utterances_and_speakers() {
        let ds = dataset(11, 4);
        let m = split_by_speaker(&ds, (0.8, 0.1, 0.1), 9).unwrap();
        let mut all: Vec<&String> = m.train.iter().chain(&m.validation).chain(&m.test).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), ds.utterances.len());
        m.check_disjoint().unwrap();
    }

    #[test]
    fn too_few_speakers_is_an_error() {
        let ds = dataset(2, 3);
        assert!(split_by_speaker(&ds, (0.8, 0.1, 0.1), 0).is_err());
    }

    #[test]
    fn manifest_json_round_trip() {
        let ds = dataset(5, 3);
        let m = split_by_speaker(&ds, (0.6, 0.2, 0.2), 1).unwrap();
        let text = m.to_json().unwrap();
        let back = SplitManifest::from_json(&text, &ds).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn overlap_is_detected_and_named() {
        let ds = dataset(4, 2);
        let mut ids: Vec<String> = ds.utterances.iter().map(|u| u.id.clone()).collect();
        let test = vec![ids.pop().unwrap()];
        let validation = vec![ids.pop().unwrap(), ids[0].clone()]; // shares speaker 0 with train
        let m = SplitManifest::from_id_lists(ids, validation, test, &ds).unwrap();
        match m.check_disjoint() {
            Err(Error::SplitOverlap { speakers }) => {
                assert!(speakers.contains(&"spk000".to_string()), "{:?}", speakers);
            }
            other => panic!("expected overlap error, got {:?}", other),
        }
    }

    #[test]
    fn cv_folds_follow_the_session_layout() {
        let ds = dataset(10, 4);
        let sessions: SessionMap = ds
            .speaker_ids
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (
                    s.clone(),
                    SpeakerTag {
                        session: format!("session{}", i / 2),
                    },
                )
            })
            .collect();
        let folds = make_cv_folds(&ds, &sessions, 5).unwrap();
        assert_eq!(folds.len(), 5);
        for fold in &folds {
            for m in &fold.orientations {
                assert_eq!(m.train_speakers.len(), 8);
                assert_eq!(m.validation_speakers.len(), 1);
                assert_eq!(m.test_speakers.len(), 1);
                m.check_disjoint().unwrap();
            }
            // the two orientations swap the held-out pair
            assert_eq!(
                fold.orientations[0].validation_speakers,
                fold.orientations[1].test_speakers
            );
        }
        // across folds, test speakers cover one speaker per session
        let covered: BTreeSet<&String> = folds
            .iter()
            .map(|f| f.orientations[0].test_speakers.iter().next().unwrap())
            .collect();
        assert_eq!(covered.len(), 5);
    }

    #[test]
    fn cv_rejects_bad_session_sizes() {
        let ds = dataset(9, 2);
        let sessions: SessionMap = ds
            .speaker_ids
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (
                    s.clone(),
                    SpeakerTag {
                        session: format!("session{}", i / 2),
                    },
                )
            })
            .collect();
        // 9 speakers -> last session has a single speaker
        assert!(make_cv_folds(&ds, &sessions, 5).is_err());
    }
}
