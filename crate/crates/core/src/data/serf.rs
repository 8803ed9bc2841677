//! Binary feature-sequence file format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "SERF" (4 bytes)
//! u32 version = 1
//! u32 feature_dim, u32 num_emotions, u32 num_speakers
//! emotion names, then speaker ids: each u32 byte length + UTF-8 bytes
//! u32 utterance count
//! per utterance:
//!   u32 id byte length + UTF-8 bytes
//!   u32 emotion, u32 speaker, u32 frame count
//!   frame-major f32 values (frame count x feature_dim)
//! ```
//!
//! Round trips are bit-exact: floats are moved as raw 32-bit words.

use super::{Dataset, Utterance};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SERF";
const VERSION: u32 = 1;

pub fn write_serf(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, dataset.feature_dim as u32)?;
    write_u32(&mut w, dataset.emotion_names.len() as u32)?;
    write_u32(&mut w, dataset.speaker_ids.len() as u32)?;
    for name in dataset.emotion_names.iter().chain(&dataset.speaker_ids) {
        write_str(&mut w, name)?;
    }
    write_u32(&mut w, dataset.utterances.len() as u32)?;
    let d = dataset.feature_dim;
    for utt in &dataset.utterances {
        write_str(&mut w, &utt.id)?;
        write_u32(&mut w, utt.emotion as u32)?;
        write_u32(&mut w, utt.speaker as u32)?;
        write_u32(&mut w, utt.frames as u32)?;
        // in-memory layout is channel-major (d x l); disk layout is frame-major
        let mut buf = Vec::with_capacity(utt.frames * d * 4);
        for t in 0..utt.frames {
            for c in 0..d {
                buf.extend_from_slice(&utt.features[c * utt.frames + t].to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_serf(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"SERF\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {}, expected {}",
            version, VERSION
        )));
    }
    let feature_dim = read_u32(&mut r, "feature_dim")? as usize;
    let num_emotions = read_u32(&mut r, "emotion count")? as usize;
    let num_speakers = read_u32(&mut r, "speaker count")? as usize;
    let emotion_names: Vec<String> = (0..num_emotions)
        .map(|_| read_str(&mut r, "emotion name"))
        .collect::<Result<_>>()?;
    let speaker_ids: Vec<String> = (0..num_speakers)
        .map(|_| read_str(&mut r, "speaker id"))
        .collect::<Result<_>>()?;
    let count = read_u32(&mut r, "utterance count")? as usize;
    let mut utterances = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id = read_str(&mut r, "utterance id")?;
        let emotion = read_u32(&mut r, "emotion label")? as usize;
        let speaker = read_u32(&mut r, "speaker label")? as usize;
        let frames = read_u32(&mut r, "frame count")? as usize;
        let mut raw = vec![0u8; frames.saturating_mul(feature_dim) * 4];
        read_exact(&mut r, &mut raw, "feature values")?;
        let mut features = vec![0.0f32; frames * feature_dim];
        for t in 0..frames {
            for c in 0..feature_dim {
                let off = (t * feature_dim + c) * 4;
                let bits = [raw[off], raw[off + 1], raw[off + 2], raw[off + 3]];
                features[c * frames + t] = f32::from_le_bytes(bits);
            }
        }
        utterances.push(Utterance {
            id,
            features,
            frames,
            emotion,
            speaker,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last utterance".into()));
    }
    let dataset = Dataset {
        feature_dim,
        emotion_names,
        speaker_ids,
        utterances,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Truncated(format!("file ended while reading {}", what)))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    if len > (1 << 24) {
        return Err(Error::Format(format!("unreasonable {} length {}", what, len)));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{} is not valid UTF-8", what)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;
    use std::io::Write as _;

    pub(crate) fn random_dataset(seed: u64) -> Dataset {
        let mut rng = rng_from(seed);
        let d = rng.gen_range(1..6);
        let emotions = rng.gen_range(2..5);
        let speakers = rng.gen_range(1..5);
        let count = rng.gen_range(0..8);
        let utterances = (0..count)
            .map(|i| {
                let frames = rng.gen_range(1..12);
                Utterance {
                    id: format!("utt-{}-ßé{}", seed, i), // non-ASCII ids on purpose
                    features: (0..d * frames).map(|_| rng.gen::<f32>() * 8.0 - 4.0).collect(),
                    frames,
                    emotion: rng.gen_range(0..emotions),
                    speaker: rng.gen_range(0..speakers),
                }
            })
            .collect();
        Dataset {
            feature_dim: d,
            emotion_names: (0..emotions).map(|i| format!("emo{}", i)).collect(),
            speaker_ids: (0..speakers).map(|i| format!("spk{:03}", i)).collect(),
            utterances,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..20 {
            let dataset = random_dataset(seed);
            let path = dir.path().join(format!("{}.serf", seed));
            write_serf(&dataset, &path).unwrap();
            let back = read_serf(&path).unwrap();
            assert_eq!(dataset.feature_dim, back.feature_dim);
            assert_eq!(dataset.emotion_names, back.emotion_names);
            assert_eq!(dataset.speaker_ids, back.speaker_ids);
            assert_eq!(dataset.utterances.len(), back.utterances.len());
            for (a, b) in dataset.utterances.iter().zip(&back.utterances) {
                assert_eq!(a.id, b.id);
                assert_eq!((a.emotion, a.speaker, a.frames), (b.emotion, b.speaker, b.frames));
                let bits_a: Vec<u32> = a.features.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.features.iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = Dataset {
            feature_dim: 3,
            emotion_names: vec!["a".into(), "b".into()],
            speaker_ids: vec!["s".into()],
            utterances: vec![],
        };
        let path = dir.path().join("empty.serf");
        write_serf(&dataset, &path).unwrap();
        let back = read_serf(&path).unwrap();
        assert!(back.utterances.is_empty());
    }

    #[test]
    fn bad_magic_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.serf");
        std::fs::File::create(&path)
            .unwrap()
            .write_all(b"XERF\x01\x00\x00\x00")
            .unwrap();
        let err = read_serf(&path).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("XERF"), "{}", msg),
            other => panic!("expected format error, got {:?}", other),
        }
    }

    #[test]
    fn truncated_file_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = random_dataset(3);
        let path = dir.path().join("full.serf");
        write_serf(&dataset, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [5usize, 12, bytes.len().saturating_sub(3)] {
            if cut >= bytes.len() {
                continue;
            }
            let path2 = dir.path().join(format!("cut{}.serf", cut));
            std::fs::write(&path2, &bytes[..cut]).unwrap();
            let err = read_serf(&path2).unwrap_err();
            assert!(
                matches!(err, Error::Truncated(_)),
                "cut at {}: got {:?}",
                cut,
                err
            );
        }
    }

    #[test]
    fn out_of_range_label_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut dataset = random_dataset(5);
        while dataset.utterances.is_empty() {
            dataset = random_dataset(6);
        }
        let path = dir.path().join("labels.serf");
        write_serf(&dataset, &path).unwrap();
        // corrupt the first utterance's emotion label to a huge value:
        // it sits right after the header/name tables + id
        let mut bytes = std::fs::read(&path).unwrap();
        let mut off = 4 + 4 + 12;
        for _ in 0..dataset.emotion_names.len() + dataset.speaker_ids.len() {
            let len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            off += 4 + len;
        }
        off += 4; // utterance count
        let id_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4 + id_len;
        bytes[off..off + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        let path2 = dir.path().join("corrupt.serf");
        std::fs::write(&path2, &bytes).unwrap();
        assert!(matches!(read_serf(&path2), Err(Error::Validation(_))));
    }
}
