//! Metrics, speaker-leakage probing of embeddings, and 2-d projection export.

use crate::autodiff::Tape;
use crate::data::{make_eval_batches, Utterance};
use crate::error::{Error, Result};
use crate::model::{features_leaf, forward, EmbeddingRecord, ForwardMode, ModelParameters};
use crate::rng::{indexed, rng_from, substream};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Classification metrics. `confusion[truth][predicted]`; accuracy is
/// overall (unweighted) accuracy, `trace / total`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_pairs(pairs: &[(usize, usize)], classes: usize) -> Self {
        let mut confusion = vec![vec![0usize; classes]; classes];
        for &(truth, pred) in pairs {
            confusion[truth][pred] += 1;
        }
        let total: usize = pairs.len();
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_recall = (0..classes)
            .map(|c| {
                let support: usize = confusion[c].iter().sum();
                if support == 0 {
                    0.0
                } else {
                    confusion[c][c] as f64 / support as f64
                }
            })
            .collect();
        Metrics {
            accuracy: correct as f64 / total as f64,
            per_class_recall,
            confusion,
        }
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode emotion metrics over a split. Deterministic and independent of
/// batch partitioning: utterances are processed per-row with no cross-batch
/// coupling in eval mode.
pub fn evaluate(
    params: &mut ModelParameters,
    utterances: &[&Utterance],
    batch_size: usize,
) -> Result<Metrics> {
    if utterances.is_empty() {
        return Err(Error::Contract("evaluate: empty split".into()));
    }
    let classes = params.config.emotion_head.classes;
    let batches = make_eval_batches(
        utterances,
        params.config.feature_dim,
        classes,
        None,
        batch_size.max(1),
    )?;
    let mut pairs = Vec::with_capacity(utterances.len());
    for batch in &batches {
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let x = features_leaf(&mut tape, batch, false);
        let out = forward(&mut tape, params, &ids, x, batch, &ForwardMode::eval(), None)?;
        let logits = tape.value(out.emotion_logits).data();
        for (b, &truth) in batch.emotion_labels.iter().enumerate() {
            let pred = argmax(&logits[b * classes..(b + 1) * classes]);
            pairs.push((truth, pred));
        }
    }
    Ok(Metrics::from_pairs(&pairs, classes))
}

// ----- speaker probe ------------------------------------------------------------

/// Linearly decodable speaker information in a set of embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe_accuracy: f64,
    /// `1 / num_probe_speakers`.
    pub chance_level: f64,
    pub num_probe_speakers: usize,
    /// `probe_accuracy / chance_level`; 1.0 means no decodable speaker
    /// information, larger means leakage.
    pub leakage_ratio: f64,
}

const PROBE_ITERATIONS: usize = 500;
const PROBE_STEP: f64 = 0.1;

/// Trains a multinomial logistic regression from embeddings to speaker
/// labels and reports held-out accuracy. Each speaker's records are split
/// 50/50 (seeded) into probe-train and probe-eval; inputs are standardized
/// per dimension with probe-train statistics; the probe is fit by full-batch
/// gradient descent from zero weights, which makes it deterministic.
pub fn speaker_probe(records: &[EmbeddingRecord], seed: u64) -> Result<ProbeResult> {
    let mut by_speaker: BTreeMap<usize, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for r in records {
        by_speaker.entry(r.speaker).or_default().push(r);
    }
    if by_speaker.len() < 2 {
        return Err(Error::Contract(format!(
            "speaker probe needs at least 2 speakers, got {}",
            by_speaker.len()
        )));
    }
    if let Some((spk, rs)) = by_speaker.iter().find(|(_, rs)| rs.len() < 4) {
        return Err(Error::Contract(format!(
            "speaker probe needs at least 4 utterances per speaker; speaker {} has {}",
            spk,
            rs.len()
        )));
    }
    let dim = records[0].embedding.len();
    if records.iter().any(|r| r.embedding.len() != dim) {
        return Err(Error::Contract("embedding dimensions differ".into()));
    }

    let classes = by_speaker.len();
    let stream = substream(seed, "probe");
    let mut train: Vec<(usize, &EmbeddingRecord)> = Vec::new();
    let mut eval: Vec<(usize, &EmbeddingRecord)> = Vec::new();
    for (class, (_, rs)) in by_speaker.iter().enumerate() {
        let mut shuffled = rs.clone();
        shuffled.shuffle(&mut rng_from(indexed(stream, class as u64)));
        let cut = shuffled.len().div_ceil(2);
        for (i, r) in shuffled.into_iter().enumerate() {
            if i < cut {
                train.push((class, r));
            } else {
                eval.push((class, r));
            }
        }
    }

    // per-dimension standardization from probe-train statistics
    let n_train = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for (_, r) in &train {
        for (m, v) in mean.iter_mut().zip(&r.embedding) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n_train;
    }
    let mut std = vec![0.0; dim];
    for (_, r) in &train {
        for (s, (v, m)) in std.iter_mut().zip(r.embedding.iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / n_train).sqrt().max(1e-8);
    }
    let standardize = |r: &EmbeddingRecord| -> Vec<f64> {
        r.embedding
            .iter()
            .zip(mean.iter().zip(&std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    };
    let train_x: Vec<Vec<f64>> = train.iter().map(|(_, r)| standardize(r)).collect();
    let eval_x: Vec<Vec<f64>> = eval.iter().map(|(_, r)| standardize(r)).collect();

    // multinomial logistic regression, full-batch gradient descent
    let mut weights = vec![0.0; classes * dim];
    let mut bias = vec![0.0; classes];
    let mut logits = vec![0.0; classes];
    let mut grad_w = vec![0.0; classes * dim];
    let mut grad_b = vec![0.0; classes];
    for _ in 0..PROBE_ITERATIONS {
        grad_w.fill(0.0);
        grad_b.fill(0.0);
        for ((class, _), x) in train.iter().zip(&train_x) {
            softmax_logits(&weights, &bias, x, &mut logits);
            for c in 0..classes {
                let err = logits[c] - if c == *class { 1.0 } else { 0.0 };
                grad_b[c] += err;
                let row = &mut grad_w[c * dim..(c + 1) * dim];
                for (g, v) in row.iter_mut().zip(x) {
                    *g += err * v;
                }
            }
        }
        let scale = PROBE_STEP / n_train;
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w -= scale * g;
        }
        for (b, g) in bias.iter_mut().zip(&grad_b) {
            *b -= scale * g;
        }
    }

    let mut correct = 0usize;
    for ((class, _), x) in eval.iter().zip(&eval_x) {
        softmax_logits(&weights, &bias, x, &mut logits);
        if argmax(&logits) == *class {
            correct += 1;
        }
    }
    let probe_accuracy = correct as f64 / eval.len() as f64;
    let chance_level = 1.0 / classes as f64;
    Ok(ProbeResult {
        probe_accuracy,
        chance_level,
        num_probe_speakers: classes,
        leakage_ratio: probe_accuracy / chance_level,
    })
}

fn softmax_logits(weights: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let dim = x.len();
    for (c, o) in out.iter_mut().enumerate() {
        let row = &weights[c * dim..(c + 1) * dim];
        *o = bias[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

// ----- PCA projection --------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// One row of `k` coordinates per record, record order preserved.
    pub coords: Vec<Vec<f64>>,
    /// Fraction of total variance along each component, non-increasing.
    pub explained: Vec<f64>,
}

const PCA_ITERATIONS: usize = 500;

/// Projects embeddings onto their top `k` principal components via power
/// iteration with deflation on the covariance matrix. Sign convention: the
/// largest-magnitude loading of each component is positive.
pub fn pca_project(records: &[EmbeddingRecord], k: usize) -> Result<PcaProjection> {
    if records.len() < k + 1 {
        return Err(Error::Contract(format!(
            "PCA needs at least {} records for {} components, got {}",
            k + 1,
            k,
            records.len()
        )));
    }
    let dim = records[0].embedding.len();
    let n = records.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in records {
        for (m, v) in mean.iter_mut().zip(&r.embedding) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let centered: Vec<Vec<f64>> = records
        .iter()
        .map(|r| r.embedding.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let mut cov = vec![0.0; dim * dim];
    for row in &centered {
        for i in 0..dim {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            let dst = &mut cov[i * dim..(i + 1) * dim];
            for (c, &xj) in dst.iter_mut().zip(row) {
                *c += xi * xj;
            }
        }
    }
    for c in &mut cov {
        *c /= n;
    }
    let total_var: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    if total_var <= 1e-30 {
        return Err(Error::Contract("PCA on zero-variance data".into()));
    }

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for comp in 0..k {
        // deterministic start vector, decorrelated across components
        let mut v: Vec<f64> = (0..dim)
            .map(|i| {
                let h = crate::rng::splitmix64((comp * dim + i) as u64 + 1);
                (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        normalize(&mut v);
        let mut next = vec![0.0; dim];
        for _ in 0..PCA_ITERATIONS {
            next.fill(0.0);
            for i in 0..dim {
                let row = &cov[i * dim..(i + 1) * dim];
                next[i] = row.iter().zip(&v).map(|(c, w)| c * w).sum();
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-300 {
                break; // remaining variance is zero
            }
            for (vi, ni) in v.iter_mut().zip(&next) {
                *vi = ni / norm;
            }
        }
        let mut cv = vec![0.0; dim];
        for i in 0..dim {
            cv[i] = cov[i * dim..(i + 1) * dim]
                .iter()
                .zip(&v)
                .map(|(c, w)| c * w)
                .sum();
        }
        let eigenvalue: f64 = cv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().max(0.0);

        // sign convention: largest-magnitude loading positive
        let mut lead = 0;
        for i in 0..dim {
            if v[i].abs() > v[lead].abs() {
                lead = i;
            }
        }
        if v[lead] < 0.0 {
            for vi in &mut v {
                *vi = -*vi;
            }
        }

        // deflate
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] -= eigenvalue * v[i] * v[j];
            }
        }
        components.push(v);
        eigenvalues.push(eigenvalue);
    }

    let coords = centered
        .iter()
        .map(|row| {
            components
                .iter()
                .map(|c| c.iter().zip(row).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let explained = eigenvalues.iter().map(|e| e / total_var).collect();
    Ok(PcaProjection { coords, explained })
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for x in v.iter_mut() {
        *x /= norm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(speaker: usize, emotion: usize, embedding: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord {
            id: format!("r{}-{}", speaker, embedding.len()),
            emotion,
            speaker,
            embedding,
        }
    }

    #[test]
    fn metrics_arithmetic() {
        // perfect predictions
        let pairs: Vec<(usize, usize)> = (0..12).map(|i| (i % 4, i % 4)).collect();
        let m = Metrics::from_pairs(&pairs, 4);
        assert_eq!(m.accuracy, 1.0);
        assert!(m.per_class_recall.iter().all(|&r| r == 1.0));
        assert_eq!(m.total(), 12);

        // constant predictor on balanced data
        let pairs: Vec<(usize, usize)> = (0..40).map(|i| (i % 4, 0)).collect();
        let m = Metrics::from_pairs(&pairs, 4);
        assert_eq!(m.accuracy, 0.25);
        assert_eq!(m.per_class_recall, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.total(), 40);
    }

    #[test]
    fn probe_separates_one_hot_embeddings() {
        let mut records = Vec::new();
        for speaker in 0..5 {
            for _ in 0..8 {
                let mut e = vec![0.0; 5];
                e[speaker] = 1.0;
                records.push(record(speaker, 0, e));
            }
        }
        let result = speaker_probe(&records, 0).unwrap();
        assert!(result.probe_accuracy > 0.99, "{:?}", result);
        assert_eq!(result.num_probe_speakers, 5);
        assert!((result.leakage_ratio - result.probe_accuracy * 5.0).abs() < 1e-12);
    }

    #[test]
    fn probe_is_near_chance_on_speaker_independent_embeddings() {
        use rand::Rng as _;
        let mut rng = crate::rng::rng_from(123);
        let mut records = Vec::new();
        for speaker in 0..25 {
            for _ in 0..40 {
                let e: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                records.push(record(speaker, 0, e));
            }
        }
        let result = speaker_probe(&records, 7).unwrap();
        let chance = result.chance_level;
        assert!(
            result.probe_accuracy >= 0.5 * chance && result.probe_accuracy <= 2.0 * chance,
            "{:?}",
            result
        );
    }

    #[test]
    fn probe_rejects_degenerate_inputs() {
        let records: Vec<EmbeddingRecord> =
            (0..8).map(|i| record(0, 0, vec![i as f64])).collect();
        assert!(speaker_probe(&records, 0).is_err()); // one speaker
        let records: Vec<EmbeddingRecord> =
            (0..6).map(|i| record(i % 2, 0, vec![i as f64])).collect();
        assert!(speaker_probe(&records, 0).is_err()); // 3 per speaker
    }

    #[test]
    fn pca_on_collinear_points() {
        let records: Vec<EmbeddingRecord> = (0..6)
            .map(|i| record(0, 0, vec![i as f64, 2.0 * i as f64, -i as f64]))
            .collect();
        let p = pca_project(&records, 2).unwrap();
        assert!((p.explained[0] - 1.0).abs() < 1e-9, "{:?}", p.explained);
        assert!(p.explained[1].abs() < 1e-9);
    }

    #[test]
    fn pca_coordinates_are_centered_and_order_invariant() {
        use rand::Rng as _;
        let mut rng = crate::rng::rng_from(5);
        let records: Vec<EmbeddingRecord> = (0..30)
            .map(|i| record(i % 3, 0, (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()))
            .collect();
        let p = pca_project(&records, 2).unwrap();
        for comp in 0..2 {
            let mean: f64 =
                p.coords.iter().map(|c| c[comp]).sum::<f64>() / records.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
        assert!(p.explained[0] >= p.explained[1]);
        assert!(p.explained.iter().sum::<f64>() <= 1.0 + 1e-9);

        let mut reversed = records.clone();
        reversed.reverse();
        let q = pca_project(&reversed, 2).unwrap();
        for (i, c) in p.coords.iter().enumerate() {
            let rc = &q.coords[records.len() - 1 - i];
            for comp in 0..2 {
                assert!((c[comp] - rc[comp]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_rejects_zero_variance() {
        let records: Vec<EmbeddingRecord> =
            (0..5).map(|_| record(0, 0, vec![1.0, 1.0])).collect();
        assert!(pca_project(&records, 2).is_err());
    }
}
