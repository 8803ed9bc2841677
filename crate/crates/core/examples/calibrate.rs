// scratch calibration tool: per-epoch val/test accuracy and test probe
// leakage for one strategy. args: STRATEGY EPOCHS LR LAMBDA TEMPLATE_SEED
use ser_core::data::{generate_synthetic, split_by_speaker, SyntheticSpec};
use ser_core::eval::{evaluate, speaker_probe};
use ser_core::model::{embed, HeadSpec, ModelConfig, RegularizationConfig, TdnnSpec};
use ser_core::training::{train, Strategy, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let strategy: Strategy = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let lr: f64 = args[3].parse().unwrap();
    let lambda: f64 = args[4].parse().unwrap();
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
    let split_seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1);
    let epochs_arg = epochs;
    let schedule = args.get(7).map(|s| s.as_str() == "ramp").unwrap_or(false);
    let head_width: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(16);
    let fc_embed: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(16);

    let spec = SyntheticSpec {
        num_speakers: 35,
        utterances_per_speaker: 40,
        seed: 11,
        ..Default::default()
    };
    let dataset = generate_synthetic(&spec).unwrap();
    let manifest = split_by_speaker(&dataset, (25.0 / 35.0, 5.0 / 35.0, 5.0 / 35.0), split_seed).unwrap();
    let model = ModelConfig {
        feature_dim: 39,
        tdnn1: TdnnSpec { channels: 16, kernel: 5, dilation: 2 },
        tdnn2: TdnnSpec { channels: 16, kernel: 3, dilation: 4 },
        lstm_hidden: 10,
        fc_embed_dim: fc_embed,
        emotion_head: HeadSpec { hidden1: 16, hidden2: 16, classes: 4 },
        speaker_head: HeadSpec { hidden1: head_width, hidden2: head_width, classes: 25 },
        regularization: RegularizationConfig { keep_prob: 1.0, ..Default::default() },
    };
    let cfg = TrainConfig {
        strategy,
        epochs,
        learning_rate: lr,
        grl_lambda: lambda,
        lambda_schedule: if schedule {
            ser_core::training::LambdaSchedule::Ramp
        } else {
            ser_core::training::LambdaSchedule::Constant
        },
        batch_size: 32,
        seed,
        ..Default::default()
    };
    let val = dataset.by_ids(&manifest.validation).unwrap();
    let test = dataset.by_ids(&manifest.test).unwrap();

    let outcome = train(&dataset, &manifest, &model, &cfg, Some(&mut |s| {
        println!(
            "epoch={} loss_e={:.3} loss_s={:.3} val={:.3} spk_head={:.3}",
            s.epoch, s.train_emotion_loss, s.train_speaker_loss,
            s.val_emotion_accuracy, s.speaker_head_accuracy
        );
    }))
    .unwrap();

    for (name, mut params) in [("best", outcome.best), ("last", outcome.last)] {
        let va = evaluate(&mut params, &val, 32).unwrap().accuracy;
        let ta = evaluate(&mut params, &test, 32).unwrap().accuracy;
        let terecs = embed(&mut params, &test, 32).unwrap().records;
        let tp = speaker_probe(&terecs, 0).unwrap();
        // between-speaker vs within-speaker scatter of standardized embeddings
        let dim = terecs[0].embedding.len();
        let n = terecs.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in &terecs { for (m, v) in mean.iter_mut().zip(&r.embedding) { *m += v / n; } }
        let mut sd = vec![0.0; dim];
        for r in &terecs { for (s_, (v, m)) in sd.iter_mut().zip(r.embedding.iter().zip(&mean)) { *s_ += (v - m) * (v - m) / n; } }
        for s_ in &mut sd { *s_ = s_.sqrt().max(1e-12); }
        let std_rec = |r: &ser_core::model::EmbeddingRecord| -> Vec<f64> {
            r.embedding.iter().zip(mean.iter().zip(&sd)).map(|(v, (m, s_))| (v - m) / s_).collect()
        };
        let speakers: std::collections::BTreeSet<usize> = terecs.iter().map(|r| r.speaker).collect();
        let mut between = 0.0;
        let mut within = 0.0;
        for &spk in &speakers {
            let rows: Vec<Vec<f64>> = terecs.iter().filter(|r| r.speaker == spk).map(|r| std_rec(r)).collect();
            let k = rows.len() as f64;
            let mut c = vec![0.0; dim];
            for row in &rows { for (ci, v) in c.iter_mut().zip(row) { *ci += v / k; } }
            between += c.iter().map(|v| v * v).sum::<f64>();
            for row in &rows {
                within += row.iter().zip(&c).map(|(v, ci)| (v - ci) * (v - ci)).sum::<f64>() / k;
            }
        }
        between /= speakers.len() as f64;
        within /= speakers.len() as f64;
        println!(
            "{}: epoch={} val={:.3} test={:.3} gap={:+.3} test_probe={:.3} leakage={:.2} between={:.2} within={:.2} ratio={:.2}",
            name,
            if name == "best" { outcome.best_epoch } else { epochs_arg - 1 },
            va, ta, va - ta, tp.probe_accuracy, tp.leakage_ratio, between, within, between / within
        );
    }
}
