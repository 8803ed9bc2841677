//! End-to-end comparison of the four training strategies over several seeds,
//! reporting validation/test accuracy and embedding speaker leakage per
//! strategy.

use crate::data::{generate_synthetic, read_serf, split_by_speaker, Dataset, SplitManifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate, speaker_probe, ProbeResult};
use crate::model::{embed, ModelConfig};
use crate::training::{train, Strategy, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::Mutex;

/// Model selection: a named preset or a literal configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Preset(String),
    Custom(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSpec::Custom(cfg) => Ok(cfg.clone()),
            ModelSpec::Preset(name) => match name.as_str() {
                "iemocap" => Ok(ModelConfig::iemocap()),
                "mandarin" => Ok(ModelConfig::mandarin()),
                "tiny" => Ok(ModelConfig::tiny()),
                other => Err(Error::Config(format!(
                    "unknown model preset '{}' (expected iemocap, mandarin, or tiny)",
                    other
                ))),
            },
        }
    }
}

/// Where the utterances come from: an on-the-fly synthetic corpus or a
/// feature file plus split manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(crate::data::SyntheticSpec),
    Files { serf: PathBuf, manifest: PathBuf },
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_fractions() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

/// Everything an experiment needs, as a diffable JSON document. Unknown
/// keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    /// Speaker-level split fractions, used when `data` is synthetic.
    #[serde(default = "default_fractions")]
    pub split_fractions: (f64, f64, f64),
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Materializes the dataset and the split manifest.
    pub fn load_data(&self) -> Result<(Dataset, SplitManifest)> {
        match &self.data {
            DataSource::Synthetic(spec) => {
                let dataset = generate_synthetic(spec)?;
                let manifest = split_by_speaker(&dataset, self.split_fractions, self.split_seed)?;
                Ok((dataset, manifest))
            }
            DataSource::Files { serf, manifest } => {
                let dataset = read_serf(serf)?;
                let text = std::fs::read_to_string(manifest)?;
                let manifest = SplitManifest::from_json(&text, &dataset)?;
                Ok((dataset, manifest))
            }
        }
    }
}

/// Outcome of one (strategy, seed) training run, evaluated at the best
/// validation checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub val_probe: ProbeResult,
    pub test_probe: ProbeResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    /// Mean (val - test) accuracy gap.
    pub gap_mean: f64,
    pub test_leakage_mean: f64,
    pub test_leakage_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentResult {
    /// Strategy rows by val/test columns with `mean±std` percentage cells.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("strategy,val_accuracy,test_accuracy\n");
        for row in &self.summary {
            out.push_str(&format!(
                "{},{:.1}%±{:.1}%,{:.1}%±{:.1}%\n",
                row.strategy.name(),
                row.val_mean * 100.0,
                row.val_std * 100.0,
                row.test_mean * 100.0,
                row.test_std * 100.0
            ));
        }
        out
    }

    /// One row per (strategy, seed) cell with the full metric set.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from(
            "strategy,seed,best_epoch,val_accuracy,test_accuracy,\
             val_probe_accuracy,val_leakage_ratio,test_probe_accuracy,test_leakage_ratio\n",
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.strategy.name(),
                c.seed,
                c.best_epoch,
                c.val_accuracy,
                c.test_accuracy,
                c.val_probe.probe_accuracy,
                c.val_probe.leakage_ratio,
                c.test_probe.probe_accuracy,
                c.test_probe.leakage_ratio
            ));
        }
        out
    }

    pub fn row(&self, strategy: Strategy) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.strategy == strategy)
    }
}

/// Runs one cell: train with (strategy, seed), evaluate the best checkpoint
/// on validation and test, probe the embeddings of both held-out splits.
pub fn run_cell(
    dataset: &Dataset,
    manifest: &SplitManifest,
    model_config: &ModelConfig,
    base: &TrainConfig,
    strategy: Strategy,
    seed: u64,
) -> Result<CellResult> {
    let cfg = TrainConfig {
        strategy,
        seed,
        ..base.clone()
    };
    let outcome = train(dataset, manifest, model_config, &cfg, None)?;
    let mut best = outcome.best;

    let val_utts = dataset.by_ids(&manifest.validation)?;
    let test_utts = dataset.by_ids(&manifest.test)?;
    let val_accuracy = evaluate(&mut best, &val_utts, cfg.batch_size)?.accuracy;
    let test_accuracy = evaluate(&mut best, &test_utts, cfg.batch_size)?.accuracy;
    let val_records = embed(&mut best, &val_utts, cfg.batch_size)?.records;
    let test_records = embed(&mut best, &test_utts, cfg.batch_size)?.records;
    let val_probe = speaker_probe(&val_records, seed)?;
    let test_probe = speaker_probe(&test_records, seed)?;

    Ok(CellResult {
        strategy,
        seed,
        best_epoch: outcome.best_epoch,
        val_accuracy,
        test_accuracy,
        val_probe,
        test_probe,
    })
}

/// Runs every (strategy, seed) cell, up to `threads` in parallel. Each cell
/// is single-threaded and deterministic, so the result does not depend on
/// scheduling; cells are reported in (strategy, seed) order.
pub fn run_experiment(
    config: &ExperimentConfig,
    threads: usize,
    progress: Option<&(dyn Fn(&CellResult) + Sync)>,
) -> Result<ExperimentResult> {
    let model_config = config.model.resolve()?;
    model_config.validate()?;
    if let DataSource::Synthetic(spec) = &config.data {
        spec.check_min_length(model_config.receptive_min())?;
    }
    let (dataset, manifest) = config.load_data()?;
    manifest.check_disjoint()?;

    let cells: Vec<(Strategy, u64)> = config
        .strategies
        .iter()
        .flat_map(|&s| config.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    if cells.is_empty() {
        return Err(Error::Config("no (strategy, seed) cells to run".into()));
    }

    let worker_count = threads.max(1).min(cells.len());
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Result<CellResult>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..worker_count {
            scope.spawn(|| loop {
                let index = {
                    let mut guard = next.lock().unwrap();
                    let i = *guard;
                    if i >= cells.len() {
                        break;
                    }
                    *guard += 1;
                    i
                };
                let (strategy, seed) = cells[index];
                let result = run_cell(
                    &dataset,
                    &manifest,
                    &model_config,
                    &config.train,
                    strategy,
                    seed,
                );
                if let (Some(cb), Ok(cell)) = (progress, &result) {
                    cb(cell);
                }
                results.lock().unwrap()[index] = Some(result);
            });
        }
    });

    let mut cells_out = Vec::with_capacity(cells.len());
    for slot in results.into_inner().unwrap() {
        cells_out.push(slot.expect("every cell ran")?);
    }

    let summary = config
        .strategies
        .iter()
        .map(|&strategy| {
            let rows: Vec<&CellResult> =
                cells_out.iter().filter(|c| c.strategy == strategy).collect();
            let vals: Vec<f64> = rows.iter().map(|c| c.val_accuracy).collect();
            let tests: Vec<f64> = rows.iter().map(|c| c.test_accuracy).collect();
            let leaks: Vec<f64> = rows.iter().map(|c| c.test_probe.leakage_ratio).collect();
            let gaps: Vec<f64> = rows
                .iter()
                .map(|c| c.val_accuracy - c.test_accuracy)
                .collect();
            let (val_mean, val_std) = mean_std(&vals);
            let (test_mean, test_std) = mean_std(&tests);
            let (test_leakage_mean, test_leakage_std) = mean_std(&leaks);
            let (gap_mean, _) = mean_std(&gaps);
            SummaryRow {
                strategy,
                val_mean,
                val_std,
                test_mean,
                test_std,
                gap_mean,
                test_leakage_mean,
                test_leakage_std,
            }
        })
        .collect();

    Ok(ExperimentResult {
        cells: cells_out,
        summary,
    })
}

/// Mean and sample standard deviation (n-1 denominator; 0 for n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
