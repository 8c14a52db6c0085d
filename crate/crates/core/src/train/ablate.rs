use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arch::{Model, ModelConfig};
use crate::data::{generate_dataset, DatasetConfig, Sample};
use crate::error::Result;
use crate::losses::Toggles;

use super::{train, TrainConfig};

pub const ABLATION_CSV_HEADER: &str = "row,label,mea,sr_f,sr_l,n_seeds,mean_miou,std_miou,per_seed_miou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub toggles: Toggles,
}

impl AblationRow {
    pub fn new(toggles: Toggles) -> Self {
        AblationRow {
            label: toggles.label(),
            toggles,
        }
    }
}

/// The five toggle rows: none, MEA, MEA+SR-L, MEA+SR-F, MEA+SR-F+SR-L.
pub fn default_grid() -> Vec<AblationRow> {
    let t = |mea, sr_f, sr_l| AblationRow::new(Toggles { mea, sr_f, sr_l });
    vec![
        t(false, false, false),
        t(true, false, false),
        t(true, false, true),
        t(true, true, false),
        t(true, true, true),
    ]
}

/// Everything a run needs apart from its toggles and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSetup {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub toggles: Toggles,
    pub seeds: Vec<u64>,
    /// Final mIoU per seed, in percent.
    pub miou: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationResult>,
    pub wall_clock_secs: f64,
    pub workers: usize,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(ABLATION_CSV_HEADER);
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let per_seed: Vec<String> = r.miou.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                i + 1,
                r.label,
                r.toggles.mea as u8,
                r.toggles.sr_f as u8,
                r.toggles.sr_l as u8,
                r.miou.len(),
                r.mean,
                r.std,
                per_seed.join(" ")
            );
        }
        out
    }
}

fn run_one(
    setup: &AblationSetup,
    train_set: &[Sample],
    eval_set: &[Sample],
    toggles: Toggles,
    seed: u64,
) -> Result<f64> {
    let model = Model::build(&setup.model, seed)?;
    let cfg = TrainConfig {
        seed,
        toggles,
        ..setup.train.clone()
    };
    let (_, log) = train(model, train_set, Some(eval_set), &cfg)?;
    Ok(100.0 * log.final_metrics.expect("eval set given").miou)
}

/// Trains every row under every seed. Rows share the seed list, so row
/// differences come from the toggles alone. Results do not depend on `jobs`.
pub fn ablate(setup: &AblationSetup, grid: &[AblationRow], seeds: &[u64], jobs: usize) -> Result<AblationTable> {
    let start = Instant::now();
    let train_set = generate_dataset(&setup.dataset);
    let eval_set = generate_dataset(&setup.dataset.eval_split());
    let work: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|r| (0..seeds.len()).map(move |s| (r, s)))
        .collect();
    let workers = jobs.clamp(1, work.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(r, s)) = work.get(k) else { break };
                let out = run_one(setup, &train_set, &eval_set, grid[r].toggles, seeds[s]);
                results.lock().expect("worker panicked")[k] = Some(out);
            });
        }
    });
    let results = results.into_inner().expect("worker panicked");
    let mut flat = Vec::with_capacity(results.len());
    for r in results {
        flat.push(r.expect("every job ran")?);
    }
    let rows = grid
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let miou = flat[r * seeds.len()..(r + 1) * seeds.len()].to_vec();
            let (mean, std) = mean_std(&miou);
            AblationResult {
                label: row.label.clone(),
                toggles: row.toggles,
                seeds: seeds.to_vec(),
                miou,
                mean,
                std,
            }
        })
        .collect();
    Ok(AblationTable {
        rows,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        workers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_five_rows_in_order() {
        let labels: Vec<String> = default_grid().into_iter().map(|r| r.label).collect();
        assert_eq!(labels, ["baseline", "MEA", "MEA+SR-L", "MEA+SR-F", "MEA+SR-F+SR-L"]);
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]).1, 0.0);
    }
}
