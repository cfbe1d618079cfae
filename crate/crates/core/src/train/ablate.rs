use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HceLoss, HclLoss, TrainConfig, Trainer};
use crate::data;
use crate::error::{Error, Result};
use crate::hce::HceMode;
use crate::losses::OrderingMode;
use crate::parallel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Add the rows that swap either auxiliary objective for cross-entropy.
    pub loss_variants: bool,
    /// Full-model rows at each of these shuffle proportions.
    pub sigmas: Vec<f64>,
    /// Full-model rows at each of these granularity counts.
    pub ms: Vec<u32>,
    /// Full model with frozen view features.
    pub frozen: bool,
    /// Full model with the unclamped ordering penalty.
    pub raw_ordering: bool,
    /// Mixup in place of both auxiliary branches.
    pub mixup: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            base: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            output: PathBuf::from("runs/ablate"),
            loss_variants: true,
            sigmas: Vec::new(),
            ms: Vec::new(),
            frozen: false,
            raw_ordering: false,
            mixup: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub config: TrainConfig,
}

/// Rows in table order: baseline, +hcl, +hce, full, then the requested
/// variants and sweeps.
pub fn ablation_plan(cfg: &AblationConfig) -> Vec<AblationRow> {
    let with = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = cfg.base.clone();
        c.mixup_baseline = false;
        c.enable_hcl = true;
        c.enable_hce = true;
        f(&mut c);
        AblationRow {
            name: name.to_string(),
            config: c,
        }
    };
    let mut rows = vec![
        with("baseline", &|c| {
            c.enable_hcl = false;
            c.enable_hce = false;
        }),
        with("+hcl", &|c| c.enable_hce = false),
        with("+hce", &|c| c.enable_hcl = false),
        with("full", &|_| {}),
    ];
    if cfg.loss_variants {
        rows.push(with("+hcl[ce]", &|c| {
            c.enable_hce = false;
            c.hcl_loss = HclLoss::Ce;
        }));
        rows.push(with("+hce[ce]", &|c| {
            c.enable_hcl = false;
            c.hce_loss = HceLoss::Ce;
        }));
        rows.push(with("full[hcl=ce]", &|c| c.hcl_loss = HclLoss::Ce));
        rows.push(with("full[hce=ce]", &|c| c.hce_loss = HceLoss::Ce));
        rows.push(with("full[ce,ce]", &|c| {
            c.hcl_loss = HclLoss::Ce;
            c.hce_loss = HceLoss::Ce;
        }));
    }
    for &s in &cfg.sigmas {
        rows.push(with(&format!("full[sigma={s}]"), &|c| c.sigma = s));
    }
    for &m in &cfg.ms {
        rows.push(with(&format!("full[m={m}]"), &|c| c.m = m));
    }
    if cfg.frozen {
        rows.push(with("full[frozen]", &|c| c.hce_mode = HceMode::Frozen));
    }
    if cfg.raw_ordering {
        rows.push(with("full[raw]", &|c| c.ordering_mode = OrderingMode::Raw));
    }
    if cfg.mixup {
        rows.push(with("mixup", &|c| {
            c.enable_hcl = false;
            c.enable_hce = false;
            c.mixup_baseline = true;
        }));
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Test accuracy after the last epoch, per seed.
    pub test_acc: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
    /// Highest per-epoch test accuracy, per seed.
    pub best_test_acc: Vec<f64>,
    pub best_mean: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<RowResult>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn dir_name(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Trains every (row, seed) cell and writes `table.json` under
/// `cfg.output`. Cells run concurrently up to the worker cap; each cell is
/// single-threaded, so results do not depend on the cap.
pub fn ablate(cfg: &AblationConfig) -> Result<AblationTable> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let dataset = data::load(&cfg.base.dataset)?;
    let plan = ablation_plan(cfg);
    let cells: Vec<(usize, u64)> = (0..plan.len()).flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s))).collect();
    let results: Vec<Result<(f64, f64, f64)>> = parallel::with_pool(|| {
        cells
            .par_iter()
            .map(|&(r, seed)| {
                let mut config = plan[r].config.clone();
                config.seed = seed;
                config.output = cfg.output.join(dir_name(&plan[r].name)).join(format!("seed{seed}"));
                let start = Instant::now();
                let outcome = Trainer {
                    config,
                    dataset: &dataset,
                }
                .run()?;
                Ok((outcome.final_test_acc, outcome.best_test_acc, start.elapsed().as_secs_f64()))
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let per_row = cfg.seeds.len();
    let rows = plan
        .iter()
        .zip(results.chunks(per_row))
        .map(|(row, cell)| {
            let test_acc: Vec<f64> = cell.iter().map(|c| c.0).collect();
            let best_test_acc: Vec<f64> = cell.iter().map(|c| c.1).collect();
            let (mean, std) = mean_std(&test_acc);
            RowResult {
                name: row.name.clone(),
                seeds: cfg.seeds.clone(),
                best_mean: mean_std(&best_test_acc).0,
                test_acc,
                mean,
                std,
                best_test_acc,
                seconds: cell.iter().map(|c| c.2).sum(),
            }
        })
        .collect();
    let table = AblationTable { rows };
    std::fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    let path = cfg.output.join("table.json");
    std::fs::write(&path, serde_json::to_string_pretty(&table)?).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}
