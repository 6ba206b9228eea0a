//! Strategy comparison: fine-tuning from scratch against fine-tuning from
//! each pre-training strategy, over shared seeds and splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::{config_hash, sha256_hex};
use crate::config::{RunConfig, Strategy};
use crate::data::{PairedDataset, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, Metrics};
use crate::scalar::Scalar;
use crate::train::{finetune, pretrain, Init};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum AblationRow {
    Scratch,
    Pretrained(Strategy),
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::Scratch,
        AblationRow::Pretrained(Strategy::MtmMask),
        AblationRow::Pretrained(Strategy::MtmFeature),
        AblationRow::Pretrained(Strategy::Mmcl),
        AblationRow::Pretrained(Strategy::MtCmtm),
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::Scratch => "PM",
            AblationRow::Pretrained(Strategy::MtmMask) => "PM + pretext mask",
            AblationRow::Pretrained(Strategy::MtmFeature) => "PM + pretext feature",
            AblationRow::Pretrained(Strategy::Mmcl) => "PM + MM-CL",
            AblationRow::Pretrained(Strategy::MtCmtm) => "PM + MT-CMTM",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            AblationRow::Scratch => "scratch",
            AblationRow::Pretrained(s) => s.key(),
        }
    }

    pub fn parse(key: &str) -> Result<Self> {
        AblationRow::ALL
            .into_iter()
            .find(|r| r.key() == key)
            .ok_or_else(|| Error::Config(format!("unknown ablation row `{key}`")))
    }
}

/// A named downstream dataset.
pub struct AblationTask<'a> {
    pub name: String,
    pub data: &'a PairedDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRecord {
    pub run_id: String,
    pub task: String,
    pub row: AblationRow,
    pub seed: u64,
    pub train_fraction: f64,
    pub best_epoch: usize,
    /// Hash of the sorted test row ids.
    pub test_ids: String,
    pub test: Metrics,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationReport {
    pub records: Vec<AblationRecord>,
}

/// Stable run identifier for one (config, task, row, seed).
pub fn run_id(cfg: &RunConfig, task: &str, row: AblationRow, seed: u64) -> String {
    let key = format!("{}|{task}|{}|{seed}", config_hash(cfg), row.key());
    sha256_hex(key.as_bytes())[..16].to_string()
}

fn ids_hash(ids: &[usize]) -> String {
    let text: Vec<String> = ids.iter().map(usize::to_string).collect();
    sha256_hex(text.join(",").as_bytes())[..16].to_string()
}

/// Runs every requested row for every seed in `cfg.run.seeds` and task.
/// Each pre-training is done once per (strategy, seed) and reused across
/// tasks whose inputs and splits coincide.
pub fn run_ablation<T: Scalar>(
    cfg: &RunConfig,
    tasks: &[AblationTask<'_>],
    rows: &[AblationRow],
) -> Result<AblationReport> {
    if tasks.is_empty() || rows.is_empty() {
        return Err(Error::Config("ablation needs at least one task and one row".into()));
    }
    let mut report = AblationReport::default();
    for &seed in &cfg.run.seeds {
        // (strategy, index of the task that was pre-trained on) -> checkpoint
        let mut cache: BTreeMap<(Strategy, usize), crate::checkpoint::Checkpoint> = BTreeMap::new();
        for (ti, task) in tasks.iter().enumerate() {
            let (_, test_rows) = task.data.eval_indices();
            let test_ids = ids_hash(&test_rows);
            for &row in rows {
                let outcome = match row {
                    AblationRow::Scratch => finetune::<T>(cfg, Init::Fresh, task.data, seed)?,
                    AblationRow::Pretrained(strategy) => {
                        let owner = (0..=ti)
                            .find(|&j| tasks[j].data.shares_inputs(task.data))
                            .expect("a task shares inputs with itself");
                        if !cache.contains_key(&(strategy, owner)) {
                            let mut pcfg = cfg.clone();
                            pcfg.pretrain.strategy = strategy;
                            log::info!("pretrain {} seed {seed} on {}", strategy.key(), tasks[owner].name);
                            let pre = pretrain::<T>(&pcfg, tasks[owner].data, seed)?;
                            cache.insert((strategy, owner), pre.checkpoint);
                        }
                        let ck = &cache[&(strategy, owner)];
                        finetune::<T>(cfg, Init::Pretrained(ck), task.data, seed)?
                    }
                };
                log::info!("{} {} seed {seed}: test {:.5}", task.name, row.label(), outcome.test.primary());
                report.records.push(AblationRecord {
                    run_id: run_id(cfg, &task.name, row, seed),
                    task: task.name.clone(),
                    row,
                    seed,
                    train_fraction: cfg.data.train_fraction,
                    best_epoch: outcome.best_epoch,
                    test_ids: test_ids.clone(),
                    test: outcome.test,
                });
            }
        }
    }
    Ok(report)
}

/// Column names and values of every metric, in a fixed order.
fn metric_columns(m: &Metrics) -> Vec<(&'static str, f64)> {
    match *m {
        Metrics::Regression { mae, mse } => vec![("mse", mse), ("mae", mae)],
        Metrics::Classification {
            accuracy,
            balanced_accuracy,
            macro_f1,
        } => vec![
            ("accuracy", accuracy),
            ("balanced_accuracy", balanced_accuracy),
            ("macro_f1", macro_f1),
        ],
    }
}

const METRIC_NAMES: [&str; 5] = ["mse", "mae", "accuracy", "balanced_accuracy", "macro_f1"];

impl AblationReport {
    pub fn tasks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.task) {
                out.push(r.task.clone());
            }
        }
        out
    }

    pub fn rows(&self) -> Vec<AblationRow> {
        let mut out = Vec::new();
        for r in &self.records {
            if !out.contains(&r.row) {
                out.push(r.row);
            }
        }
        out
    }

    pub fn records_for(&self, task: &str, row: AblationRow) -> Vec<&AblationRecord> {
        self.records.iter().filter(|r| r.task == task && r.row == row).collect()
    }

    /// Primary test metric per seed, in seed order of the run.
    pub fn primary(&self, task: &str, row: AblationRow) -> Vec<f64> {
        self.records_for(task, row).iter().map(|r| r.test.primary()).collect()
    }

    /// Mean and population std of the primary test metric.
    pub fn summary(&self, task: &str, row: AblationRow) -> (f64, f64) {
        mean_std(&self.primary(task, row))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["run_id", "task", "row", "seed", "train_fraction", "best_epoch", "test_ids"];
        header.extend(METRIC_NAMES);
        let csv_err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let values: BTreeMap<&str, f64> = metric_columns(&r.test).into_iter().collect();
            let mut rec = vec![
                r.run_id.clone(),
                r.task.clone(),
                r.row.key().to_string(),
                r.seed.to_string(),
                r.train_fraction.to_string(),
                r.best_epoch.to_string(),
                r.test_ids.clone(),
            ];
            rec.extend(METRIC_NAMES.iter().map(|n| values.get(n).map_or(String::new(), |v| format!("{v:.17e}"))));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Mean ± std over seeds of every test metric, one block per task.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for task in self.tasks() {
            let first = self.records.iter().find(|r| r.task == task).expect("task has records");
            let names: Vec<&str> = metric_columns(&first.test).into_iter().map(|(n, _)| n).collect();
            let _ = writeln!(out, "task: {task}");
            let _ = write!(out, "{:<22}", "strategy");
            for n in &names {
                let _ = write!(out, " {n:>22}");
            }
            let _ = writeln!(out);
            for row in self.rows() {
                let recs = self.records_for(&task, row);
                if recs.is_empty() {
                    continue;
                }
                let _ = write!(out, "{:<22}", row.label());
                for (k, _) in names.iter().enumerate() {
                    let xs: Vec<f64> = recs.iter().map(|r| metric_columns(&r.test)[k].1).collect();
                    let (m, s) = mean_std(&xs);
                    let _ = write!(out, " {:>22}", format!("{m:.4} ± {s:.4}"));
                }
                let _ = writeln!(out);
            }
            let _ = writeln!(out);
        }
        out
    }

    /// Writes `ablation.csv` and `ablation.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("ablation.csv");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let txt = dir.join("ablation.txt");
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))?;
        Ok(())
    }
}

/// Sorted test row ids of a dataset, for fairness checks.
pub fn test_ids(data: &PairedDataset) -> Vec<usize> {
    let ids = data.indices(SplitTag::Test);
    if ids.is_empty() {
        data.indices(SplitTag::Val)
    } else {
        ids
    }
}
