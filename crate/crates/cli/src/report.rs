//! Files written into an output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use selfreg::model::save_model;
use selfreg::trainer::{AblationSummary, Seeds, SingleSourceMatrix, TargetScore, TrainResult};

use crate::config::ExperimentConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seeds: Seeds,
    pub steps_per_epoch: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Target accuracy averaged over held-out domains, per checkpoint.
    pub best_acc: f64,
    pub final_acc: f64,
    pub swa_acc: Option<f64>,
    pub swa_snapshots: usize,
    pub target_rows_seen: usize,
    pub targets: Vec<TargetScore>,
}

impl RunSummary {
    pub fn new(cfg: &ExperimentConfig, r: &TrainResult) -> Self {
        Self {
            seeds: cfg.train.seeds,
            steps_per_epoch: r.steps_per_epoch,
            best_epoch: r.best_epoch,
            best_val_acc: r.best_val_acc,
            best_acc: r.target_acc(),
            final_acc: r.final_target_acc(),
            swa_acc: r.swa_target_acc(),
            swa_snapshots: r.swa_snapshots,
            target_rows_seen: r.target_rows_seen,
            targets: r.targets.clone(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut doc: toml::Table = text.parse()?;
        doc.remove("config");
        Ok(toml::Value::Table(doc).try_into()?)
    }
}

pub fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

/// Metrics stream, summary with config echo, and every available checkpoint.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, r: &TrainResult) -> Result<()> {
    selfreg::trainer::write_metrics(&r.metrics, &dir.join(METRICS_FILE))?;
    let mut doc = toml::Table::try_from(RunSummary::new(cfg, r))?;
    doc.insert("config".into(), toml::Value::Table(cfg.to_toml().parse()?));
    fs::write(dir.join(SUMMARY_FILE), toml::to_string_pretty(&doc)?)?;
    save_model(&r.best_model, &dir.join("best.ckpt"))?;
    save_model(&r.final_model, &dir.join("final.ckpt"))?;
    if let Some(m) = &r.swa_model {
        save_model(m, &dir.join("swa.ckpt"))?;
    }
    write_config(dir, cfg)
}

/// Accepts `d/best` as shorthand for `d/best.ckpt`.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    let with_ext = path.with_extension("ckpt");
    if with_ext.is_file() {
        return Ok(with_ext);
    }
    bail!("checkpoint {} not found", path.display())
}

pub fn ablation_table(rows: &[AblationSummary]) -> String {
    let seeds = &rows[0].seeds;
    let mut out = String::from("row,mean,std");
    for s in seeds {
        write!(out, ",seed_{s}").unwrap();
    }
    for (d, _) in &rows[0].per_target {
        write!(out, ",target_{d}").unwrap();
    }
    out.push_str(",feat_dist,logit_dist,target_rows_seen\n");
    for r in rows {
        write!(out, "{},{:.6},{:.6}", r.name, r.mean, r.std).unwrap();
        for v in &r.per_seed {
            write!(out, ",{v:.6}").unwrap();
        }
        for (_, v) in &r.per_target {
            write!(out, ",{v:.6}").unwrap();
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        writeln!(
            out,
            ",{:.6},{:.6},{}",
            mean(&r.feat_dist),
            mean(&r.logit_dist),
            r.target_rows_seen
        )
        .unwrap();
    }
    out
}

pub fn matrix_table(m: &SingleSourceMatrix) -> String {
    let n = m.cells.len();
    let mut out = String::from("source");
    for t in 0..n {
        write!(out, ",target_{t}").unwrap();
    }
    out.push_str(",avg\n");
    for (s, row) in m.cells.iter().enumerate() {
        write!(out, "{s}").unwrap();
        for cell in row {
            match cell {
                Some(v) => write!(out, ",{v:.6}").unwrap(),
                None => out.push(','),
            }
        }
        writeln!(out, ",{:.6}", m.row_avg[s]).unwrap();
    }
    out.push_str("avg");
    for v in &m.col_avg {
        write!(out, ",{v:.6}").unwrap();
    }
    writeln!(out, ",{:.6}", m.overall).unwrap();
    out
}
