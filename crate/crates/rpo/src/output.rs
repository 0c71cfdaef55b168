//! CSV tables and run manifests. Numbers are written with 17 significant
//! digits so that files are bit-stable across runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rpo_core::eval::{GridSearchResult, MetricsRow, SweepCell};
use rpo_core::policy_opt::TrainLog;

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn theta_width<'a>(thetas: impl Iterator<Item = Option<&'a Vec<f64>>>) -> usize {
    thetas.map(|t| t.map_or(0, Vec::len)).max().unwrap_or(0)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let k = theta_width(rows.iter().map(|r| r.theta.as_ref().map(|t| &t.unwhitened)));
    let mut header: Vec<String> = ["policy_id", "r", "true_return", "proxy_return", "worst", "occ_unseen", "r_min"]
        .iter()
        .chain(&["worst_star", "linear_worst"])
        .map(|s| s.to_string())
        .collect();
    header.extend((0..k).map(|j| format!("theta_{j}")));
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|m| {
            let mut row = vec![
                m.policy_id.clone(),
                num(m.r),
                num(m.true_return),
                num(m.proxy_return),
                num(m.worst),
                num(m.occ_unseen),
                num(m.r_min),
                num(m.worst_star),
                opt(m.linear_worst),
            ];
            let theta = m.theta.as_ref().map(|t| t.unwhitened.as_slice()).unwrap_or(&[]);
            row.extend((0..k).map(|j| theta.get(j).copied().map(num).unwrap_or_default()));
            row
        })
        .collect();
    write_table(path, &header, &table)
}

pub fn write_sweep(path: &Path, cells: &[SweepCell]) -> Result<()> {
    let header: Vec<String> =
        ["r", "policy_id", "mean", "std", "n_accepted", "n_proposed"].iter().map(|s| s.to_string()).collect();
    let table: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                num(c.r),
                c.policy_id.clone(),
                num(c.mean),
                if c.std_defined { num(c.std) } else { String::new() },
                c.n_accepted.to_string(),
                c.n_proposed.to_string(),
            ]
        })
        .collect();
    write_table(path, &header, &table)
}

pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let k = theta_width(log.records.iter().map(|r| r.theta.as_ref()));
    let mut header: Vec<String> =
        ["iteration", "objective", "proxy_return", "chi2", "h", "lambda1", "lambda2", "lambda3", "degenerate"]
            .iter()
            .chain(&["step", "note"])
            .map(|s| s.to_string())
            .collect();
    header.extend((0..k).map(|j| format!("theta_{j}")));
    let table: Vec<Vec<String>> = log
        .records
        .iter()
        .map(|r| {
            let d = r.duals.map(|d| d.map(num)).unwrap_or_default();
            let mut row = vec![
                r.iteration.to_string(),
                num(r.objective),
                num(r.proxy_return),
                num(r.chi2),
                num(r.h),
                d[0].clone(),
                d[1].clone(),
                d[2].clone(),
                r.degenerate.to_string(),
                num(r.step),
                r.note.clone().unwrap_or_default(),
            ];
            let theta = r.theta.as_deref().unwrap_or(&[]);
            row.extend((0..k).map(|j| theta.get(j).copied().map(num).unwrap_or_default()));
            row
        })
        .collect();
    write_table(path, &header, &table)
}

pub fn write_grid_search(path: &Path, result: &GridSearchResult) -> Result<()> {
    let header: Vec<String> = ["r", "worst", "true_return", "proxy_return", "linear_worst", "best"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let table: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|m| {
            vec![
                num(m.r),
                num(m.worst),
                num(m.true_return),
                num(m.proxy_return),
                opt(m.linear_worst),
                (m.r == result.best_r).to_string(),
            ]
        })
        .collect();
    write_table(path, &header, &table)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// What is needed to re-run a command and check its outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: String,
    /// Input artifacts by path, with their hashes.
    pub inputs: BTreeMap<String, String>,
    /// Output files (names relative to the output directory) and their hashes.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, canonical_config: &str) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_sha256: sha256_hex(canonical_config.as_bytes()),
            config: canonical_config.into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn add_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = std::fs::read(dir.join(name)).with_context(|| format!("reading {name}"))?;
        self.outputs.insert(name.into(), sha256_hex(&bytes));
        Ok(())
    }

    /// Writes `manifest-<command>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("manifest-{}.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_keep_seventeen_digits() {
        let x = 0.1 + 0.2;
        assert_eq!(num(x).parse::<f64>().unwrap(), x);
        assert_eq!(num(x), "3.0000000000000004e-1");
    }

    #[test]
    fn hashes_are_hex_sha256() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
