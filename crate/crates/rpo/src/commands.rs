//! Subcommand implementations. Each one writes its outputs plus a manifest
//! into the output directory and returns whether everything passed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Deserialize;

use rpo_core::eval::{evaluate_occupancy, feature_expectations, reference_frame, select_best_r, sweep_row, GridSearchResult};
use rpo_core::mdp::exact_occupancy;
use rpo_core::policy_opt::{train, TrainConfig};
use rpo_core::{CorrelationSpec, EnvBundle, SoftmaxPolicy};

use crate::artifact;
use crate::config::{output_dir, Overrides, RunConfig};
use crate::oracle::{self, CheckReport, Failure, OracleConfig};
use crate::output::{self, Manifest};

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: Overrides,
}

struct Run {
    config: RunConfig,
    bundle: EnvBundle,
    dir: PathBuf,
    manifest: Manifest,
}

fn prepare(command: &str, common: &Common) -> Result<Run> {
    let path = common.config.as_deref().context("--config is required")?;
    let mut config = RunConfig::load(path)?;
    config.apply(&common.overrides);
    config.validate()?;
    let bundle = config.environment.build().context("building the environment")?;
    let dir = output_dir(common.out.as_deref(), config.output.as_deref());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = Manifest::new(command, config.seed, &config.canonical());
    manifest.add_input(path)?;
    Ok(Run { config, bundle, dir, manifest })
}

fn finish(mut run: Run, outputs: &[&str]) -> Result<PathBuf> {
    for name in outputs {
        run.manifest.add_output(&run.dir, name)?;
    }
    run.manifest.write(&run.dir)?;
    Ok(run.dir)
}

fn load_policies(run: &mut Run, paths: &[PathBuf]) -> Result<Vec<(String, SoftmaxPolicy)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let policy = artifact::read(path)?;
        policy
            .check_shape(&run.bundle.mdp)
            .with_context(|| format!("{} does not fit environment {}", path.display(), run.bundle.name))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "policy".into());
        if !seen.insert(id.clone()) {
            bail!("two policy artifacts share the id {id:?}");
        }
        run.manifest.add_input(path)?;
        out.push((id, policy));
    }
    Ok(out)
}

pub fn cmd_train(common: &Common) -> Result<PathBuf> {
    let run = prepare("train", common)?;
    let outcome = train(&run.bundle, &run.config.algorithm).context("training")?;
    artifact::write(&run.dir.join("policy.txt"), &outcome.policy)?;
    output::write_train_log(&run.dir.join("train_log.csv"), &outcome.log)?;
    finish(run, &["policy.txt", "train_log.csv"])
}

pub fn cmd_evaluate(common: &Common, policies: &[PathBuf], include_reference: bool) -> Result<PathBuf> {
    let mut run = prepare("evaluate", common)?;
    let mut policies = load_policies(&mut run, policies)?;
    if include_reference {
        policies.insert(0, ("reference".into(), run.bundle.reference.clone()));
    }
    if policies.is_empty() {
        bail!("nothing to evaluate: pass policy artifacts or --reference");
    }
    let spec = CorrelationSpec::standard(run.config.eval_r())?;
    let options = run.config.evaluation.options();
    let (occ_ref, proxy) = reference_frame(&run.bundle)?;
    let rows = policies
        .par_iter()
        .map(|(id, p)| {
            let occ = exact_occupancy(&run.bundle.mdp, p)?;
            evaluate_occupancy(&run.bundle, id, &occ, &occ_ref, &proxy, &spec, &options)
        })
        .collect::<rpo_core::Result<Vec<_>>>()?;
    output::write_metrics(&run.dir.join("metrics.csv"), &rows)?;
    finish(run, &["metrics.csv"])
}

pub fn cmd_sweep(common: &Common, policies: &[PathBuf]) -> Result<PathBuf> {
    let mut run = prepare("sweep", common)?;
    let mut policies = load_policies(&mut run, policies)?;
    let e = run.config.evaluation.clone();
    if e.include_reference {
        policies.insert(0, ("reference".into(), run.bundle.reference.clone()));
    }
    if policies.is_empty() {
        bail!("nothing to sweep: pass policy artifacts or set evaluation.include_reference");
    }
    let expectations = feature_expectations(&run.bundle, &policies)?;
    let rows = e
        .grid
        .par_iter()
        .enumerate()
        .map(|(i, &r)| sweep_row(&run.bundle, &policies, &expectations, r, i, e.samples, e.tol, run.config.seed))
        .collect::<rpo_core::Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for (row, warning) in rows {
        if let Some(w) = warning {
            eprintln!(
                "warning: r={} acceptance rate {:.2e} (proposal correlations {:.3}..{:.3})",
                w.r, w.acceptance_rate, w.min_correlation, w.max_correlation
            );
        }
        cells.extend(row);
    }
    output::write_sweep(&run.dir.join("sweep.csv"), &cells)?;
    finish(run, &["sweep.csv"])
}

pub fn cmd_grid_search(common: &Common) -> Result<PathBuf> {
    let run = prepare("grid-search", common)?;
    let options = run.config.evaluation.options();
    let (occ_ref, proxy) = reference_frame(&run.bundle)?;
    let trained = run
        .config
        .evaluation
        .search_grid
        .par_iter()
        .map(|&r| {
            let cfg = TrainConfig { r, ..run.config.algorithm.clone() };
            let policy = train(&run.bundle, &cfg)?.policy;
            let occ = exact_occupancy(&run.bundle.mdp, &policy)?;
            let row = evaluate_occupancy(
                &run.bundle,
                &format!("r={r}"),
                &occ,
                &occ_ref,
                &proxy,
                &CorrelationSpec::standard(r)?,
                &options,
            )?;
            Ok((policy, row))
        })
        .collect::<rpo_core::Result<Vec<_>>>()?;
    let rows: Vec<_> = trained.iter().map(|(_, row)| row.clone()).collect();
    let best_r = select_best_r(&rows).context("empty search grid")?;
    let best = trained.iter().find(|(_, row)| row.r == best_r).map(|(p, _)| p).expect("best row exists");
    artifact::write(&run.dir.join("policy-best.txt"), best)?;
    output::write_grid_search(&run.dir.join("grid_search.csv"), &GridSearchResult { best_r, rows })?;
    finish(run, &["grid_search.csv", "policy-best.txt"])
}

/// A file for `rpo oracle` alone may hold just an `[oracle]` table.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleFile {
    #[serde(default)]
    oracle: OracleConfig,
}

fn oracle_config(common: &Common) -> Result<(OracleConfig, String)> {
    let mut cfg = match &common.config {
        None => OracleConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let doc: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if doc.contains_key("environment") {
                RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?.oracle
            } else {
                toml::from_str::<OracleFile>(&text).with_context(|| format!("parsing {}", path.display()))?.oracle
            }
        }
    };
    if let Some(seed) = common.overrides.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let canonical = toml::to_string(&cfg).expect("oracle config serializes");
    Ok((cfg, canonical))
}

/// Runs the suites (or replays one failure). Failing cases are written as
/// `oracle-failure-<check>.json` for `--replay`.
pub fn cmd_oracle(common: &Common, replay: Option<&Path>) -> Result<(bool, Vec<CheckReport>)> {
    let (cfg, canonical) = oracle_config(common)?;
    let reports = match replay {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let failure: Failure = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            vec![oracle::replay(&failure, &cfg)?]
        }
        None => oracle::run_all(&cfg),
    };
    let dir = output_dir(common.out.as_deref(), None);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = Manifest::new("oracle", cfg.seed, &canonical);
    if let Some(path) = &common.config {
        manifest.add_input(path)?;
    }
    if let Some(path) = replay {
        manifest.add_input(path)?;
    }
    let mut outputs = vec!["oracle_report.json".to_string()];
    std::fs::write(dir.join("oracle_report.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    for failure in reports.iter().filter_map(|r| r.failure.as_ref()) {
        let name = format!("oracle-failure-{}.json", failure.check);
        std::fs::write(dir.join(&name), serde_json::to_string_pretty(failure)? + "\n")?;
        outputs.push(name);
    }
    for name in &outputs {
        manifest.add_output(&dir, name)?;
    }
    manifest.write(&dir)?;
    Ok((reports.iter().all(|r| r.passed), reports))
}
