//! Portable policy artifacts: a shape header followed by one row of logits
//! per state.
//!
//! ```text
//! # rpo policy logits
//! states 2
//! actions 3
//! 0.0000000000000000e0 1.0000000000000000e0 -2.5000000000000000e-1
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use rpo_core::SoftmaxPolicy;

const MAGIC: &str = "# rpo policy logits";

pub fn encode(policy: &SoftmaxPolicy) -> String {
    let na = policy.n_actions();
    let mut out = format!("{MAGIC}\nstates {}\nactions {na}\n", policy.n_states());
    for row in policy.logits().chunks(na) {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
        writeln!(out, "{}", cells.join(" ")).unwrap();
    }
    out
}

pub fn decode(text: &str) -> Result<SoftmaxPolicy> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(MAGIC) {
        bail!("missing `{MAGIC}` header");
    }
    let mut header = |key: &str| -> Result<usize> {
        let line = lines.next().ok_or_else(|| anyhow!("missing `{key}` line"))?;
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(k), Some(v), None) if k == key => v.parse().with_context(|| format!("bad `{key}` value {v:?}")),
            _ => bail!("expected `{key} <count>`, found {line:?}"),
        }
    };
    let (ns, na) = (header("states")?, header("actions")?);
    let mut logits = Vec::with_capacity(ns * na);
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|x| x.parse::<f64>().with_context(|| format!("row {i}: bad number {x:?}")))
            .collect::<Result<_>>()?;
        if row.len() != na {
            bail!("row {i} has {} entries, expected {na}", row.len());
        }
        logits.extend(row);
    }
    if logits.len() != ns * na {
        bail!("found {} rows, expected {ns}", logits.len() / na.max(1));
    }
    Ok(SoftmaxPolicy::new(ns, na, logits)?)
}

pub fn write(path: &Path, policy: &SoftmaxPolicy) -> Result<()> {
    std::fs::write(path, encode(policy)).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<SoftmaxPolicy> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&text).with_context(|| format!("decoding policy artifact {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let p = SoftmaxPolicy::new(2, 3, vec![0.1, -1.0 / 3.0, 2.5e-17, 1e30, -7.0, 0.0]).unwrap();
        assert_eq!(decode(&encode(&p)).unwrap(), p);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let text = format!("{MAGIC}\nstates 2\nactions 2\n0 1\n0\n");
        assert!(decode(&text).unwrap_err().to_string().contains("row 1"));
        let text = format!("{MAGIC}\nstates 3\nactions 1\n0\n0\n");
        assert!(decode(&text).is_err());
        assert!(decode("states 1\nactions 1\n0\n").is_err());
    }
}
