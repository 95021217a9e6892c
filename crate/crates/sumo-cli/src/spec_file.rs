//! Experiment spec files: TOML documents, `--override` patches and sweep expansion.
//!
//! A spec file is one `ExperimentSpec` table plus an optional `[sweep]` table:
//!
//! ```toml
//! name = "quadratic"
//! step_budget = 3000
//! seeds = [0, 1, 2]
//!
//! [model]
//! kind = "quadratic"
//!
//! [data]
//! kind = "ill_conditioned_quadratic"
//! m = 32
//! n = 8
//!
//! [optimizer]
//! learning_rate = 1e-3
//!
//! [sweep]
//! orthogonalizers = ["exact_svd", "newton_schulz5"]
//! ```

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sumo::harness::ExperimentSpec;
use sumo::optimizer::{Method, Orthogonalizer};
use toml::{Table, Value};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub methods: Vec<Method>,
    pub orthogonalizers: Vec<Orthogonalizer>,
    pub ranks: Vec<usize>,
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_override_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML tree, creating intermediate tables.
pub fn apply_override(root: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{part}` is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

fn deserialize<T: serde::de::DeserializeOwned>(table: Table, what: &str) -> Result<T> {
    let value = Value::Table(table);
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("{what}: field `{path}`: {}", e.into_inner())
    })
}

pub fn parse_spec_text(text: &str, overrides: &[String]) -> Result<(ExperimentSpec, Sweep)> {
    let mut root: Table = text.parse().context("spec is not valid TOML")?;
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let sweep = match root.remove("sweep") {
        Some(Value::Table(t)) => deserialize(t, "sweep")?,
        Some(_) => bail!("field `sweep` must be a table"),
        None => Sweep::default(),
    };
    let spec: ExperimentSpec = deserialize(root, "spec")?;
    Ok((spec, sweep))
}

/// Reads a spec file and applies overrides; does not expand sweeps.
pub fn load_spec(path: &Path, overrides: &[String]) -> Result<(ExperimentSpec, Sweep)> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read spec {}", path.display()))?;
    parse_spec_text(&text, overrides)
}

/// Expands the sweep into concrete specs, named `base/method/orthogonalizer/r<rank>`
/// over whichever axes the sweep lists.
pub fn expand(base: &ExperimentSpec, sweep: &Sweep) -> Vec<ExperimentSpec> {
    let methods: Vec<Option<Method>> = if sweep.methods.is_empty() {
        vec![None]
    } else {
        sweep.methods.iter().copied().map(Some).collect()
    };
    let orths: Vec<Option<Orthogonalizer>> = if sweep.orthogonalizers.is_empty() {
        vec![None]
    } else {
        sweep.orthogonalizers.iter().copied().map(Some).collect()
    };
    let ranks: Vec<Option<usize>> = if sweep.ranks.is_empty() {
        vec![None]
    } else {
        sweep.ranks.iter().copied().map(Some).collect()
    };
    let mut out = Vec::new();
    for m in &methods {
        for o in &orths {
            for r in &ranks {
                let mut spec = base.clone();
                let mut name = base.name.clone();
                if let Some(m) = m {
                    spec.method = *m;
                    name.push_str(&format!("/{m}"));
                }
                if let Some(o) = o {
                    spec.optimizer.orthogonalizer = *o;
                    name.push_str(&format!("/{o}"));
                }
                if let Some(r) = r {
                    spec.optimizer.rank = *r;
                    name.push_str(&format!("/r{r}"));
                }
                spec.name = name;
                out.push(spec);
            }
        }
    }
    out
}

pub fn to_toml(spec: &ExperimentSpec) -> Result<String> {
    toml::to_string(spec).context("cannot serialize spec")
}
