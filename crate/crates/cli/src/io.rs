use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nnrepair::{LabeledDataset, Network, SafetyProperty};
use serde::Serialize;

/// Accepts either a JSON array of properties or a single property object.
pub fn load_properties(path: &Path) -> Result<Vec<SafetyProperty>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let props: Vec<SafetyProperty> = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|p| vec![p])
    }
    .with_context(|| format!("bad property schema in {}", path.display()))?;
    if props.is_empty() {
        bail!("{} holds no properties", path.display());
    }
    for p in &props {
        p.validate()?;
    }
    Ok(props)
}

pub fn check_properties(net: &Network, props: &[SafetyProperty]) -> Result<()> {
    for p in props {
        p.check_network(net)
            .with_context(|| format!("property {} does not fit the network", p.name))?;
    }
    Ok(())
}

/// Rows of `inputs..., targets...` without a header.
pub fn load_csv(path: &Path, net: &Network) -> Result<LabeledDataset> {
    let (n_in, n_out) = (net.input_dim(), net.output_dim());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let row: Vec<f64> = record
            .iter()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}: row {} is not numeric", path.display(), i + 1))?;
        if row.len() != n_in + n_out {
            bail!(
                "{}: row {} has {} columns, expected {}",
                path.display(),
                i + 1,
                row.len(),
                n_in + n_out
            );
        }
        inputs.push(row[..n_in].to_vec());
        targets.push(row[n_in..].to_vec());
    }
    Ok(LabeledDataset::new(inputs, targets)?)
}

pub fn write_csv(path: &Path, data: &LabeledDataset) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        w.write_record(x.iter().chain(y).map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON to `out`, or to stdout when no path is given.
pub fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn parse_axes(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected two comma-separated axes, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let axes = (parse(a)?, parse(b)?);
    if axes.0 == axes.1 {
        return Err("projection axes must differ".into());
    }
    Ok(axes)
}
