use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// CSV with a `# <schema>` first line.
pub fn write_csv<T: Serialize>(path: &Path, schema: &str, rows: &[T]) -> Result<()> {
    let mut out = format!("# {schema}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    write_atomic(path, &out)
}

/// Reads a CSV written by [`write_csv`], checking the schema line.
pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    anyhow::ensure!(first.trim() == format!("# {schema}"), "{}: expected schema `{schema}`, found `{first}`", path.display());
    csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

/// Non-finite values become empty cells.
pub fn cell(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}
