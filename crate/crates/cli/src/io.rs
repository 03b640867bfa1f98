//! Pointcloud CSV and config-stamped output files.
//!
//! Pointclouds have a header `x0,...,x{d-1}` and one point per row. Lines
//! starting with `#` are comments; every file written here starts with
//! `# config: <json>` holding the effective configuration.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn config_line(config: &impl Serialize) -> Result<String> {
    Ok(format!("# config: {}\n", serde_json::to_string(config)?))
}

/// Reads a pointcloud; the header must be exactly `x0,...,x{d-1}`.
pub fn read_pointcloud(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open pointcloud {}", path.display()))?;
    let header = reader.headers()?.clone();
    let d = header.len();
    for (k, name) in header.iter().enumerate() {
        if name != format!("x{k}") {
            bail!(
                "{}: header column {k} is {name:?}, expected \"x{k}\"",
                path.display()
            );
        }
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.with_context(|| format!("{}: malformed row", path.display()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d {
            bail!(
                "{}:{line}: expected {d} values, found {}",
                path.display(),
                record.len()
            );
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .with_context(|| format!("{}:{line}: {field:?} is not a number", path.display()))?;
            if !v.is_finite() {
                bail!("{}:{line}: non-finite value {field:?}", path.display());
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        bail!("{}: pointcloud has no points", path.display());
    }
    Ok(Array2::from_shape_vec((rows, d), values)?)
}

/// Writes rows of already formatted fields below a config comment and header.
pub fn write_table<I, R>(
    path: &Path,
    config: &impl Serialize,
    header: &[String],
    rows: I,
) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut out = config_line(config)?.into_bytes();
    {
        let mut writer = csv::Writer::from_writer(&mut out);
        writer.write_record(header)?;
        for row in rows {
            writer.write_record(row)?;
        }
        writer.flush()?;
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))
}

pub fn pointcloud_header(d: usize) -> Vec<String> {
    (0..d).map(|k| format!("x{k}")).collect()
}

/// Shortest round-trip representation.
pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_pointcloud(path: &Path, config: &impl Serialize, points: &Array2<f64>) -> Result<()> {
    write_table(
        path,
        config,
        &pointcloud_header(points.ncols()),
        points
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| fmt(*v)).collect::<Vec<_>>()),
    )
}

/// Parses an optional JSON config file; absent fields keep their defaults.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
        }
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pointcloud_round_trip_skips_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let pts = array![[0.1, -2.5], [3.0, 1e-17]];
        write_pointcloud(&path, &serde_json::json!({"k": 1}), &pts).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config: {\"k\":1}\nx0,x1\n"));
        assert_eq!(read_pointcloud(&path).unwrap(), pts);
    }

    #[test]
    fn pointcloud_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(read_pointcloud(&path).is_err());
        fs::write(&path, "x0,x1\n1,zz\n").unwrap();
        let msg = format!("{:#}", read_pointcloud(&path).unwrap_err());
        assert!(msg.contains(":2:"), "{msg}");
        fs::write(&path, "x0\n").unwrap();
        assert!(read_pointcloud(&path).is_err());
        assert!(read_pointcloud(&dir.path().join("missing.csv")).is_err());
    }
}
