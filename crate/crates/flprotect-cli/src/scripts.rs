//! Scripted-sequence files: one model vector per line, `d` comma-separated
//! coordinates, `#` comments and blank lines ignored.

use std::path::Path;

use anyhow::{bail, Context, Result};
use flprotect::ModelVector;

pub fn load_script(path: &Path, dimension: usize) -> Result<Vec<ModelVector>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading script file {}", path.display()))?;
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let coords: Vec<f64> = line
            .split(',')
            .map(|field| {
                field.trim().parse::<f64>().map_err(|e| {
                    anyhow::anyhow!(
                        "{}:{}: bad number `{}`: {e}",
                        path.display(),
                        lineno + 1,
                        field.trim()
                    )
                })
            })
            .collect::<Result<_>>()?;
        if coords.len() != dimension {
            bail!(
                "{}:{}: row has {} coordinates, expected d = {dimension}",
                path.display(),
                lineno + 1,
                coords.len()
            );
        }
        if coords.iter().any(|v| !v.is_finite()) {
            bail!("{}:{}: non-finite value", path.display(), lineno + 1);
        }
        rows.push(ModelVector::from_vec(coords));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_vectors_and_skips_comments() {
        let dir = std::env::temp_dir().join("flprotect-scripts-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("xi.csv");
        std::fs::write(&path, "# innovation script\n1.0, 2.0\n\n-0.5,0.25\n").unwrap();
        let rows = load_script(&path, 2).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1][0], -0.5);
        assert!(load_script(&path, 3).is_err());
    }
}
