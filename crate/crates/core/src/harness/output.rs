//! Output files: `summary.json`, `rms_table.csv`, and any per-run tables.
//! Every file is written to a temporary sibling and renamed into place, so
//! readers never observe partial content. Reruns with the same config and
//! seed produce byte-identical files except for the `wall_time_s` field.

use super::{CsvTable, ExperimentOutput};
use crate::error::Result;
use std::fs;
use std::path::{Path, PathBuf};

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Format a float for CSV: full round-trip precision, `inf` for diverged
/// runs, empty string handled by the callers for absent fields.
fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// The flat metric table: one row per (seed, filter, sweep point).
pub fn rms_table(output: &ExperimentOutput) -> CsvTable {
    let mut t = CsvTable::new("rms_table", "filter,M,R,c,inflation,seed,rms");
    for report in &output.summary.reports {
        for o in &report.outcomes {
            t.rows.push(format!(
                "{},{},{},{},{},{},{}",
                o.filter,
                o.m,
                fmt(o.r),
                opt(o.c),
                opt(o.inflation),
                report.seed,
                fmt(o.rms)
            ));
        }
    }
    t
}

/// Write `summary.json`, `rms_table.csv`, and the run's tables into `dir`,
/// creating it if needed. Returns the written paths.
pub fn write_outputs(output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let mut json = serde_json::to_string_pretty(&output.summary)
        .expect("summary serialization cannot fail");
    json.push('\n');
    let path = dir.join("summary.json");
    write_atomic(&path, json.as_bytes())?;
    written.push(path);

    let mut tables: Vec<&CsvTable> = Vec::new();
    let rms = rms_table(output);
    tables.push(&rms);
    tables.extend(output.tables.iter());
    for t in tables {
        let mut text = String::with_capacity(t.header.len() + 16 * t.rows.len());
        text.push_str(&t.header);
        text.push('\n');
        for row in &t.rows {
            text.push_str(row);
            text.push('\n');
        }
        let path = dir.join(format!("{}.csv", t.name));
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{run_experiment, ExperimentConfig};

    fn tiny_single_bayes() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default_single_bayes();
        cfg.m = 40;
        cfg.seeds = vec![7];
        cfg
    }

    #[test]
    fn summary_is_reproducible_modulo_wall_time() {
        let cfg = tiny_single_bayes();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_outputs(&run_experiment(&cfg).unwrap(), &a).unwrap();
        write_outputs(&run_experiment(&cfg).unwrap(), &b).unwrap();
        let strip = |p: &Path| -> String {
            std::fs::read_to_string(p.join("summary.json"))
                .unwrap()
                .lines()
                .filter(|l| !l.contains("wall_time_s"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(
            std::fs::read(a.join("rms_table.csv")).unwrap(),
            std::fs::read(b.join("rms_table.csv")).unwrap()
        );
    }

    #[test]
    fn rms_table_has_the_flat_schema() {
        let out = run_experiment(&tiny_single_bayes()).unwrap();
        let t = rms_table(&out);
        assert_eq!(t.header, "filter,M,R,c,inflation,seed,rms");
        assert_eq!(t.rows.len(), 3);
        assert!(t.rows[0].starts_with("egmf,40,16,"));
        for row in &t.rows {
            assert_eq!(row.matches(',').count(), 6, "{row}");
        }
    }

    #[test]
    fn empty_filter_list_writes_nothing() {
        let mut cfg = tiny_single_bayes();
        cfg.filters.clear();
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out");
        let err = run_experiment(&cfg);
        assert!(err.is_err());
        assert!(!target.exists());
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert!(!dir.path().join("x.csv.tmp").exists());
    }
}
