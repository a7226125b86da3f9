//! NMSE reports and their CSV/JSON serialisation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use pathcast_core::metrics::Nmse;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseRow {
    pub train_tag: String,
    pub test_tag: String,
    pub mode: String,
    pub fraction: f64,
    pub nmse_pooled: f64,
    pub nmse_mean: f64,
    pub nmse_db: f64,
    pub n_test: usize,
    pub seed: u64,
    pub checkpoint_ids: Vec<String>,
}

impl NmseRow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        train_tag: impl Into<String>,
        test_tag: impl Into<String>,
        mode: impl Into<String>,
        fraction: f64,
        nmse: Nmse,
        n_test: usize,
        seed: u64,
        checkpoint_ids: Vec<String>,
    ) -> Self {
        Self {
            train_tag: train_tag.into(),
            test_tag: test_tag.into(),
            mode: mode.into(),
            fraction,
            nmse_pooled: nmse.pooled,
            nmse_mean: nmse.mean_of_ratios,
            nmse_db: nmse.pooled_db(),
            n_test,
            seed,
            checkpoint_ids,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seeds: Vec<u64>,
    pub checkpoint_hashes: Vec<String>,
    pub manifest_hash: String,
    pub split_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NmseReport {
    pub rows: Vec<NmseRow>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::contract(format!("unknown report format `{other}`"))),
        }
    }
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .ok_or_else(|| Error::contract(format!("{} has no csv/json extension", path.display())))?
            .parse()
    }
}

pub const CSV_COLUMNS: [&str; 10] = [
    "train_tag",
    "test_tag",
    "mode",
    "fraction",
    "nmse_pooled",
    "nmse_mean",
    "nmse_db",
    "n_test",
    "seed",
    "checkpoint_ids",
];

/// Six significant digits.
pub fn sig6(v: f64) -> String {
    format!("{v:.5e}")
}

impl NmseReport {
    pub fn merge(&mut self, other: NmseReport) {
        self.rows.extend(other.rows);
        let p = &mut self.provenance;
        for s in other.provenance.seeds {
            if !p.seeds.contains(&s) {
                p.seeds.push(s);
            }
        }
        for h in other.provenance.checkpoint_hashes {
            if !p.checkpoint_hashes.contains(&h) {
                p.checkpoint_hashes.push(h);
            }
        }
        if p.manifest_hash.is_empty() {
            p.manifest_hash = other.provenance.manifest_hash;
        }
        if p.split_hash.is_empty() {
            p.split_hash = other.provenance.split_hash;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::contract("report has no rows"));
        }
        for r in &self.rows {
            if !(r.nmse_pooled >= 0.0 && r.nmse_mean >= 0.0) {
                return Err(Error::contract(format!("negative or NaN NMSE in row {}", r.test_tag)));
            }
            if (r.nmse_db - 10.0 * r.nmse_pooled.log10()).abs() > 1e-9 {
                return Err(Error::contract(format!("nmse_db inconsistent in row {}", r.test_tag)));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        self.validate()?;
        let p = &self.provenance;
        let mut out = String::new();
        let seeds: Vec<String> = p.seeds.iter().map(u64::to_string).collect();
        writeln!(out, "# seeds: {}", seeds.join(" ")).unwrap();
        writeln!(out, "# checkpoints: {}", p.checkpoint_hashes.join(" ")).unwrap();
        writeln!(out, "# manifest: {}", p.manifest_hash).unwrap();
        writeln!(out, "# split: {}", p.split_hash).unwrap();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.train_tag.clone(),
                r.test_tag.clone(),
                r.mode.clone(),
                sig6(r.fraction),
                sig6(r.nmse_pooled),
                sig6(r.nmse_mean),
                sig6(r.nmse_db),
                r.n_test.to_string(),
                r.seed.to_string(),
                r.checkpoint_ids.join(";"),
            ])?;
        }
        let body = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        out.push_str(&String::from_utf8(body).expect("csv writer emits utf-8"));
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn emit(&self, format: ReportFormat, path: &Path) -> Result<()> {
        let text = match format {
            ReportFormat::Csv => self.to_csv()?,
            ReportFormat::Json => self.to_json()?,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(n: usize) -> NmseReport {
        NmseReport {
            rows: (0..n)
                .map(|i| {
                    NmseRow::new(
                        "crossroad/70m/1.6GHz",
                        format!("cond{i}"),
                        "full_sample",
                        1.0,
                        Nmse { pooled: 0.0123456789 * (i + 1) as f64, mean_of_ratios: 0.013 },
                        51,
                        7,
                        vec!["aa".into(), "bb".into()],
                    )
                })
                .collect(),
            provenance: Provenance {
                seeds: vec![7],
                checkpoint_hashes: vec!["aa".into(), "bb".into()],
                manifest_hash: "m".into(),
                split_hash: "s".into(),
            },
        }
    }

    #[test]
    fn csv_layout() {
        let csv = report(3).to_csv().unwrap();
        let data: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data.len(), 4);
        assert_eq!(data[0], CSV_COLUMNS.join(","));
        assert!(data[1].contains("1.23457e-2"));
        assert!(csv.starts_with("# seeds: 7\n"));
    }

    #[test]
    fn json_round_trip() {
        let r = report(2);
        assert_eq!(NmseReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn empty_or_inconsistent_rejected() {
        assert!(NmseReport::default().to_csv().is_err());
        let mut r = report(1);
        r.rows[0].nmse_db += 1e-6;
        assert!(r.to_json().is_err());
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(ReportFormat::from_path(Path::new("a/b.csv")).unwrap(), ReportFormat::Csv);
        assert!(ReportFormat::from_path(Path::new("a/b.txt")).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, "x").unwrap();
        let e = report(1).emit(ReportFormat::Csv, &file.join("r.csv")).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }
}
