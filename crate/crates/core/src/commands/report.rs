//! `report`: merges metric files into one JSON document and plot-ready CSV
//! series. Keys are prefixed with the input file stem so reports of several
//! systems can be compared side by side.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{MetricsReport, SeriesPoint};
use crate::error::{Error, Result};

pub struct ReportPaths {
    pub json: PathBuf,
    pub metrics_csv: PathBuf,
    pub series_csv: Vec<PathBuf>,
}

fn fmt_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn load(path: &Path) -> Result<MetricsReport> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Writes `report.json`, `metrics.csv` (`name,value`) and one
/// `series_<name>.csv` (`key,value`) per series into `out_dir`.
pub fn report(inputs: &[PathBuf], out_dir: &Path) -> Result<ReportPaths> {
    let mut merged = MetricsReport::default();
    for p in inputs {
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let r = load(p)?;
        for (k, v) in r.metrics {
            merged.metrics.insert(format!("{label}.{k}"), v);
        }
        for (k, v) in r.series {
            merged.series.insert(format!("{label}.{k}"), v);
        }
    }
    if merged.is_empty() {
        return Err(Error::Data("no metrics to report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let json = out_dir.join("report.json");
    crate::commands::analyze::write_report(&json, &merged)?;

    let mut m = String::from("name,value\n");
    for (k, v) in &merged.metrics {
        m.push_str(&format!("{k},{}\n", fmt_value(Some(*v))));
    }
    let metrics_csv = out_dir.join("metrics.csv");
    fs::write(&metrics_csv, m)?;

    let mut series_csv = Vec::new();
    let series: &BTreeMap<String, Vec<SeriesPoint>> = &merged.series;
    for (name, points) in series {
        let mut s = String::from("key,value\n");
        for p in points {
            s.push_str(&format!("{},{}\n", p.key, fmt_value(p.value)));
        }
        let path = out_dir.join(format!("series_{name}.csv"));
        fs::write(&path, s)?;
        series_csv.push(path);
    }
    Ok(ReportPaths {
        json,
        metrics_csv,
        series_csv,
    })
}
