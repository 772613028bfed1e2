//! Result files: per-record CSV, per-cycle summary, run manifest.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::cli::config::ExperimentConfig;
use crate::cycle::{CycleRecord, RuleSnapshot};
use crate::error::{Error, Result};

pub const RECORDS_HEADER: [&str; 9] = [
    "cycle",
    "repetition",
    "verification_acc",
    "actual_acc",
    "predicted_acc",
    "estimated_acc",
    "triggered",
    "n_labeled",
    "policy_applied",
];

pub const SUMMARY_HEADER: [&str; 17] = [
    "cycle",
    "repetitions",
    "verification_acc_mean",
    "verification_acc_min",
    "verification_acc_max",
    "actual_acc_mean",
    "actual_acc_min",
    "actual_acc_max",
    "predicted_acc_mean",
    "predicted_acc_min",
    "predicted_acc_max",
    "estimated_acc_mean",
    "estimated_acc_min",
    "estimated_acc_max",
    "triggered_count",
    "n_labeled_total",
    "policies",
];

fn acc(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

pub fn write_records<W: Write>(records: &[CycleRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORDS_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.cycle.to_string(),
            r.repetition.to_string(),
            acc(r.verification_acc),
            acc(r.actual_acc),
            acc(r.predicted_acc),
            r.estimated_acc.map(acc).unwrap_or_default(),
            r.triggered.to_string(),
            r.n_labeled.to_string(),
            r.policy_applied.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn records_csv(records: &[CycleRecord]) -> String {
    let mut buf = Vec::new();
    write_records(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

fn field<T: std::str::FromStr>(row: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = row.get(i).unwrap_or_default();
    raw.parse()
        .map_err(|_| Error::Format(format!("column `{}`: cannot parse `{raw}`", RECORDS_HEADER[i])))
}

/// Parses a records CSV written by [`write_records`].
pub fn read_records<R: Read>(input: R) -> Result<Vec<CycleRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(RECORDS_HEADER) {
        return Err(Error::Format(format!("unexpected header {header:?}")));
    }
    rdr.records()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            let estimated = row.get(5).unwrap_or_default();
            Ok(CycleRecord {
                cycle: field(&row, 0)?,
                repetition: field(&row, 1)?,
                verification_acc: field(&row, 2)?,
                actual_acc: field(&row, 3)?,
                predicted_acc: field(&row, 4)?,
                estimated_acc: if estimated.is_empty() {
                    None
                } else {
                    Some(field(&row, 5)?)
                },
                triggered: field(&row, 6)?,
                n_labeled: field(&row, 7)?,
                policy_applied: field(&row, 8)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Band {
    fn of(values: impl IntoIterator<Item = f64>) -> Option<Band> {
        let values: Vec<f64> = values.into_iter().collect();
        if values.is_empty() {
            return None;
        }
        Some(Band {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Per-cycle aggregate over repetitions.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleSummary {
    pub cycle: usize,
    pub repetitions: usize,
    pub verification_acc: Band,
    pub actual_acc: Band,
    pub predicted_acc: Band,
    /// Over triggered repetitions only.
    pub estimated_acc: Option<Band>,
    pub triggered_count: usize,
    pub n_labeled_total: usize,
    pub policies: Vec<String>,
}

pub fn summarize(records: &[CycleRecord]) -> Vec<CycleSummary> {
    let mut cycles: Vec<usize> = records.iter().map(|r| r.cycle).collect();
    cycles.sort_unstable();
    cycles.dedup();
    cycles
        .into_iter()
        .map(|cycle| {
            let rows: Vec<&CycleRecord> = records.iter().filter(|r| r.cycle == cycle).collect();
            let band = |f: fn(&CycleRecord) -> f64| Band::of(rows.iter().map(|r| f(r))).expect("nonempty");
            let mut policies: Vec<String> = rows.iter().map(|r| r.policy_applied.to_string()).collect();
            policies.sort();
            policies.dedup();
            CycleSummary {
                cycle,
                repetitions: rows.len(),
                verification_acc: band(|r| r.verification_acc),
                actual_acc: band(|r| r.actual_acc),
                predicted_acc: band(|r| r.predicted_acc),
                estimated_acc: Band::of(rows.iter().filter_map(|r| r.estimated_acc)),
                triggered_count: rows.iter().filter(|r| r.triggered).count(),
                n_labeled_total: rows.iter().map(|r| r.n_labeled).sum(),
                policies,
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(summary: &[CycleSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    for s in summary {
        let mut row = vec![s.cycle.to_string(), s.repetitions.to_string()];
        for b in [s.verification_acc, s.actual_acc, s.predicted_acc] {
            row.extend([acc(b.mean), acc(b.min), acc(b.max)]);
        }
        match s.estimated_acc {
            Some(b) => row.extend([acc(b.mean), acc(b.min), acc(b.max)]),
            None => row.extend([String::new(), String::new(), String::new()]),
        }
        row.extend([
            s.triggered_count.to_string(),
            s.n_labeled_total.to_string(),
            s.policies.join(";"),
        ]);
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub master_seed: u64,
    pub config_hash: String,
    pub wall_time_secs: f64,
    pub records: usize,
    pub cycles: usize,
    pub repetitions: usize,
    pub triggered_cycles: usize,
    pub labels_spent: usize,
    pub files: Vec<String>,
}

pub const RECORDS_FILE: &str = "records.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const RULES_FILE: &str = "rules.txt";

fn rules_text(snapshots: &[RuleSnapshot]) -> String {
    let mut text = String::new();
    for s in snapshots {
        text.push_str(&format!("# repetition {} cycle {}\n", s.repetition, s.cycle));
        text.push_str(&s.text);
    }
    text
}

/// Writes every result file into `dir`, creating it if needed. Returns the
/// paths written.
pub fn emit_results(
    records: &[CycleRecord],
    rules: &[RuleSnapshot],
    config: &ExperimentConfig,
    wall_time: Duration,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::param("no records to emit"));
    }
    fs::create_dir_all(dir)?;
    let path = |name: &str| dir.join(name);

    write_records(records, fs::File::create(path(RECORDS_FILE))?)?;
    write_summary(&summarize(records), fs::File::create(path(SUMMARY_FILE))?)?;
    fs::write(path(CONFIG_FILE), config.to_toml())?;
    fs::write(path(RULES_FILE), rules_text(rules))?;

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        master_seed: config.master_seed,
        config_hash: config.hash(),
        wall_time_secs: wall_time.as_secs_f64(),
        records: records.len(),
        cycles: config.cycles,
        repetitions: config.repetitions,
        triggered_cycles: records.iter().filter(|r| r.triggered).count(),
        labels_spent: records.iter().map(|r| r.n_labeled).sum(),
        files: [RECORDS_FILE, SUMMARY_FILE, CONFIG_FILE, RULES_FILE]
            .map(String::from)
            .to_vec(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path(MANIFEST_FILE), json + "\n")?;

    Ok([RECORDS_FILE, SUMMARY_FILE, CONFIG_FILE, RULES_FILE, MANIFEST_FILE]
        .map(path)
        .to_vec())
}
