//! Report files: JSON mirroring the in-memory records, flat CSV for
//! scoreboards, long-format CSV for the ablation table.

use super::{AblationTable, AttentionStats, EvalError, EvalReport};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?} (expected json or csv)")),
        }
    }
}

/// Everything one emission writes; JSON mirrors this verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub reports: Vec<EvalReport>,
    pub attention_stats: Vec<AttentionStats>,
}

/// Write reports to `path`. CSV is one row per (dataset, metric) with a
/// fixed header and stable row order; JSON is the bundle itself.
pub fn emit_report(
    reports: &[EvalReport],
    stats: &[AttentionStats],
    path: &Path,
    format: ReportFormat,
) -> Result<(), EvalError> {
    match format {
        ReportFormat::Json => {
            let bundle = ReportBundle {
                reports: reports.to_vec(),
                attention_stats: stats.to_vec(),
            };
            let json = serde_json::to_string_pretty(&bundle).expect("reports serialize");
            fs::write(path, json + "\n")?;
        }
        ReportFormat::Csv => {
            let mut out = String::from("dataset,split,metric,value\n");
            for report in reports {
                for (metric, value) in &report.metrics {
                    out.push_str(&format!(
                        "{},{},{},{}\n",
                        report.dataset_id, report.split, metric, value
                    ));
                }
            }
            fs::write(path, out)?;
        }
    }
    Ok(())
}

/// Plot-ready long format: one row per (k, split, metric) with mean and sd.
pub fn write_ablation_csv(table: &AblationTable, path: &Path) -> Result<(), EvalError> {
    let mut out = String::from("k,split,metric,mean,sd\n");
    for row in &table.rows {
        for (split, cell) in [
            ("id_dev", row.id_dev),
            ("ood_decorrelated", row.ood_decorrelated),
            ("ood_adversarial", row.ood_adversarial),
        ] {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.k, split, table.metric, cell.mean, cell.sd
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{AblationCell, AblationRow, GroupMeans};
    use crate::model::ForwardMode;
    use std::collections::BTreeMap;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("read-reports");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample_report() -> EvalReport {
        let mut metrics = BTreeMap::new();
        metrics.insert("accuracy".to_string(), 0.9375);
        metrics.insert("f1".to_string(), 0.9);
        EvalReport {
            dataset_id: "overlap".into(),
            split: "dev".into(),
            metrics,
            num_examples: 16,
            checkpoint_id: Some("abc123".into()),
            seed: 7,
        }
    }

    fn sample_stats() -> AttentionStats {
        AttentionStats {
            layer: 4,
            path: ForwardMode::MainPath,
            overall: GroupMeans { overlapping: 0.3, non_overlapping: 0.4, special: 0.3 },
            by_label: BTreeMap::new(),
            num_examples: 16,
            per_head: None,
        }
    }

    #[test]
    fn json_round_trips() {
        let path = tmp("bundle.json");
        emit_report(&[sample_report()], &[sample_stats()], &path, ReportFormat::Json).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let bundle: ReportBundle = serde_json::from_str(&text).unwrap();
        assert_eq!(bundle.reports, vec![sample_report()]);
        assert_eq!(bundle.attention_stats, vec![sample_stats()]);
    }

    #[test]
    fn empty_reports_give_header_only_csv() {
        let path = tmp("empty.csv");
        emit_report(&[], &[], &path, ReportFormat::Csv).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "dataset,split,metric,value\n");
    }

    #[test]
    fn csv_has_one_row_per_dataset_metric() {
        let path = tmp("rows.csv");
        emit_report(&[sample_report()], &[], &path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dataset,split,metric,value");
        assert_eq!(lines.len(), 3);
        assert!(lines.contains(&"overlap,dev,accuracy,0.9375"));
        assert!(lines.contains(&"overlap,dev,f1,0.9"));
    }

    #[test]
    fn ablation_csv_schema() {
        let table = AblationTable {
            metric: "accuracy".into(),
            seeds: vec![1, 2],
            rows: vec![AblationRow {
                k: 4,
                id_dev: AblationCell { mean: 0.95, sd: 0.01 },
                ood_decorrelated: AblationCell { mean: 0.8, sd: 0.02 },
                ood_adversarial: AblationCell { mean: 0.7, sd: 0.03 },
            }],
        };
        let path = tmp("ablation.csv");
        write_ablation_csv(&table, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,split,metric,mean,sd");
        assert_eq!(lines[1], "4,id_dev,accuracy,0.95,0.01");
        assert_eq!(lines.len(), 4);
    }
}
