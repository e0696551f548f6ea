//! Experiment report serialization.
//!
//! JSON keeps full precision (and round-trips exactly); CSV mirrors the
//! result-table layout with percentages at two decimals.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::train::ExperimentReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed report: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn to_json_string(report: &ExperimentReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn to_csv_string(report: &ExperimentReport) -> String {
    let limit = report
        .limit
        .map(|l| l.to_string())
        .unwrap_or_default();
    let rel = report
        .rel_imp_pct
        .map(|r| format!("{r:.2}"))
        .unwrap_or_default();
    format!(
        "system,limit,avg_acc_pct,rel_imp_pct,std_pct,n_runs,trainable_params\n\
         {},{},{:.2},{},{:.2},{},{}\n",
        report.system,
        limit,
        report.avg_acc_pct,
        rel,
        report.std_pct,
        report.n_runs,
        report.trainable_params
    )
}

pub fn write_report(
    report: &ExperimentReport,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<(), ReportError> {
    let body = match format {
        ReportFormat::Json => to_json_string(report),
        ReportFormat::Csv => to_csv_string(report),
    };
    fs::write(path, body)?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ExperimentReport, ReportError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::RunReport;

    fn sample_report() -> ExperimentReport {
        ExperimentReport {
            system: "ar_tl".into(),
            limit: None,
            n_runs: 10,
            avg_acc_pct: 82.3,
            std_pct: 2.56,
            rel_imp_pct: Some(28.59375),
            baseline: Some("baseline".into()),
            trainable_params: 216_400,
            runs: (0..10)
                .map(|i| RunReport {
                    run_index: i,
                    seed: i as u64,
                    accuracy: 0.823,
                    loss_curve: vec![1.5, 0.9, 0.4],
                    trainable_params: 216_400,
                })
                .collect(),
        }
    }

    #[test]
    fn csv_row_matches_table_layout() {
        let csv = to_csv_string(&sample_report());
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "system,limit,avg_acc_pct,rel_imp_pct,std_pct,n_runs,trainable_params"
        );
        assert_eq!(lines.next().unwrap(), "ar_tl,,82.30,28.59,2.56,10,216400");
    }

    #[test]
    fn json_round_trips_exactly() {
        let report = sample_report();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_report(&report, &path, ReportFormat::Json).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(report, back);
    }
}
