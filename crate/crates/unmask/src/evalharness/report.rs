//! Report emission: accuracy grid as CSV, per-class-set ROC curves and a
//! summary bar chart as SVG, plus a JSON dump that re-emits byte-for-byte.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::grid::EvalReport;
use super::svg;
use super::EvalError;

fn fmt_eps(eps: f64) -> String {
    if eps.fract() == 0.0 {
        format!("{}", eps as i64)
    } else {
        format!("{eps}")
    }
}

/// The accuracy grid as CSV.
pub fn grid_csv(report: &EvalReport) -> String {
    let mut out = String::from("defense,attack,norm,epsilon,class_set,accuracy\n");
    for c in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            c.defense,
            c.attack,
            c.norm,
            fmt_eps(c.epsilon),
            c.class_set,
            c.accuracy
        ));
    }
    out
}

fn roc_svg(report: &EvalReport, class_set: &str) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = report
        .rocs
        .iter()
        .filter(|r| r.class_set == class_set)
        .map(|r| {
            let points: Vec<(f64, f64)> =
                r.curve.points.iter().map(|p| (p.fpr, p.tpr)).collect();
            (format!("{} (AUC {:.3})", r.attack_label, r.curve.auc), points)
        })
        .collect();
    svg::unit_line_chart(
        &format!("Detection ROC, {class_set}"),
        "false positive rate",
        "true positive rate",
        &series,
    )
}

fn summary_svg(report: &EvalReport) -> String {
    let mut class_sets: Vec<String> = report.cells.iter().map(|c| c.class_set.clone()).collect();
    class_sets.dedup();
    let defenses = ["none", "at", "unmask"];
    let groups: Vec<(String, Vec<f64>)> = class_sets
        .iter()
        .map(|cs| {
            let values = defenses
                .iter()
                .map(|d| {
                    let attacked: Vec<f64> = report
                        .cells
                        .iter()
                        .filter(|c| &c.class_set == cs && c.defense == *d && c.attack != "none")
                        .map(|c| c.accuracy)
                        .collect();
                    attacked.iter().sum::<f64>() / attacked.len().max(1) as f64
                })
                .collect();
            (cs.clone(), values)
        })
        .collect();
    svg::grouped_bar_chart(
        "Mean accuracy across attack vectors",
        "accuracy",
        &["none".to_string(), "at".to_string(), "unmask".to_string()],
        &groups,
    )
}

/// Write grid.csv, one ROC SVG per class set, summary.svg, and
/// report.json under `dir`. Byte-deterministic for a given report; returns
/// the file inventory.
pub fn emit_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, EvalError> {
    if report.cells.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();

    let mut write = |name: String, contents: String| -> Result<(), EvalError> {
        let path = dir.join(name);
        std::fs::File::create(&path)?.write_all(contents.as_bytes())?;
        files.push(path);
        Ok(())
    };

    write("grid.csv".to_string(), grid_csv(report))?;
    let mut class_sets: Vec<String> = report.cells.iter().map(|c| c.class_set.clone()).collect();
    class_sets.dedup();
    for cs in &class_sets {
        write(
            format!("roc_{}.svg", cs.to_lowercase()),
            roc_svg(report, cs),
        )?;
    }
    write("summary.svg".to_string(), summary_svg(report))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write("report.json".to_string(), json)?;
    Ok(files)
}

/// Read back a report.json produced by [`emit_report`].
pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport, EvalError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| EvalError::Io(std::io::Error::other(format!("report.json: {e}"))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalharness::grid::{GridCell, ReportMeta, RocEntry};
    use crate::evalharness::{roc, RocCurve};

    fn sample_report() -> EvalReport {
        let curve: RocCurve =
            roc(&[(0.9, true), (0.8, true), (0.1, false), (0.2, false)]).unwrap();
        EvalReport {
            cells: vec![
                GridCell {
                    defense: "none".into(),
                    attack: "none".into(),
                    norm: "-".into(),
                    epsilon: 0.0,
                    class_set: "CS3a".into(),
                    accuracy: 0.97,
                },
                GridCell {
                    defense: "unmask".into(),
                    attack: "pgd".into(),
                    norm: "linf".into(),
                    epsilon: 16.0,
                    class_set: "CS3a".into(),
                    accuracy: 0.81,
                },
            ],
            rocs: vec![RocEntry {
                class_set: "CS3a".into(),
                attack_label: "pgd_linf_eps16".into(),
                curve,
            }],
            meta: ReportMeta {
                config_toml: String::new(),
                image_pixels: 1024,
                l2_rescaled: vec![(300.0, 300.0 / 7.0)],
                extractor_f1: vec![("CS3a".into(), 0.95)],
                defense_mode: "always_rectify".into(),
            },
        }
    }

    #[test]
    fn csv_layout_is_stable() {
        let report = sample_report();
        let csv = grid_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "defense,attack,norm,epsilon,class_set,accuracy");
        assert_eq!(lines.next().unwrap(), "none,none,-,0,CS3a,0.970000");
        assert_eq!(lines.next().unwrap(), "unmask,pgd,linf,16,CS3a,0.810000");
    }

    #[test]
    fn emission_is_byte_deterministic_and_complete() {
        let report = sample_report();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let files_a = emit_report(&report, dir_a.path()).unwrap();
        let files_b = emit_report(&report, dir_b.path()).unwrap();
        assert_eq!(files_a.len(), 4); // grid.csv + roc svg + summary.svg + report.json
        for (a, b) in files_a.iter().zip(&files_b) {
            assert_eq!(a.file_name(), b.file_name());
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        // Round trip through report.json re-emits identical bytes.
        let reloaded = load_report(dir_a.path().join("report.json")).unwrap();
        assert_eq!(reloaded, report);
    }

    #[test]
    fn empty_report_is_an_error() {
        let mut report = sample_report();
        report.cells.clear();
        assert!(matches!(
            emit_report(&report, tempfile::tempdir().unwrap().path()),
            Err(EvalError::EmptyReport)
        ));
    }
}
