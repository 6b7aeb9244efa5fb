//! Result tables rendered as CSV and aligned text.

use std::path::Path;

use crate::error::Result;
use crate::eval::{
    FoldResults, Improvement, LocationImprovement, LocationResult, MetricsReport, TrainScope,
};
use crate::stats::PairedTestResult;
use crate::HORIZON;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: &str, headers: &[&str]) -> Self {
        Self {
            title: title.into(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = String::new();
        if !self.title.is_empty() {
            out.push_str(&self.title);
            out.push('\n');
        }
        out.push_str(&line(&self.headers));
        out.push('\n');
        out.push_str(
            &widths
                .iter()
                .map(|w| "-".repeat(*w))
                .collect::<Vec<_>>()
                .join("  "),
        );
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

fn f3(v: f64) -> String {
    format!("{v:.3}")
}

fn f1(v: f64) -> String {
    format!("{v:.1}")
}

fn weekly_headers(lead: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = lead.iter().map(|s| s.to_string()).collect();
    for w in 1..=HORIZON {
        h.push(format!("week{w}_mae"));
        h.push(format!("week{w}_f1"));
    }
    h
}

fn weekly_cells(r: &MetricsReport) -> Vec<String> {
    r.weeks.iter().flat_map(|w| [f3(w.mae), f1(w.f1)]).collect()
}

/// One row per model: weekly MAE/F1 followed by the aggregates.
pub fn results_table(title: &str, rows: &[(String, &MetricsReport)]) -> Table {
    let mut headers = weekly_headers(&["model"]);
    headers.extend(["mae", "rmse", "f1", "roc_auc"].map(String::from));
    let mut t = Table {
        title: title.into(),
        headers,
        rows: vec![],
    };
    for (name, r) in rows {
        let mut row = vec![name.clone()];
        row.extend(weekly_cells(r));
        row.extend([
            f3(r.mae),
            f3(r.rmse),
            f1(r.f1),
            r.roc_auc.map(f1).unwrap_or_else(|| "n/a".into()),
        ]);
        t.push(row);
    }
    t
}

/// Fold rows for two configurations followed by one `mean ± std` row.
pub fn cv_table(name_a: &str, a: &FoldResults, name_b: &str, b: &FoldResults) -> Result<Table> {
    let hdr = |n: &str, m: &str| format!("{n}_{m}");
    let headers: Vec<String> = std::iter::once("fold".to_string())
        .chain(["mae", "rmse", "f1"].iter().map(|m| hdr(name_a, m)))
        .chain(["mae", "rmse", "f1"].iter().map(|m| hdr(name_b, m)))
        .collect();
    let mut t = Table {
        title: "Cross-validation".into(),
        headers,
        rows: vec![],
    };
    for i in 0..a.len() {
        t.push(vec![
            (i + 1).to_string(),
            f3(a.mae[i]),
            f3(a.rmse[i]),
            format!("{:.2}", a.f1[i]),
            f3(b.mae[i]),
            f3(b.rmse[i]),
            format!("{:.2}", b.f1[i]),
        ]);
    }
    let (sa, sb) = (a.summary()?, b.summary()?);
    let pm = |s: crate::stats::Summary, d: usize| format!("{:.d$} ± {:.d$}", s.mean, s.std);
    t.push(vec![
        "mean ± std".into(),
        pm(sa.mae, 3),
        pm(sa.rmse, 3),
        pm(sa.f1, 1),
        pm(sb.mae, 3),
        pm(sb.rmse, 3),
        pm(sb.f1, 1),
    ]);
    Ok(t)
}

/// `None` marks a metric whose paired differences have zero variance.
pub fn ttest_table(rows: &[(&str, Option<PairedTestResult>)]) -> Table {
    let mut t = Table::new(
        "Paired t-tests",
        &["metric", "mean_difference", "t", "df", "p_value"],
    );
    for (metric, r) in rows {
        let row = match r {
            Some(r) => vec![
                metric.to_string(),
                format!("{:.6}", r.mean_difference),
                format!("{:.4}", r.t),
                r.df.to_string(),
                format!("{:.4}", r.p_value),
            ],
            None => {
                let mut row = vec![metric.to_string()];
                row.extend(["n/a"; 4].map(String::from));
                row
            }
        };
        t.push(row);
    }
    t
}

/// Weekly rows for each (train scope, evaluated state) pair, specific first.
pub fn location_weekly_table(results: &[LocationResult]) -> Table {
    let mut t = Table {
        title: "Location-specific vs location-agnostic training (weekly)".into(),
        headers: weekly_headers(&["train", "eval"]),
        rows: vec![],
    };
    for scope in [TrainScope::Specific, TrainScope::Agnostic] {
        for r in results.iter().filter(|r| r.scope == scope) {
            let train = match scope {
                TrainScope::Specific => r.state.clone(),
                TrainScope::Agnostic => "all".into(),
            };
            let mut row = vec![train, r.state.clone()];
            row.extend(weekly_cells(&r.report));
            t.push(row);
        }
    }
    t
}

pub fn location_summary_table(results: &[LocationResult]) -> Table {
    let mut t = Table::new(
        "Location-specific vs location-agnostic training (test set)",
        &["train", "eval", "mae", "rmse", "f1"],
    );
    for scope in [TrainScope::Specific, TrainScope::Agnostic] {
        for r in results.iter().filter(|r| r.scope == scope) {
            let train = match scope {
                TrainScope::Specific => r.state.clone(),
                TrainScope::Agnostic => "all".into(),
            };
            t.push(vec![
                train,
                r.state.clone(),
                f3(r.report.mae),
                f3(r.report.rmse),
                f1(r.report.f1),
            ]);
        }
    }
    t
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into())
}

pub fn location_improvement_table(improvements: &[LocationImprovement]) -> Table {
    let mut headers = vec!["definition".to_string()];
    if let Some(first) = improvements.first() {
        headers.extend(first.per_state.iter().map(|(s, _)| format!("{s}_pct")));
    }
    headers.push("average_pct".into());
    let mut t = Table {
        title: "Relative improvement of location-agnostic training".into(),
        headers,
        rows: vec![],
    };
    for imp in improvements {
        let mut row = vec![imp.definition.to_string()];
        row.extend(imp.per_state.iter().map(|(_, v)| pct(*v)));
        row.push(pct(imp.average));
        t.push(row);
    }
    t
}

pub fn improvement_table(rows: &[Improvement]) -> Table {
    let mut t = Table::new(
        "Relative improvements",
        &[
            "metric",
            "baseline",
            "candidate",
            "improvement_pct",
            "reported_pct",
            "note",
        ],
    );
    for r in rows {
        let note = match (r.reported, r.discrepancy()) {
            (None, _) => String::new(),
            (Some(_), None) => "consistent".into(),
            (Some(_), Some(gap)) => format!("discrepancy {:+.2} points", gap),
        };
        t.push(vec![
            r.metric.clone(),
            r.baseline.to_string(),
            r.candidate.to_string(),
            format!("{:.2}", r.percent),
            r.reported.map(|v| v.to_string()).unwrap_or_default(),
            note,
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::WeekMetrics;

    fn report(mae: f64) -> MetricsReport {
        MetricsReport {
            weeks: (1..=6)
                .map(|week| WeekMetrics {
                    week,
                    mae,
                    rmse: mae,
                    f1: 50.0,
                })
                .collect(),
            mae,
            rmse: mae,
            f1: 50.0,
            roc_auc: None,
            n: 3,
        }
    }

    #[test]
    fn results_layout() {
        let r = report(0.25);
        let t = results_table("x", &[("HM".into(), &r)]);
        assert_eq!(t.headers.len(), 1 + 12 + 4);
        assert_eq!(t.rows[0][1], "0.250");
        assert_eq!(t.rows[0][16], "n/a");
        assert!(t.render().contains("HM"));
    }

    #[test]
    fn cv_layout_has_summary_row() {
        let mut a = FoldResults::default();
        let mut b = FoldResults::default();
        for i in 0..5 {
            a.push(&report(0.3 + i as f64 * 0.01));
            b.push(&report(0.2 + i as f64 * 0.01));
        }
        let t = cv_table("A", &a, "B", &b).unwrap();
        assert_eq!(t.rows.len(), 6);
        assert_eq!(t.rows[5][0], "mean ± std");
    }
}
