//! CSV and SVG renderings of the introspection artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::introspect::{AttentionProfile, EmbeddingExport};
use crate::tsne::TsneResult;

/// Writes `day,mean,ci_low,ci_high,n`.
pub fn write_attention_csv(path: impl AsRef<Path>, profile: &AttentionProfile) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["day", "mean", "ci_low", "ci_high", "n"])?;
    for d in &profile.days {
        w.write_record([
            d.offset.to_string(),
            d.mean.to_string(),
            d.ci_low.to_string(),
            d.ci_high.to_string(),
            d.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `fips,x,y,<category columns>`.
pub fn write_tsne_csv(
    path: impl AsRef<Path>,
    export: &EmbeddingExport,
    tsne: &TsneResult,
) -> Result<()> {
    if export.rows.len() != tsne.coords.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows vs {} t-SNE points",
            export.rows.len(),
            tsne.coords.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["fips".to_string(), "x".into(), "y".into()];
    header.extend(export.columns.iter().cloned());
    w.write_record(&header)?;
    for (row, c) in export.rows.iter().zip(&tsne.coords) {
        let mut rec = vec![row.fips.clone(), c[0].to_string(), c[1].to_string()];
        rec.extend(row.labels.iter().cloned());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `fips,e0,e1,...,<category columns>`.
pub fn write_embeddings_csv(path: impl AsRef<Path>, export: &EmbeddingExport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = export.rows.first().map_or(0, |r| r.vector.len());
    let mut header = vec!["fips".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    header.extend(export.columns.iter().cloned());
    w.write_record(&header)?;
    for row in &export.rows {
        let mut rec = vec![row.fips.clone()];
        rec.extend(row.vector.iter().map(|v| v.to_string()));
        rec.extend(row.labels.iter().cloned());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn scale(v: f64, lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> f64 {
    if hi > lo {
        out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)
    } else {
        0.5 * (out_lo + out_hi)
    }
}

fn header(title: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

/// Mean attention per day with a shaded confidence band.
pub fn attention_svg(profile: &AttentionProfile) -> String {
    let mut s = header("Mean attention weight per day");
    let days = &profile.days;
    if days.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let lo = days
        .iter()
        .map(|d| d.ci_low)
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    let hi = days
        .iter()
        .map(|d| d.ci_high)
        .fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1) = (days[0].offset as f64, days[days.len() - 1].offset as f64);
    let px = |o: i64| scale(o as f64, x0, x1, MARGIN, WIDTH - MARGIN);
    let py = |v: f64| scale(v, lo, hi, HEIGHT - MARGIN, MARGIN);

    let mut band = String::new();
    for d in days {
        let _ = write!(band, "{:.2},{:.2} ", px(d.offset), py(d.ci_high));
    }
    for d in days.iter().rev() {
        let _ = write!(band, "{:.2},{:.2} ", px(d.offset), py(d.ci_low));
    }
    let _ = writeln!(
        s,
        "<polygon points=\"{}\" fill=\"#1f77b4\" fill-opacity=\"0.25\" stroke=\"none\"/>",
        band.trim_end()
    );
    let line: Vec<String> = days
        .iter()
        .map(|d| format!("{:.2},{:.2}", px(d.offset), py(d.mean)))
        .collect();
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>",
        line.join(" ")
    );
    axes(
        &mut s,
        &format!("{x0}"),
        &format!("{x1}"),
        lo,
        hi,
        "day relative to forecast date",
    );
    s.push_str("</svg>\n");
    s
}

fn axes(s: &mut String, x_lo: &str, x_hi: &str, y_lo: f64, y_hi: f64, x_label: &str) {
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>"
    );
    let font = "font-family=\"sans-serif\" font-size=\"11\"";
    let _ = writeln!(
        s,
        "<text x=\"{l}\" y=\"{}\" {font}>{}</text>",
        b + 16.0,
        escape(x_lo)
    );
    let _ = writeln!(
        s,
        "<text x=\"{r}\" y=\"{}\" text-anchor=\"end\" {font}>{}</text>",
        b + 16.0,
        escape(x_hi)
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" {font}>{}</text>",
        (l + r) / 2.0,
        b + 32.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{b}\" text-anchor=\"end\" {font}>{y_lo:.4}</text>",
        l - 4.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" {font}>{y_hi:.4}</text>",
        l - 4.0,
        t + 4.0
    );
}

/// Scatter of t-SNE coordinates coloured by one categorical column.
pub fn tsne_svg(
    export: &EmbeddingExport,
    tsne: &TsneResult,
    color_column: usize,
) -> Result<String> {
    if export.rows.len() != tsne.coords.len() {
        return Err(Error::Shape(
            "embedding rows and t-SNE points differ in count".into(),
        ));
    }
    let column = export
        .columns
        .get(color_column)
        .ok_or_else(|| Error::Index(format!("no categorical column {color_column}")))?;
    let mut s = header(&format!("t-SNE of reduced embeddings by {column}"));
    let categories: BTreeMap<&str, usize> = {
        let mut m = BTreeMap::new();
        for r in &export.rows {
            m.entry(r.labels[color_column].as_str()).or_insert(0);
        }
        m.into_keys().enumerate().map(|(i, k)| (k, i)).collect()
    };
    let (mut xl, mut xh, mut yl, mut yh) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for c in &tsne.coords {
        xl = xl.min(c[0]);
        xh = xh.max(c[0]);
        yl = yl.min(c[1]);
        yh = yh.max(c[1]);
    }
    let plot_right = WIDTH - MARGIN - 120.0;
    for (r, c) in export.rows.iter().zip(&tsne.coords) {
        let k = categories[r.labels[color_column].as_str()];
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.8\"><title>{}</title></circle>",
            scale(c[0], xl, xh, MARGIN, plot_right),
            scale(c[1], yl, yh, HEIGHT - MARGIN, MARGIN),
            PALETTE[k % PALETTE.len()],
            escape(&r.fips)
        );
    }
    for (label, &k) in &categories {
        let y = MARGIN + 16.0 * k as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            plot_right + 20.0,
            y,
            PALETTE[k % PALETTE.len()],
            plot_right + 36.0,
            y + 9.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
