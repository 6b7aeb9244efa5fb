//! Ingestion and sample construction.
//!
//! Time-series CSV: `fips,date,<channel...>,score` (any column order; every
//! column other than `fips`, `date` and `score` is a meteorological channel,
//! in header order). Statics CSV: `fips,<feature...>`. A sample anchored at a
//! score-bearing date `t` sees the `window` days `t-window ..= t-1` for every
//! channel, followed by the same days shifted back 365 days, and predicts
//! the scores of six consecutive weekly release dates.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::HORIZON;

pub const DEFAULT_WINDOW: usize = 180;
pub const PREVIOUS_YEAR_SHIFT: usize = 365;
/// Counties with a run of missing values longer than this are dropped.
pub const MAX_INTERPOLATION_GAP: usize = 14;

/// Soil-quality columns of the county statics table (`SQ1` is nutrient
/// availability).
pub const DEFAULT_CATEGORICAL_COLUMNS: [&str; 7] =
    ["SQ1", "SQ2", "SQ3", "SQ4", "SQ5", "SQ6", "SQ7"];

/// Two-digit FIPS state codes.
pub const STATE_FIPS: [(&str, &str); 51] = [
    ("AL", "01"),
    ("AK", "02"),
    ("AZ", "04"),
    ("AR", "05"),
    ("CA", "06"),
    ("CO", "08"),
    ("CT", "09"),
    ("DE", "10"),
    ("DC", "11"),
    ("FL", "12"),
    ("GA", "13"),
    ("HI", "15"),
    ("ID", "16"),
    ("IL", "17"),
    ("IN", "18"),
    ("IA", "19"),
    ("KS", "20"),
    ("KY", "21"),
    ("LA", "22"),
    ("ME", "23"),
    ("MD", "24"),
    ("MA", "25"),
    ("MI", "26"),
    ("MN", "27"),
    ("MS", "28"),
    ("MO", "29"),
    ("MT", "30"),
    ("NE", "31"),
    ("NV", "32"),
    ("NH", "33"),
    ("NJ", "34"),
    ("NM", "35"),
    ("NY", "36"),
    ("NC", "37"),
    ("ND", "38"),
    ("OH", "39"),
    ("OK", "40"),
    ("OR", "41"),
    ("PA", "42"),
    ("RI", "44"),
    ("SC", "45"),
    ("SD", "46"),
    ("TN", "47"),
    ("TX", "48"),
    ("UT", "49"),
    ("VT", "50"),
    ("VA", "51"),
    ("WA", "53"),
    ("WV", "54"),
    ("WI", "55"),
    ("WY", "56"),
];

/// Default states of the location experiment: Iowa, Montana, Oklahoma.
pub const DEFAULT_LOCATION_STATES: [&str; 3] = ["IA", "MT", "OK"];

/// FIPS prefix for a state abbreviation, or the input itself when it is
/// already a two-digit code.
pub fn state_prefix(state: &str) -> Option<&'static str> {
    STATE_FIPS
        .iter()
        .find(|(abbr, code)| abbr.eq_ignore_ascii_case(state) || *code == state)
        .map(|(_, code)| *code)
}

/// Zero-pads numeric county identifiers to five characters.
pub fn normalize_fips(raw: &str) -> Result<String> {
    let s = raw.trim();
    let s = s.strip_suffix(".0").unwrap_or(s);
    if s.is_empty() || s.len() > 5 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Data(format!("invalid FIPS identifier {raw:?}")));
    }
    Ok(format!("{s:0>5}"))
}

// ── time series ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct CountyTimeSeries {
    pub fips: String,
    /// Contiguous daily dates.
    pub dates: Vec<NaiveDate>,
    /// `P × M`, row-major.
    pub measurements: Vec<f64>,
    pub channels: usize,
    pub scores: Vec<Option<f64>>,
}

impl CountyTimeSeries {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn day(&self, i: usize) -> &[f64] {
        &self.measurements[i * self.channels..(i + 1) * self.channels]
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let first = *self.dates.first()?;
        let i = usize::try_from((date - first).num_days()).ok()?;
        (i < self.dates.len()).then_some(i)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountyDrop {
    pub fips: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct TimeSeriesSet {
    pub channels: Vec<String>,
    pub counties: BTreeMap<String, CountyTimeSeries>,
    /// Counties removed during loading (e.g. unrecoverable missing values).
    pub dropped: Vec<CountyDrop>,
}

pub fn load_timeseries(path: impl AsRef<Path>) -> Result<TimeSeriesSet> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
    read_timeseries(BufReader::new(file))
}

struct RawRow {
    date: NaiveDate,
    values: Vec<Option<f64>>,
    score: Option<f64>,
}

pub fn read_timeseries<R: Read>(reader: R) -> Result<TimeSeriesSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Schema(format!("time-series CSV lacks a `{name}` column")))
    };
    let (fips_col, date_col, score_col) = (find("fips")?, find("date")?, find("score")?);
    let channel_cols: Vec<usize> = (0..header.len())
        .filter(|c| ![fips_col, date_col, score_col].contains(c))
        .collect();
    if channel_cols.is_empty() {
        return Err(Error::Schema(
            "time-series CSV has no measurement columns".into(),
        ));
    }
    let channels: Vec<String> = channel_cols
        .iter()
        .map(|&c| header[c].to_string())
        .collect();

    let mut grouped: BTreeMap<String, Vec<RawRow>> = BTreeMap::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let at = || format!("row {}", line + 2);
        let fips = normalize_fips(&record[fips_col])?;
        let date =
            parse_date(&record[date_col]).map_err(|e| Error::Data(format!("{}: {e}", at())))?;
        let score = match record[score_col].trim() {
            "" => None,
            s => {
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::Data(format!("{}: bad score {s:?}", at())))?;
                if !(0.0..=5.0).contains(&v) {
                    return Err(Error::Data(format!("{}: score {v} outside [0, 5]", at())));
                }
                Some(v)
            }
        };
        let values = channel_cols
            .iter()
            .map(|&c| {
                parse_measurement(&record[c]).map_err(|e| Error::Data(format!("{}: {e}", at())))
            })
            .collect::<Result<Vec<_>>>()?;
        grouped.entry(fips).or_default().push(RawRow {
            date,
            values,
            score,
        });
    }

    let m = channels.len();
    let mut counties = BTreeMap::new();
    let mut dropped = Vec::new();
    let mut gaps = Vec::new();
    for (fips, mut rows) in grouped {
        rows.sort_by_key(|r| r.date);
        for w in rows.windows(2) {
            let step = (w[1].date - w[0].date).num_days();
            if step == 0 {
                return Err(Error::Data(format!(
                    "duplicate row for county {fips} on {}",
                    w[0].date
                )));
            }
            if step != 1 {
                gaps.push(format!("{fips}: {} -> {}", w[0].date, w[1].date));
            }
        }
        let mut measurements = vec![0.0; rows.len() * m];
        let mut failed = None;
        for c in 0..m {
            let column: Vec<Option<f64>> = rows.iter().map(|r| r.values[c]).collect();
            match interpolate(&column, MAX_INTERPOLATION_GAP) {
                Ok(filled) => {
                    for (i, v) in filled.into_iter().enumerate() {
                        measurements[i * m + c] = v;
                    }
                }
                Err(reason) => {
                    failed = Some(format!("channel {}: {reason}", channels[c]));
                    break;
                }
            }
        }
        if let Some(reason) = failed {
            log::warn!("dropping county {fips}: {reason}");
            dropped.push(CountyDrop { fips, reason });
            continue;
        }
        counties.insert(
            fips.clone(),
            CountyTimeSeries {
                fips,
                dates: rows.iter().map(|r| r.date).collect(),
                measurements,
                channels: m,
                scores: rows.iter().map(|r| r.score).collect(),
            },
        );
    }
    if !gaps.is_empty() {
        return Err(Error::Data(format!("gapped dates: {}", gaps.join("; "))));
    }
    Ok(TimeSeriesSet {
        channels,
        counties,
        dropped,
    })
}

fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    let s = s.trim();
    // accept a trailing time component such as "2001-01-01 00:00:00"
    let day = s.split([' ', 'T']).next().unwrap_or(s);
    NaiveDate::parse_from_str(day, "%Y-%m-%d").map_err(|e| format!("bad date {s:?}: {e}"))
}

fn parse_measurement(s: &str) -> std::result::Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    let v: f64 = s.parse().map_err(|_| format!("bad measurement {s:?}"))?;
    Ok(v.is_finite().then_some(v))
}

/// Linear interpolation between known neighbours; leading and trailing
/// runs take the nearest known value. Fails when a run of missing values is
/// longer than `max_gap` or the column has no values at all.
pub fn interpolate(
    values: &[Option<f64>],
    max_gap: usize,
) -> std::result::Result<Vec<f64>, String> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
        return Err("no observed values".into());
    };
    if first > max_gap || values.len() - 1 - last > max_gap {
        return Err(format!("edge gap longer than {max_gap} days"));
    }
    let mut out = vec![0.0; values.len()];
    out[..first].fill(values[first].unwrap());
    out[last..].fill(values[last].unwrap());
    for w in known.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a - 1 > max_gap {
            return Err(format!("gap of {} days", b - a - 1));
        }
        let (va, vb) = (values[a].unwrap(), values[b].unwrap());
        for (i, o) in out.iter_mut().enumerate().take(b).skip(a) {
            *o = va + (vb - va) * (i - a) as f64 / (b - a) as f64;
        }
    }
    out[last] = values[last].unwrap();
    Ok(out)
}

// ── statics ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct StaticFeatures {
    pub fips: String,
    pub numeric: Vec<f64>,
    pub categorical: Vec<usize>,
}

/// Dense integer codes per categorical column. Code 0 is reserved for
/// labels not seen when the encoder was fitted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CategoricalEncoder {
    pub columns: Vec<String>,
    /// `labels[col][code - 1]`
    pub labels: Vec<Vec<String>>,
}

impl CategoricalEncoder {
    /// Assigns codes `1..` to the sorted distinct labels of each column.
    pub fn fit(columns: &[String], rows: &[Vec<String>]) -> Self {
        let labels = (0..columns.len())
            .map(|c| {
                let set: BTreeSet<&str> = rows.iter().map(|r| r[c].as_str()).collect();
                set.into_iter().map(str::to_string).collect()
            })
            .collect();
        Self {
            columns: columns.to_vec(),
            labels,
        }
    }

    pub fn encode(&self, column: usize, label: &str) -> usize {
        self.labels[column]
            .iter()
            .position(|l| l == label)
            .map_or(0, |i| i + 1)
    }

    pub fn decode(&self, column: usize, code: usize) -> Option<&str> {
        code.checked_sub(1)
            .and_then(|i| self.labels[column].get(i))
            .map(String::as_str)
    }

    /// Vocabulary size per column, including the unknown slot.
    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.len() + 1).collect()
    }

    /// Writes `column,label,code` lines.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["column", "label", "code"])?;
        for (c, col) in self.columns.iter().enumerate() {
            for (i, label) in self.labels[c].iter().enumerate() {
                w.write_record([col.as_str(), label.as_str(), &(i + 1).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut by_col: Vec<(String, Vec<(usize, String)>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Format(
                    "dictionary rows need column,label,code".into(),
                ));
            }
            let code: usize = rec[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad code {:?}", &rec[2])))?;
            let col = rec[0].to_string();
            match by_col.iter_mut().find(|(c, _)| *c == col) {
                Some((_, v)) => v.push((code, rec[1].to_string())),
                None => by_col.push((col, vec![(code, rec[1].to_string())])),
            }
        }
        let mut enc = Self::default();
        for (col, mut entries) in by_col {
            entries.sort();
            if entries
                .iter()
                .enumerate()
                .any(|(i, (code, _))| *code != i + 1)
            {
                return Err(Error::Format(format!("codes of column {col} are not 1..n")));
            }
            enc.columns.push(col);
            enc.labels
                .push(entries.into_iter().map(|(_, l)| l).collect());
        }
        Ok(enc)
    }
}

#[derive(Clone, Debug, Default)]
pub struct StaticSet {
    pub numeric_columns: Vec<String>,
    pub categorical_columns: Vec<String>,
    pub encoder: CategoricalEncoder,
    pub rows: BTreeMap<String, StaticFeatures>,
    /// Raw categorical labels per county, in `categorical_columns` order.
    pub labels: BTreeMap<String, Vec<String>>,
}

impl StaticSet {
    pub fn numeric_count(&self) -> usize {
        self.numeric_columns.len()
    }

    pub fn categorical_count(&self) -> usize {
        self.categorical_columns.len()
    }
}

/// Loads county statics and fits a fresh categorical encoder.
pub fn load_statics(path: impl AsRef<Path>, categorical_columns: &[String]) -> Result<StaticSet> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
    read_statics(BufReader::new(file), categorical_columns, None)
}

/// Reads county statics. With `encoder`, labels are coded against it
/// (unseen labels become 0); otherwise an encoder is fitted on the file.
pub fn read_statics<R: Read>(
    reader: R,
    categorical_columns: &[String],
    encoder: Option<&CategoricalEncoder>,
) -> Result<StaticSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let fips_col = header
        .iter()
        .position(|h| h.eq_ignore_ascii_case("fips"))
        .ok_or_else(|| Error::Schema("statics CSV lacks a `fips` column".into()))?;
    let cat_cols = categorical_columns
        .iter()
        .map(|name| {
            header.iter().position(|h| h == name).ok_or_else(|| {
                Error::Schema(format!("statics CSV lacks categorical column `{name}`"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let num_cols: Vec<usize> = (0..header.len())
        .filter(|c| *c != fips_col && !cat_cols.contains(c))
        .collect();

    let mut parsed = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let fips = normalize_fips(&rec[fips_col])?;
        let numeric = num_cols
            .iter()
            .map(|&c| {
                rec[c]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::Data(format!(
                            "row {}: bad numeric value {:?} in `{}`",
                            line + 2,
                            &rec[c],
                            &header[c]
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<String> = cat_cols.iter().map(|&c| rec[c].to_string()).collect();
        parsed.push((fips, numeric, labels));
    }

    let encoder = match encoder {
        Some(e) => {
            if e.columns != categorical_columns {
                return Err(Error::Config(format!(
                    "dictionary columns {:?} differ from configured {:?}",
                    e.columns, categorical_columns
                )));
            }
            e.clone()
        }
        None => {
            let all: Vec<Vec<String>> = parsed.iter().map(|(_, _, l)| l.clone()).collect();
            CategoricalEncoder::fit(categorical_columns, &all)
        }
    };

    let mut set = StaticSet {
        numeric_columns: num_cols.iter().map(|&c| header[c].to_string()).collect(),
        categorical_columns: categorical_columns.to_vec(),
        encoder,
        ..StaticSet::default()
    };
    for (fips, numeric, labels) in parsed {
        if set.rows.contains_key(&fips) {
            return Err(Error::Data(format!(
                "duplicate statics row for county {fips}"
            )));
        }
        let categorical = labels
            .iter()
            .enumerate()
            .map(|(c, l)| set.encoder.encode(c, l))
            .collect();
        set.rows.insert(
            fips.clone(),
            StaticFeatures {
                fips: fips.clone(),
                numeric,
                categorical,
            },
        );
        set.labels.insert(fips, labels);
    }
    Ok(set)
}

// ── samples ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub fips: String,
    pub anchor: NaiveDate,
    pub window: usize,
    /// `M′ = 2M`
    pub channels: usize,
    /// `window × M′`, oldest day first. Columns `0..M` are the current year,
    /// `M..2M` the same days one year earlier.
    pub x: Vec<f64>,
    pub numeric: Vec<f64>,
    pub categorical: Vec<usize>,
    pub target: [f64; HORIZON],
}

impl Sample {
    pub fn state_prefix(&self) -> &str {
        &self.fips[..2]
    }
}

/// Which release is the first forecast week.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetStart {
    /// The anchor date's own score is week 1.
    #[default]
    Anchor,
    /// Week 1 is the release seven days after the anchor.
    NextWeek,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOptions {
    pub window: usize,
    pub target_start: TargetStart,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            target_start: TargetStart::Anchor,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CountyReport {
    pub candidates: usize,
    pub insufficient_history: usize,
    pub incomplete_future: usize,
}

/// Why candidate anchors were discarded.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DropReport {
    pub counties: BTreeMap<String, CountyReport>,
    pub dropped_counties: Vec<CountyDrop>,
}

impl DropReport {
    pub fn candidates(&self) -> usize {
        self.counties.values().map(|c| c.candidates).sum()
    }

    pub fn insufficient_history(&self) -> usize {
        self.counties.values().map(|c| c.insufficient_history).sum()
    }

    pub fn incomplete_future(&self) -> usize {
        self.counties.values().map(|c| c.incomplete_future).sum()
    }

    pub fn dropped(&self) -> usize {
        self.insufficient_history() + self.incomplete_future()
    }

    pub fn kept(&self) -> usize {
        self.candidates() - self.dropped()
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} candidate anchors, {} kept, {} dropped for short history, {} for incomplete targets",
            self.candidates(),
            self.kept(),
            self.insufficient_history(),
            self.incomplete_future()
        );
        for d in &self.dropped_counties {
            s.push_str(&format!("\ncounty {} dropped: {}", d.fips, d.reason));
        }
        s
    }
}

/// Builds one sample per score-bearing date with complete history and
/// targets.
pub fn build_samples(
    series: &TimeSeriesSet,
    statics: &StaticSet,
    opts: SampleOptions,
) -> Result<(Vec<Sample>, DropReport)> {
    if opts.window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    let m = series.channels.len();
    let history = opts.window + PREVIOUS_YEAR_SHIFT;
    let first_week = match opts.target_start {
        TargetStart::Anchor => 0,
        TargetStart::NextWeek => 1,
    };
    let mut samples = Vec::new();
    let mut report = DropReport {
        dropped_counties: series.dropped.clone(),
        ..DropReport::default()
    };
    for (fips, county) in &series.counties {
        let st = statics
            .rows
            .get(fips)
            .ok_or_else(|| Error::Data(format!("county {fips} has no statics row")))?;
        let mut cr = CountyReport::default();
        for (k, score) in county.scores.iter().enumerate() {
            if score.is_none() {
                continue;
            }
            cr.candidates += 1;
            if k < history {
                cr.insufficient_history += 1;
                continue;
            }
            let mut target = [0.0; HORIZON];
            let complete = (0..HORIZON).all(|w| {
                let idx = k + 7 * (w + first_week);
                match county.scores.get(idx).copied().flatten() {
                    Some(v) => {
                        target[w] = v;
                        true
                    }
                    None => false,
                }
            });
            if !complete {
                cr.incomplete_future += 1;
                continue;
            }
            let mut x = Vec::with_capacity(opts.window * 2 * m);
            for r in 0..opts.window {
                let day = k - opts.window + r;
                x.extend_from_slice(county.day(day));
                x.extend_from_slice(county.day(day - PREVIOUS_YEAR_SHIFT));
            }
            samples.push(Sample {
                fips: fips.clone(),
                anchor: county.dates[k],
                window: opts.window,
                channels: 2 * m,
                x,
                numeric: st.numeric.clone(),
                categorical: st.categorical.clone(),
                target,
            });
        }
        report.counties.insert(fips.clone(), cr);
    }
    Ok((samples, report))
}

// ── normalisation ──────────────────────────────────────────────────────────

/// Per-channel z-scoring fitted on a training split. Targets are left on
/// their original scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub channel_names: Vec<String>,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub static_names: Vec<String>,
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
}

fn mean_std(sum: f64, sum_sq_dev: f64, n: f64) -> (f64, f64) {
    let mean = sum / n;
    let var = sum_sq_dev / n;
    let std = var.sqrt();
    (
        mean,
        if std > 0.0 && std.is_finite() {
            std
        } else {
            1.0
        },
    )
}

impl Normalizer {
    /// Fits population statistics. Each of the `M` meteorological channels
    /// pools its current-year and previous-year columns.
    pub fn fit(
        samples: &[Sample],
        channel_names: &[String],
        static_names: &[String],
    ) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("cannot fit a normalizer on an empty set".into()))?;
        let m = first.channels / 2;
        if channel_names.len() != m || static_names.len() != first.numeric.len() {
            return Err(Error::Data(
                "normalizer names do not match sample layout".into(),
            ));
        }
        let f_n = first.numeric.len();
        let width = first.channels;

        let mut c_sum = vec![0.0; m];
        let mut c_n = 0.0;
        let mut s_sum = vec![0.0; f_n];
        for s in samples {
            for row in s.x.chunks(width) {
                for (j, v) in row.iter().enumerate() {
                    c_sum[j % m] += v;
                }
            }
            c_n += (s.window * 2) as f64;
            for (j, v) in s.numeric.iter().enumerate() {
                s_sum[j] += v;
            }
        }
        let c_mean: Vec<f64> = c_sum.iter().map(|s| s / c_n).collect();
        let s_mean: Vec<f64> = s_sum.iter().map(|s| s / samples.len() as f64).collect();
        // second pass on deviations for accuracy
        let mut c_dev = vec![0.0; m];
        let mut s_dev = vec![0.0; f_n];
        for s in samples {
            for row in s.x.chunks(width) {
                for (j, v) in row.iter().enumerate() {
                    let d = v - c_mean[j % m];
                    c_dev[j % m] += d * d;
                }
            }
            for (j, v) in s.numeric.iter().enumerate() {
                let d = v - s_mean[j];
                s_dev[j] += d * d;
            }
        }
        let (channel_mean, channel_std) = (0..m).map(|j| mean_std(c_sum[j], c_dev[j], c_n)).unzip();
        let (static_mean, static_std) = (0..f_n)
            .map(|j| mean_std(s_sum[j], s_dev[j], samples.len() as f64))
            .unzip();
        Ok(Self {
            channel_names: channel_names.to_vec(),
            channel_mean,
            channel_std,
            static_names: static_names.to_vec(),
            static_mean,
            static_std,
        })
    }

    pub fn apply(&self, samples: &mut [Sample]) {
        let m = self.channel_mean.len();
        for s in samples {
            for (j, v) in s.x.iter_mut().enumerate() {
                let c = (j % (2 * m)) % m;
                *v = (*v - self.channel_mean[c]) / self.channel_std[c];
            }
            for (j, v) in s.numeric.iter_mut().enumerate() {
                *v = (*v - self.static_mean[j]) / self.static_std[j];
            }
        }
    }

    pub fn normalize_channel(&self, channel: usize, v: f64) -> f64 {
        (v - self.channel_mean[channel]) / self.channel_std[channel]
    }

    pub fn denormalize_channel(&self, channel: usize, v: f64) -> f64 {
        v * self.channel_std[channel] + self.channel_mean[channel]
    }

    pub fn normalize_static(&self, feature: usize, v: f64) -> f64 {
        (v - self.static_mean[feature]) / self.static_std[feature]
    }

    pub fn denormalize_static(&self, feature: usize, v: f64) -> f64 {
        v * self.static_std[feature] + self.static_mean[feature]
    }

    /// Writes `channel,mean,std` lines; meteorological channels are prefixed
    /// `ts.`, numeric statics `sn.`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["channel", "mean", "std"])?;
        let ts = self
            .channel_names
            .iter()
            .zip(self.channel_mean.iter().zip(&self.channel_std));
        for (name, (m, s)) in ts {
            w.write_record([format!("ts.{name}"), m.to_string(), s.to_string()])?;
        }
        let sn = self
            .static_names
            .iter()
            .zip(self.static_mean.iter().zip(&self.static_std));
        for (name, (m, s)) in sn {
            w.write_record([format!("sn.{name}"), m.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut n = Self {
            channel_names: vec![],
            channel_mean: vec![],
            channel_std: vec![],
            static_names: vec![],
            static_mean: vec![],
            static_std: vec![],
        };
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad statistic {s:?}")))
            };
            let (mean, std) = (parse(&rec[1])?, parse(&rec[2])?);
            if let Some(name) = rec[0].strip_prefix("ts.") {
                n.channel_names.push(name.into());
                n.channel_mean.push(mean);
                n.channel_std.push(std);
            } else if let Some(name) = rec[0].strip_prefix("sn.") {
                n.static_names.push(name.into());
                n.static_mean.push(mean);
                n.static_std.push(std);
            } else {
                return Err(Error::Format(format!("unknown channel kind {:?}", &rec[0])));
            }
        }
        Ok(n)
    }
}

// ── splits ─────────────────────────────────────────────────────────────────

/// Samples whose county lies in any of the two-digit state `prefixes`.
pub fn filter_by_state(samples: &[Sample], prefixes: &[String]) -> Vec<Sample> {
    let out: Vec<Sample> = samples
        .iter()
        .filter(|s| prefixes.iter().any(|p| s.fips.starts_with(p.as_str())))
        .cloned()
        .collect();
    if out.is_empty() {
        log::warn!("state filter {prefixes:?} selected no samples");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into `k` validation folds whose sizes differ
/// by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k = {k}; need at least 2 folds")));
    }
    if k > n {
        return Err(Error::Config(format!("k = {k} exceeds the {n} samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngState::stream(seed, 3).shuffle(&mut order);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let validation = order[start..start + len].to_vec();
        let train = order[..start]
            .iter()
            .chain(&order[start + len..])
            .copied()
            .collect();
        folds.push(Fold { train, validation });
        start += len;
    }
    Ok(folds)
}

// ── sample cache ───────────────────────────────────────────────────────────

const CACHE_MAGIC: &[u8; 7] = b"HMSAMP1";

/// Writes samples to a little-endian binary cache.
pub fn write_samples(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    put_u64(&mut w, samples.len() as u64)?;
    for s in samples {
        put_u64(&mut w, s.fips.len() as u64)?;
        w.write_all(s.fips.as_bytes())?;
        w.write_all(&s.anchor.num_days_from_ce().to_le_bytes())?;
        for n in [s.window, s.channels, s.numeric.len(), s.categorical.len()] {
            put_u64(&mut w, n as u64)?;
        }
        for v in s.x.iter().chain(&s.numeric).chain(&s.target) {
            w.write_all(&v.to_le_bytes())?;
        }
        for &c in &s.categorical {
            put_u64(&mut w, c as u64)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    read_exact(&mut r, &mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format("not a sample cache".into()));
    }
    let count = get_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = get_u64(&mut r)? as usize;
        if len > 16 {
            return Err(Error::Format("implausible FIPS length".into()));
        }
        let mut fips = vec![0u8; len];
        read_exact(&mut r, &mut fips)?;
        let fips =
            String::from_utf8(fips).map_err(|_| Error::Format("FIPS is not UTF-8".into()))?;
        let mut d = [0u8; 4];
        read_exact(&mut r, &mut d)?;
        let anchor = NaiveDate::from_num_days_from_ce_opt(i32::from_le_bytes(d))
            .ok_or_else(|| Error::Format("bad anchor date".into()))?;
        let window = get_u64(&mut r)? as usize;
        let channels = get_u64(&mut r)? as usize;
        let f_n = get_u64(&mut r)? as usize;
        let f_d = get_u64(&mut r)? as usize;
        let x = (0..window * channels)
            .map(|_| get_f64(&mut r))
            .collect::<Result<_>>()?;
        let numeric = (0..f_n).map(|_| get_f64(&mut r)).collect::<Result<_>>()?;
        let mut target = [0.0; HORIZON];
        for t in &mut target {
            *t = get_f64(&mut r)?;
        }
        let categorical = (0..f_d)
            .map(|_| get_u64(&mut r).map(|v| v as usize))
            .collect::<Result<_>>()?;
        out.push(Sample {
            fips,
            anchor,
            window,
            channels,
            x,
            numeric,
            categorical,
            target,
        });
    }
    Ok(out)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Day offset helper used by fixtures: `start + days`.
pub fn add_days(start: NaiveDate, days: i64) -> NaiveDate {
    start + Duration::days(days)
}
