//! Small generated datasets in the ingest CSV layout, for smoke runs and
//! tests.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{add_days, PREVIOUS_YEAR_SHIFT};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::HORIZON;

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    /// Two-digit state FIPS prefixes.
    pub states: Vec<String>,
    pub counties_per_state: usize,
    /// Look-back window the splits must support.
    pub window: usize,
    /// Anchor weeks available in each split.
    pub weeks_per_split: usize,
    pub channels: usize,
    pub start: NaiveDate,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            states: vec!["19".into(), "30".into(), "40".into()],
            counties_per_state: 3,
            window: 14,
            weeks_per_split: 6,
            channels: 3,
            start: NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date"),
        }
    }
}

impl SyntheticSpec {
    pub fn split_days(&self) -> usize {
        self.window + PREVIOUS_YEAR_SHIFT + 7 * (self.weeks_per_split + HORIZON - 2) + 1
    }

    pub fn fips(&self) -> Vec<String> {
        self.states
            .iter()
            .flat_map(|s| (0..self.counties_per_state).map(move |c| format!("{s}{:03}", 2 * c + 1)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticPaths {
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
    pub statics: PathBuf,
}

pub const SYNTHETIC_CATEGORICAL: [&str; 2] = ["SQ1", "SQ2"];

struct County {
    phase: f64,
    level: f64,
    sq1: usize,
    sq2: usize,
}

/// Writes `train.csv`, `validation.csv`, `test.csv` and `statics.csv` into
/// `dir`. The three splits cover consecutive date ranges. Scores are a
/// smooth function of recent channel values and the county's categories.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<SyntheticPaths> {
    if spec.channels == 0 || spec.counties_per_state == 0 || spec.states.is_empty() {
        return Err(Error::Config(
            "synthetic dataset needs channels, states and counties".into(),
        ));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut rng = RngState::new(seed);
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    let fips = spec.fips();
    let counties: Vec<County> = (0..fips.len())
        .map(|i| County {
            phase: rng.random::<f64>() * TAU,
            level: rng.random::<f64>() * 2.0 - 1.0,
            sq1: 1 + i % 3,
            sq2: 1 + (i / 2) % 2,
        })
        .collect();

    let mut statics = String::from("fips,lat,elevation,SQ1,SQ2\n");
    for (f, c) in fips.iter().zip(&counties) {
        let lat = 35.0 + 10.0 * rng.random::<f64>();
        let elevation = 200.0 + 800.0 * rng.random::<f64>() + 100.0 * c.level;
        writeln!(statics, "{f},{lat:.4},{elevation:.2},{},{}", c.sq1, c.sq2).expect("string write");
    }
    let statics_path = dir.join("statics.csv");
    fs::write(&statics_path, statics)?;

    let days = spec.split_days();
    let score_phase = (spec.window + PREVIOUS_YEAR_SHIFT) % 7;
    let mut header = String::from("fips,date");
    for m in 0..spec.channels {
        write!(header, ",ch{m}").expect("string write");
    }
    header.push_str(",score\n");

    let mut paths = Vec::new();
    for (split, name) in ["train", "validation", "test"].iter().enumerate() {
        let offset = (split * days) as i64;
        let mut text = header.clone();
        for (f, c) in fips.iter().zip(&counties) {
            let mut history: Vec<f64> = Vec::with_capacity(days);
            for d in 0..days {
                let t = offset + d as i64;
                let date = add_days(spec.start, t);
                let season = (TAU * t as f64 / 365.0 + c.phase).sin();
                let mut row = format!("{f},{date}");
                let mut first = 0.0;
                for m in 0..spec.channels {
                    let v = season * (1.0 + 0.2 * m as f64) + c.level + noise.sample(&mut rng);
                    if m == 0 {
                        first = v;
                    }
                    write!(row, ",{v:.4}").expect("string write");
                }
                history.push(first);
                let score = if d % 7 == score_phase {
                    let recent = &history[d.saturating_sub(13)..=d];
                    let mean = recent.iter().sum::<f64>() / recent.len() as f64;
                    let s = 2.5 - 1.2 * mean + 0.4 * (c.sq1 as f64 - 2.0);
                    format!("{:.4}", s.clamp(0.0, 5.0))
                } else {
                    String::new()
                };
                writeln!(text, "{row},{score}").expect("string write");
            }
        }
        let path = dir.join(format!("{name}.csv"));
        fs::write(&path, text)?;
        paths.push(path);
    }
    let mut it = paths.into_iter();
    Ok(SyntheticPaths {
        train: it.next().expect("train path"),
        validation: it.next().expect("validation path"),
        test: it.next().expect("test path"),
        statics: statics_path,
    })
}
