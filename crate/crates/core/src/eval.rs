//! Evaluation of predictors, cross-validation summaries, and the
//! improvement comparisons used by the experiment reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{kfold_split, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, CategoryRule};
use crate::model::HybridModel;
use crate::stats::{relative_improvement, Better, Summary};
use crate::HORIZON;

/// Anything that maps samples to six weekly scores.
pub trait Predictor {
    fn predict(&self, samples: &[Sample]) -> Result<Vec<[f64; HORIZON]>>;
}

pub const EVAL_BATCH: usize = 256;

impl Predictor for HybridModel {
    /// Batches run in parallel; results keep sample order.
    fn predict(&self, samples: &[Sample]) -> Result<Vec<[f64; HORIZON]>> {
        let parts = samples
            .par_chunks(EVAL_BATCH)
            .map(|chunk| HybridModel::predict(self, chunk, EVAL_BATCH))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    }
}

/// Predicts the same vector for every sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantPredictor(pub [f64; HORIZON]);

impl Predictor for ConstantPredictor {
    fn predict(&self, samples: &[Sample]) -> Result<Vec<[f64; HORIZON]>> {
        Ok(vec![self.0; samples.len()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeekMetrics {
    pub week: usize,
    pub mae: f64,
    pub rmse: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Exactly six entries, weeks 1..=6.
    pub weeks: Vec<WeekMetrics>,
    pub mae: f64,
    pub rmse: f64,
    pub f1: f64,
    /// Undefined when the targets hold a single category.
    pub roc_auc: Option<f64>,
    pub n: usize,
}

impl MetricsReport {
    pub fn week_mean_mae(&self) -> f64 {
        self.weeks.iter().map(|w| w.mae).sum::<f64>() / self.weeks.len() as f64
    }

    pub fn week_mean_f1(&self) -> f64 {
        self.weeks.iter().map(|w| w.f1).sum::<f64>() / self.weeks.len() as f64
    }
}

pub fn evaluate_predictions(
    pred: &[[f64; HORIZON]],
    target: &[[f64; HORIZON]],
    rule: CategoryRule,
) -> Result<MetricsReport> {
    let cat = |rows: &[[f64; HORIZON]], w: usize| -> Result<Vec<usize>> {
        rows.iter().map(|r| rule.apply(r[w])).collect()
    };
    let mut weeks = Vec::with_capacity(HORIZON);
    let mut all_pred = Vec::with_capacity(pred.len() * HORIZON);
    let mut all_target = Vec::with_capacity(pred.len() * HORIZON);
    let mut scores = Vec::with_capacity(pred.len() * HORIZON);
    for w in 0..HORIZON {
        let (pc, tc) = (cat(pred, w)?, cat(target, w)?);
        weeks.push(WeekMetrics {
            week: w + 1,
            mae: metrics::mae(pred, target, Some(w + 1))?,
            rmse: metrics::rmse(pred, target, Some(w + 1))?,
            f1: metrics::macro_f1(&pc, &tc)?,
        });
        all_pred.extend(pc);
        all_target.extend(tc);
        scores.extend(pred.iter().map(|r| metrics::triangular_scores(r[w])));
    }
    let roc_auc = match metrics::roc_auc_weighted(&scores, &all_target) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        weeks,
        mae: metrics::mae(pred, target, None)?,
        rmse: metrics::rmse(pred, target, None)?,
        f1: metrics::macro_f1(&all_pred, &all_target)?,
        roc_auc,
        n: pred.len(),
    })
}

pub fn evaluate(
    predictor: &dyn Predictor,
    samples: &[Sample],
    rule: CategoryRule,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let pred = predictor.predict(samples)?;
    let target: Vec<[f64; HORIZON]> = samples.iter().map(|s| s.target).collect();
    evaluate_predictions(&pred, &target, rule)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldResults {
    pub mae: Vec<f64>,
    pub rmse: Vec<f64>,
    pub f1: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldSummary {
    pub mae: Summary,
    pub rmse: Summary,
    pub f1: Summary,
}

impl FoldResults {
    pub fn push(&mut self, report: &MetricsReport) {
        self.mae.push(report.mae);
        self.rmse.push(report.rmse);
        self.f1.push(report.f1);
    }

    pub fn len(&self) -> usize {
        self.mae.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mae.is_empty()
    }

    pub fn summary(&self) -> Result<FoldSummary> {
        Ok(FoldSummary {
            mae: Summary::of(&self.mae)?,
            rmse: Summary::of(&self.rmse)?,
            f1: Summary::of(&self.f1)?,
        })
    }
}

/// Runs `train_eval(fold, train, validation)` on each of `k` seeded folds.
pub fn cross_validate<F>(
    samples: &[Sample],
    k: usize,
    seed: u64,
    mut train_eval: F,
) -> Result<(FoldResults, Vec<MetricsReport>)>
where
    F: FnMut(usize, &[Sample], &[Sample]) -> Result<MetricsReport>,
{
    let folds = kfold_split(samples.len(), k, seed)?;
    let mut results = FoldResults::default();
    let mut reports = Vec::with_capacity(k);
    for (i, fold) in folds.iter().enumerate() {
        let train: Vec<Sample> = fold.train.iter().map(|&j| samples[j].clone()).collect();
        let val: Vec<Sample> = fold
            .validation
            .iter()
            .map(|&j| samples[j].clone())
            .collect();
        let report = train_eval(i, &train, &val)?;
        log::info!(
            "fold {}: MAE {:.4}, RMSE {:.4}, F1 {:.2}",
            i + 1,
            report.mae,
            report.rmse,
            report.f1
        );
        results.push(&report);
        reports.push(report);
    }
    Ok((results, reports))
}

/// A computed relative improvement, optionally set against a previously
/// reported figure.
#[derive(Clone, Debug, PartialEq)]
pub struct Improvement {
    pub metric: String,
    pub baseline: f64,
    pub candidate: f64,
    pub percent: f64,
    pub reported: Option<f64>,
}

impl Improvement {
    pub fn new(
        metric: &str,
        baseline: f64,
        candidate: f64,
        better: Better,
        reported: Option<f64>,
    ) -> Result<Self> {
        Ok(Self {
            metric: metric.into(),
            baseline,
            candidate,
            percent: relative_improvement(baseline, candidate, better)?,
            reported,
        })
    }

    /// Points between the computed and reported improvement, when the gap
    /// exceeds rounding of the reported figure to whole percent.
    pub fn discrepancy(&self) -> Option<f64> {
        let r = self.reported?;
        let gap = self.percent - r;
        (gap.abs() > 0.5).then_some(gap)
    }

    pub fn describe(&self) -> String {
        let mut s = format!(
            "{}: {} -> {} = {:+.2}%",
            self.metric, self.baseline, self.candidate, self.percent
        );
        if let Some(r) = self.reported {
            match self.discrepancy() {
                Some(gap) => s.push_str(&format!(
                    " (reported {r}%; DISCREPANCY of {:.2} points beyond rounding)",
                    gap.abs()
                )),
                None => s.push_str(&format!(" (reported {r}%; consistent after rounding)")),
            }
        }
        s
    }
}

/// MAE, RMSE, F1 and ROC-AUC improvements of `candidate` over `baseline`.
pub fn headline_improvements(
    baseline: &MetricsReport,
    candidate: &MetricsReport,
) -> Result<Vec<Improvement>> {
    let mut rows = vec![
        Improvement::new("MAE", baseline.mae, candidate.mae, Better::Lower, None)?,
        Improvement::new("RMSE", baseline.rmse, candidate.rmse, Better::Lower, None)?,
        Improvement::new("F1", baseline.f1, candidate.f1, Better::Higher, None)?,
    ];
    if let (Some(b), Some(c)) = (baseline.roc_auc, candidate.roc_auc) {
        rows.push(Improvement::new("ROC-AUC", b, c, Better::Higher, None)?);
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainScope {
    /// Trained on the evaluated state only.
    Specific,
    /// Trained on all counties.
    Agnostic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocationResult {
    pub state: String,
    pub scope: TrainScope,
    pub report: MetricsReport,
}

/// Average improvement of agnostic over specific training under one
/// definition.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationImprovement {
    pub definition: &'static str,
    /// `None` where the baseline value is zero.
    pub per_state: Vec<(String, Option<f64>)>,
    pub average: Option<f64>,
}

type Extract = fn(&MetricsReport) -> f64;

const LOCATION_DEFINITIONS: [(&str, Extract, Better); 5] = [
    ("test-set MAE", |r| r.mae, Better::Lower),
    ("test-set RMSE", |r| r.rmse, Better::Lower),
    ("test-set F1", |r| r.f1, Better::Higher),
    (
        "week-averaged MAE",
        MetricsReport::week_mean_mae,
        Better::Lower,
    ),
    (
        "week-averaged F1",
        MetricsReport::week_mean_f1,
        Better::Higher,
    ),
];

/// Candidate definitions of the average location-agnostic improvement.
pub fn location_experiment_report(
    results: &[LocationResult],
    states: &[String],
) -> Result<Vec<LocationImprovement>> {
    if states.is_empty() {
        return Err(Error::Data("location experiment has no states".into()));
    }
    let find = |state: &str, scope: TrainScope| {
        results
            .iter()
            .find(|r| r.state == state && r.scope == scope)
            .map(|r| &r.report)
            .ok_or_else(|| Error::Data(format!("no {scope:?} result for state {state}")))
    };
    let mut out = Vec::new();
    for (definition, extract, better) in LOCATION_DEFINITIONS {
        let mut per_state = Vec::new();
        for s in states {
            let base = extract(find(s, TrainScope::Specific)?);
            let cand = extract(find(s, TrainScope::Agnostic)?);
            per_state.push((s.clone(), relative_improvement(base, cand, better).ok()));
        }
        let average = per_state
            .iter()
            .map(|(_, v)| *v)
            .sum::<Option<f64>>()
            .map(|t| t / per_state.len() as f64);
        out.push(LocationImprovement {
            definition,
            per_state,
            average,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn sample(target: [f64; HORIZON]) -> Sample {
        Sample {
            fips: "19001".into(),
            anchor: NaiveDate::from_ymd_opt(2012, 5, 1).unwrap(),
            window: 1,
            channels: 2,
            x: vec![0.0, 0.0],
            numeric: vec![],
            categorical: vec![],
            target,
        }
    }

    #[test]
    fn constant_stub_is_perfect_on_constant_targets() {
        let samples = vec![sample([2.0; 6]); 5];
        let r = evaluate(
            &ConstantPredictor([2.0; 6]),
            &samples,
            CategoryRule::RoundHalfUp,
        )
        .unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.f1, 100.0);
        assert_eq!(r.roc_auc, None);
        assert_eq!(r.weeks.len(), 6);
        assert_eq!(r.n, 5);
    }

    #[test]
    fn aggregate_mae_is_mean_of_weeks() {
        let samples: Vec<Sample> = (0..7).map(|i| sample([i as f64 * 0.5; 6])).collect();
        let r = evaluate(
            &ConstantPredictor([0.3, 1.0, 2.0, 2.5, 3.1, 4.0]),
            &samples,
            CategoryRule::RoundHalfUp,
        )
        .unwrap();
        assert!((r.mae - r.week_mean_mae()).abs() < 1e-12);
        assert!(r.mae <= r.rmse);
        assert!(r.roc_auc.is_some());
        assert!(evaluate(&ConstantPredictor([0.0; 6]), &[], CategoryRule::RoundHalfUp).is_err());
    }

    fn report(mae: f64, f1: f64) -> MetricsReport {
        MetricsReport {
            weeks: (1..=6)
                .map(|week| WeekMetrics {
                    week,
                    mae,
                    rmse: mae,
                    f1,
                })
                .collect(),
            mae,
            rmse: mae,
            f1,
            roc_auc: None,
            n: 1,
        }
    }

    #[test]
    fn identical_location_results_give_zero() {
        let states = vec!["19".to_string(), "30".to_string()];
        let results: Vec<LocationResult> = states
            .iter()
            .flat_map(|s| {
                [TrainScope::Specific, TrainScope::Agnostic].map(|scope| LocationResult {
                    state: s.clone(),
                    scope,
                    report: report(0.3, 60.0),
                })
            })
            .collect();
        let out = location_experiment_report(&results, &states).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|d| d.average == Some(0.0)));
        assert!(matches!(
            location_experiment_report(&results[..3], &states),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn improvement_flags() {
        let i = Improvement::new("MAE", 0.306, 0.218, Better::Lower, Some(30.0)).unwrap();
        assert!(i.discrepancy().is_some());
        assert!(i.describe().contains("DISCREPANCY"));
        let j = Improvement::new("F1", 61.9, 67.3, Better::Higher, Some(9.0)).unwrap();
        assert!(j.discrepancy().is_none());
    }
}
