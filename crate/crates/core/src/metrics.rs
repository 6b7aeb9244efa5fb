//! Regression and classification metrics over weekly score forecasts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::HORIZON;

/// Highest drought category (D4).
pub const MAX_CATEGORY: usize = 5;
pub const CATEGORY_COUNT: usize = MAX_CATEGORY + 1;

fn check_pair<T>(pred: &[T], target: &[T]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Data("metric over an empty set".into()));
    }
    Ok(())
}

fn errors<'a>(
    pred: &'a [[f64; HORIZON]],
    target: &'a [[f64; HORIZON]],
    week: Option<usize>,
) -> Result<impl Iterator<Item = f64> + 'a> {
    check_pair(pred, target)?;
    let weeks = match week {
        None => 0..HORIZON,
        Some(w @ 1..=HORIZON) => w - 1..w,
        Some(w) => return Err(Error::Index(format!("week {w} outside 1..={HORIZON}"))),
    };
    Ok(pred
        .iter()
        .zip(target)
        .flat_map(move |(p, t)| weeks.clone().map(move |w| p[w] - t[w])))
}

/// Mean absolute error of one week (1-based) or pooled over all weeks.
pub fn mae(pred: &[[f64; HORIZON]], target: &[[f64; HORIZON]], week: Option<usize>) -> Result<f64> {
    let (sum, n) =
        errors(pred, target, week)?.fold((0.0, 0usize), |(s, n), e| (s + e.abs(), n + 1));
    Ok(sum / n as f64)
}

/// Root-mean-square error of one week (1-based) or pooled over all weeks.
pub fn rmse(
    pred: &[[f64; HORIZON]],
    target: &[[f64; HORIZON]],
    week: Option<usize>,
) -> Result<f64> {
    let (sum, n) = errors(pred, target, week)?.fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    Ok((sum / n as f64).sqrt())
}

/// Mapping from a continuous score to a drought category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryRule {
    #[default]
    RoundHalfUp,
    Floor,
    Ceil,
}

impl CategoryRule {
    pub fn apply(self, score: f64) -> Result<usize> {
        if score.is_nan() {
            return Err(Error::Numeric("cannot categorise a NaN score".into()));
        }
        let v = match self {
            CategoryRule::RoundHalfUp => (score + 0.5).floor(),
            CategoryRule::Floor => score.floor(),
            CategoryRule::Ceil => score.ceil(),
        };
        Ok(v.clamp(0.0, MAX_CATEGORY as f64) as usize)
    }
}

/// Round-half-up to the nearest category, clamped to `0..=5`.
pub fn score_to_category(score: f64) -> Result<usize> {
    CategoryRule::RoundHalfUp.apply(score)
}

/// Unweighted mean of per-class F1 in percent. Classes absent from both
/// predictions and targets are left out of the mean.
pub fn macro_f1(pred: &[usize], target: &[usize]) -> Result<f64> {
    check_pair(pred, target)?;
    let classes = pred.iter().chain(target).copied().max().unwrap_or(0) + 1;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(target) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for c in 0..classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            continue;
        }
        sum += 2.0 * tp[c] as f64 / denom as f64;
        count += 1;
    }
    Ok(100.0 * sum / count as f64)
}

/// Pseudo-probabilities for a regression output: `p_k ∝ max(0, 1 − |ŷ − k|)`
/// with `ŷ` clamped to `[0, 5]`.
pub fn triangular_scores(score: f64) -> [f64; CATEGORY_COUNT] {
    let y = score.clamp(0.0, MAX_CATEGORY as f64);
    let mut p = [0.0; CATEGORY_COUNT];
    for (k, v) in p.iter_mut().enumerate() {
        *v = (1.0 - (y - k as f64).abs()).max(0.0);
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Average ranks (1-based), ties sharing their midrank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Binary AUC in `[0, 1]` via the Mann–Whitney rank statistic.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative samples".into(),
        ));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest ROC-AUC in percent, averaged over the classes present in
/// `target` with weights proportional to their support.
pub fn roc_auc_weighted<S: AsRef<[f64]>>(scores: &[S], target: &[usize]) -> Result<f64> {
    if scores.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} score rows vs {} targets",
            scores.len(),
            target.len()
        )));
    }
    if target.is_empty() {
        return Err(Error::Data("ROC-AUC over an empty set".into()));
    }
    let width = scores[0].as_ref().len();
    let mut support = vec![0usize; width];
    for &t in target {
        if t >= width {
            return Err(Error::Index(format!("class {t} has no score column")));
        }
        support[t] += 1;
    }
    if support.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::UndefinedMetric(
            "ROC-AUC needs at least two target classes".into(),
        ));
    }
    let mut total = 0.0;
    for (k, &n_k) in support.iter().enumerate() {
        if n_k == 0 {
            continue;
        }
        let column: Vec<f64> = scores.iter().map(|r| r.as_ref()[k]).collect();
        let positive: Vec<bool> = target.iter().map(|&t| t == k).collect();
        total += n_k as f64 * auc_binary(&column, &positive)?;
    }
    Ok(100.0 * total / target.len() as f64)
}
