//! Classification metrics, fold aggregation, the recovery score, and the
//! adjusted Rand index.

use std::collections::HashMap;

use crate::data::Class;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Acc,
    Auc,
    Prec,
    Rec,
    Spec,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Acc,
        Metric::Auc,
        Metric::Prec,
        Metric::Rec,
        Metric::Spec,
        Metric::F1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Acc => "acc",
            Metric::Auc => "auc",
            Metric::Prec => "prec",
            Metric::Rec => "rec",
            Metric::Spec => "spec",
            Metric::F1 => "f1",
        }
    }
}

/// One slide's prediction: continuous score, hard call, and true label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub pred: Class,
    pub label: Class,
}

/// Metrics over one evaluation set. On a single-class set only accuracy is
/// defined and the rest are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsVector {
    pub acc: f64,
    pub auc: Option<f64>,
    pub prec: Option<f64>,
    pub rec: Option<f64>,
    pub spec: Option<f64>,
    pub f1: Option<f64>,
    pub n: usize,
    pub single_class: bool,
}

impl MetricsVector {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Acc => Some(self.acc),
            Metric::Auc => self.auc,
            Metric::Prec => self.prec,
            Metric::Rec => self.rec,
            Metric::Spec => self.spec,
            Metric::F1 => self.f1,
        }
    }

    pub fn error_rate(&self) -> f64 {
        1.0 - self.acc
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(preds: &[Prediction]) -> Result<MetricsVector> {
    if preds.is_empty() {
        return Err(Error::Invalid("no predictions to evaluate".into()));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for p in preds {
        match (p.pred, p.label) {
            (Class::Positive, Class::Positive) => tp += 1,
            (Class::Positive, Class::Negative) => fp += 1,
            (Class::Negative, Class::Negative) => tn += 1,
            (Class::Negative, Class::Positive) => fneg += 1,
        }
    }
    let n = preds.len();
    let acc = ratio(tp + tn, n);
    let positives = tp + fneg;
    if positives == 0 || positives == n {
        return Ok(MetricsVector {
            acc,
            auc: None,
            prec: None,
            rec: None,
            spec: None,
            f1: None,
            n,
            single_class: true,
        });
    }
    let prec = ratio(tp, tp + fp);
    let rec = ratio(tp, tp + fneg);
    let spec = ratio(tn, tn + fp);
    let f1 = if prec + rec > 0.0 {
        2.0 * prec * rec / (prec + rec)
    } else {
        0.0
    };
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let labels: Vec<Class> = preds.iter().map(|p| p.label).collect();
    Ok(MetricsVector {
        acc,
        auc: auc(&scores, &labels),
        prec: Some(prec),
        rec: Some(rec),
        spec: Some(spec),
        f1: Some(f1),
        n,
        single_class: false,
    })
}

/// Mann-Whitney AUC with midranks for tied scores. `None` if a class is missing.
pub fn auc(scores: &[f64], labels: &[Class]) -> Option<f64> {
    let n_pos = labels.iter().filter(|c| c.is_positive()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = mid;
        }
        i = j;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, c)| c.is_positive())
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryScore {
    pub d: f64,
    pub s: f64,
}

/// `s = 1 / (1 + d)` with `d` the Euclidean distance between metric vectors
/// over [ACC, AUC, Prec, Rec, Spec, F1].
pub fn recovery(method: &MetricsVector, base: &MetricsVector) -> Result<RecoveryScore> {
    let mut d2 = 0.0;
    for m in Metric::ALL {
        match (method.get(m), base.get(m)) {
            (Some(a), Some(b)) => d2 += (a - b) * (a - b),
            (None, None) => {}
            _ => {
                return Err(Error::Invalid(format!(
                    "metric `{}` is defined for only one of the two vectors",
                    m.name()
                )))
            }
        }
    }
    let d = d2.sqrt();
    Ok(RecoveryScore {
        d,
        s: 1.0 / (1.0 + d),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricStat {
    pub mean: f64,
    /// Sample standard deviation; `None` with a single fold.
    pub sd: Option<f64>,
    pub folds: usize,
}

pub fn mean_sd(values: &[f64]) -> Option<MetricStat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() >= 2).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    Some(MetricStat {
        mean,
        sd,
        folds: values.len(),
    })
}

/// Mean and sample SD of each metric over the folds where it is defined.
pub fn aggregate_folds(per_fold: &[MetricsVector]) -> Result<Vec<(Metric, MetricStat)>> {
    if per_fold.is_empty() {
        return Err(Error::Invalid("no folds to aggregate".into()));
    }
    Ok(Metric::ALL
        .iter()
        .filter_map(|&m| {
            let vals: Vec<f64> = per_fold.iter().filter_map(|v| v.get(m)).collect();
            mean_sd(&vals).map(|s| (m, s))
        })
        .collect())
}

fn comb2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index from the pair-counting contingency table. Two
/// single-cluster labelings agree perfectly (ARI 1).
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("ARI labelings", a.len(), b.len()));
    }
    let n = a.len() as u64;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let total = comb2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Class::{Negative as N, Positive as P};

    fn p(score: f64, pred: Class, label: Class) -> Prediction {
        Prediction { score, pred, label }
    }

    #[test]
    fn perfect_predictions() {
        let m = compute_metrics(&[p(0.9, P, P), p(0.8, P, P), p(0.1, N, N)]).unwrap();
        for metric in Metric::ALL {
            assert_eq!(m.get(metric), Some(1.0), "{}", metric.name());
        }
    }

    #[test]
    fn single_class_has_accuracy_only() {
        let m = compute_metrics(&[p(0.9, P, N), p(0.1, N, N), p(0.2, N, N)]).unwrap();
        assert!(m.single_class);
        assert!((m.acc - 2.0 / 3.0).abs() < 1e-15);
        for metric in &Metric::ALL[1..] {
            assert_eq!(m.get(*metric), None);
        }
    }

    #[test]
    fn hand_counted_auc() {
        let a = auc(&[0.9, 0.8, 0.3, 0.1], &[P, N, P, N]).unwrap();
        assert_eq!(a, 0.75);
        assert_eq!(auc(&[0.5, 0.5], &[P, N]), Some(0.5));
    }

    #[test]
    fn zero_denominators_are_zero() {
        let m = compute_metrics(&[p(0.1, N, P), p(0.2, N, N)]).unwrap();
        assert_eq!(m.prec, Some(0.0));
        assert_eq!(m.rec, Some(0.0));
        assert_eq!(m.f1, Some(0.0));
        assert_eq!(m.spec, Some(1.0));
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn recovery_identities() {
        let a = compute_metrics(&[p(0.9, P, P), p(0.1, N, N), p(0.6, P, N)]).unwrap();
        assert_eq!(recovery(&a, &a).unwrap().s, 1.0);
        let mut b = a;
        b.acc += 1.0;
        let r = recovery(&a, &b).unwrap();
        assert!((r.d - 1.0).abs() < 1e-12 && (r.s - 0.5).abs() < 1e-12);
        let single = compute_metrics(&[p(0.9, P, N)]).unwrap();
        assert!(recovery(&a, &single).is_err());
    }

    #[test]
    fn fold_aggregation() {
        let base = compute_metrics(&[p(0.9, P, P), p(0.1, N, N)]).unwrap();
        let mut lo = base;
        lo.acc = 0.7;
        let mut hi = base;
        hi.acc = 0.9;
        let agg = aggregate_folds(&[lo, hi]).unwrap();
        let (_, acc) = agg[0];
        assert!((acc.mean - 0.8).abs() < 1e-15);
        assert!((acc.sd.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        let same = aggregate_folds(&[base, base]).unwrap();
        assert!(same.iter().all(|(_, s)| s.sd == Some(0.0)));
        let one = aggregate_folds(&[base]).unwrap();
        assert!(one.iter().all(|(_, s)| s.sd.is_none()));
        assert!(aggregate_folds(&[]).is_err());
    }

    #[test]
    fn ari_is_permutation_invariant() {
        let a = [0, 0, 1, 1, 2, 2];
        let b = [5, 5, 3, 3, 9, 9];
        assert_eq!(adjusted_rand_index(&a, &b).unwrap(), 1.0);
        let c = [0, 1, 0, 1, 0, 1];
        assert!(adjusted_rand_index(&a, &c).unwrap() < 0.1);
    }
}
