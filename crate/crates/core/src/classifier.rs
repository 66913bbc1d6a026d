//! Rule-based concept-fraction classifier and a logistic-regression comparator.
//!
//! The rule marks concept k as positively associated when its mean fraction
//! over positive training slides is strictly higher than over negative ones.
//! A slide scores the total fraction on marked concepts and is called
//! positive when the score reaches the threshold.

use serde::{Deserialize, Serialize};

use crate::data::{Class, ConceptFractionVector, LabelKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub cohort: String,
    pub fold: Option<usize>,
    pub label_kind: String,
}

impl Default for FitMetadata {
    fn default() -> Self {
        Self {
            cohort: String::new(),
            fold: None,
            label_kind: LabelKind::Hpv.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleClassifier {
    pub mask: Vec<bool>,
    pub tau: f64,
    pub fitted_on: FitMetadata,
}

impl RuleClassifier {
    pub fn k(&self) -> usize {
        self.mask.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.is_empty() {
            return Err(Error::Invalid("classifier has K = 0".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Invalid(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

fn check_two_classes<T>(train: &[(T, Class)]) -> Result<()> {
    let pos = train.iter().filter(|(_, c)| c.is_positive()).count();
    if pos == 0 || pos == train.len() {
        return Err(Error::SingleClass(
            "classifier fitting needs both classes in the training set".into(),
        ));
    }
    Ok(())
}

fn check_k(train: &[(ConceptFractionVector, Class)]) -> Result<usize> {
    let k = train[0].0.k();
    if let Some((v, _)) = train.iter().find(|(v, _)| v.k() != k) {
        return Err(Error::dims("fraction vector K", k, v.k()));
    }
    Ok(k)
}

pub fn fit_rule(train: &[(ConceptFractionVector, Class)]) -> Result<RuleClassifier> {
    fit_rule_with(train, FitMetadata::default())
}

pub fn fit_rule_with(
    train: &[(ConceptFractionVector, Class)],
    fitted_on: FitMetadata,
) -> Result<RuleClassifier> {
    check_two_classes(train)?;
    let k = check_k(train)?;
    let mut sum = [vec![0.0; k], vec![0.0; k]];
    let mut n = [0usize; 2];
    for (v, c) in train {
        let g = c.is_positive() as usize;
        n[g] += 1;
        for (s, f) in sum[g].iter_mut().zip(&v.fractions) {
            *s += f;
        }
    }
    let mask: Vec<bool> = (0..k)
        .map(|j| sum[1][j] / n[1] as f64 > sum[0][j] / n[0] as f64)
        .collect();
    let scores: Vec<f64> = train.iter().map(|(v, _)| dot_mask(&mask, &v.fractions)).collect();
    let labels: Vec<Class> = train.iter().map(|(_, c)| *c).collect();
    let tau = select_threshold(&scores, &labels)?;
    Ok(RuleClassifier {
        mask,
        tau,
        fitted_on,
    })
}

fn dot_mask(mask: &[bool], f: &[f64]) -> f64 {
    mask.iter().zip(f).filter(|(m, _)| **m).map(|(_, v)| v).sum()
}

pub fn score(clf: &RuleClassifier, f: &ConceptFractionVector) -> Result<f64> {
    if f.k() != clf.k() {
        return Err(Error::dims("fraction vector vs classifier K", clf.k(), f.k()));
    }
    Ok(dot_mask(&clf.mask, &f.fractions))
}

/// Positive iff `score >= tau`.
pub fn predict(clf: &RuleClassifier, f: &ConceptFractionVector) -> Result<Class> {
    Ok(Class::from_bool(score(clf, f)? >= clf.tau))
}

pub fn balanced_accuracy(scores: &[f64], labels: &[Class], tau: f64) -> f64 {
    let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= tau;
        if l.is_positive() {
            p += 1;
            tp += pred as usize;
        } else {
            n += 1;
            tn += (!pred) as usize;
        }
    }
    let sens = if p > 0 { tp as f64 / p as f64 } else { 0.0 };
    let spec = if n > 0 { tn as f64 / n as f64 } else { 0.0 };
    0.5 * (sens + spec)
}

/// Threshold maximizing training balanced accuracy. Candidates are 0, 1 and
/// the midpoints between consecutive distinct scores; ties go to the
/// smallest candidate.
pub fn select_threshold(scores: &[f64], labels: &[Class]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Invalid("threshold selection needs matching nonempty inputs".into()));
    }
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = vec![0.0, 1.0];
    candidates.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (candidates[0], f64::NEG_INFINITY);
    for &t in &candidates {
        let ba = balanced_accuracy(scores, labels, t);
        if ba > best.1 {
            best = (t, ba);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            steps: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFractionModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub config: LogisticConfig,
}

/// Full-batch gradient descent on mean cross-entropy from zero parameters.
pub fn fit_logistic(
    train: &[(ConceptFractionVector, Class)],
    config: LogisticConfig,
) -> Result<LogisticFractionModel> {
    check_two_classes(train)?;
    let k = check_k(train)?;
    let mut w = vec![0.0; k];
    let mut b = 0.0;
    let n = train.len() as f64;
    let mut gw = vec![0.0; k];
    for _ in 0..config.steps {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (v, c) in train {
            let p = crate::mil::sigmoid(linear(&w, b, &v.fractions));
            let err = p - if c.is_positive() { 1.0 } else { 0.0 };
            for (g, f) in gw.iter_mut().zip(&v.fractions) {
                *g += err * f;
            }
            gb += err;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= config.learning_rate * g / n;
        }
        b -= config.learning_rate * gb / n;
    }
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::Numerical("logistic regression diverged".into()));
    }
    Ok(LogisticFractionModel {
        weights: w,
        bias: b,
        config,
    })
}

fn linear(w: &[f64], b: f64, f: &[f64]) -> f64 {
    w.iter().zip(f).map(|(a, x)| a * x).sum::<f64>() + b
}

pub fn predict_logistic(
    model: &LogisticFractionModel,
    f: &ConceptFractionVector,
) -> Result<(f64, Class)> {
    if f.k() != model.weights.len() {
        return Err(Error::dims("fraction vector vs logistic K", model.weights.len(), f.k()));
    }
    let p = crate::mil::sigmoid(linear(&model.weights, model.bias, &f.fractions));
    Ok((p, Class::from_bool(p >= 0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FractionMode;

    fn v(f: &[f64]) -> ConceptFractionVector {
        ConceptFractionVector {
            fractions: f.to_vec(),
            weighting: FractionMode::Raw,
        }
    }

    fn one_hot(k: usize, at: usize) -> ConceptFractionVector {
        let mut f = vec![0.0; k];
        f[at] = 1.0;
        v(&f)
    }

    fn separated() -> Vec<(ConceptFractionVector, Class)> {
        let mut t = Vec::new();
        for _ in 0..4 {
            t.push((one_hot(6, 2), Class::Positive));
            t.push((one_hot(6, 5), Class::Negative));
        }
        t
    }

    #[test]
    fn perfectly_separated_one_hot() {
        let train = separated();
        let clf = fit_rule(&train).unwrap();
        assert_eq!(clf.mask, vec![false, false, true, false, false, false]);
        for tau in [1e-6, 0.3, 0.5, 0.999] {
            let c = RuleClassifier { tau, ..clf.clone() };
            for (f, y) in &train {
                assert_eq!(predict(&c, f).unwrap(), *y);
            }
        }
    }

    #[test]
    fn equal_means_give_empty_mask() {
        let train = vec![
            (v(&[0.5, 0.5]), Class::Positive),
            (v(&[0.5, 0.5]), Class::Negative),
            (v(&[0.2, 0.8]), Class::Positive),
            (v(&[0.8, 0.2]), Class::Positive),
            (v(&[0.2, 0.8]), Class::Negative),
            (v(&[0.8, 0.2]), Class::Negative),
        ];
        let clf = fit_rule(&train).unwrap();
        assert_eq!(clf.mask, vec![false, false]);
        assert_eq!(clf.tau, 0.0);
        for (f, _) in &train {
            assert_eq!(score(&clf, f).unwrap(), 0.0);
        }
    }

    #[test]
    fn score_and_predict_edges() {
        let clf = RuleClassifier {
            mask: vec![true, false, true, false],
            tau: 0.6,
            fitted_on: FitMetadata::default(),
        };
        let f = v(&[0.4, 0.1, 0.2, 0.3]);
        assert!((score(&clf, &f).unwrap() - 0.6).abs() < 1e-15);
        let exact = RuleClassifier { tau: score(&clf, &f).unwrap(), ..clf.clone() };
        assert_eq!(predict(&exact, &f).unwrap(), Class::Positive);
        let zero = RuleClassifier { tau: 0.0, ..clf.clone() };
        assert_eq!(predict(&zero, &v(&[0.0, 1.0, 0.0, 0.0])).unwrap(), Class::Positive);
        let all = RuleClassifier { mask: vec![true; 4], tau: 1.0, ..clf.clone() };
        assert_eq!(predict(&all, &v(&[0.25, 0.25, 0.25, 0.25])).unwrap(), Class::Positive);
        assert!(score(&clf, &v(&[1.0])).is_err());
    }

    #[test]
    fn single_class_input_is_rejected() {
        let train = vec![(one_hot(3, 0), Class::Positive), (one_hot(3, 1), Class::Positive)];
        assert_eq!(fit_rule(&train).unwrap_err().category(), "single-class");
        assert_eq!(
            fit_logistic(&train, LogisticConfig::default()).unwrap_err().category(),
            "single-class"
        );
    }

    #[test]
    fn logistic_separates_one_hot_classes() {
        let train = separated();
        let m = fit_logistic(&train, LogisticConfig::default()).unwrap();
        for (f, y) in &train {
            assert_eq!(predict_logistic(&m, f).unwrap().1, *y);
        }
        let zero = LogisticFractionModel {
            weights: vec![0.0; 6],
            bias: 0.0,
            config: LogisticConfig::default(),
        };
        assert_eq!(predict_logistic(&zero, &one_hot(6, 1)).unwrap().0, 0.5);
    }
}
