//! Evaluation protocols: stratified k-fold runs of every method, frozen
//! transfer to external cohorts, and label reuse on frozen fraction vectors.
//!
//! Within a fold nothing fitted ever sees a held-out slide: the backbone,
//! the concepts and the classifier come from the training split only.
//! Unlabeled slides join every fold's concept discovery since discovery
//! needs no labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, FitMetadata, LogisticConfig, RuleClassifier};
use crate::concepts::{self, ConceptModel, ConceptSpace, SlidePoints};
use crate::data::{Class, Cohort, ConceptFractionVector, FractionMode, LabelKind, SlideBag};
use crate::error::{Error, Result};
use crate::fractions;
use crate::kmeans::KMeansConfig;
use crate::metrics::{self, Metric, MetricStat, MetricsVector, Prediction, RecoveryScore};
use crate::mil::{self, MilParams, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AwH,
    RawH,
    Encoder,
    Heatmap,
    MilBase,
    Logistic,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::AwH,
        Method::RawH,
        Method::Encoder,
        Method::Heatmap,
        Method::MilBase,
        Method::Logistic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::AwH => "aw_h",
            Method::RawH => "raw_h",
            Method::Encoder => "encoder",
            Method::Heatmap => "heatmap",
            Method::MilBase => "mil_base",
            Method::Logistic => "logistic",
        }
    }

    /// Concept space a method clusters in, if it clusters at all.
    pub fn space(self) -> Option<ConceptSpace> {
        match self {
            Method::AwH | Method::Logistic => Some(ConceptSpace::AwH),
            Method::RawH => Some(ConceptSpace::RawH),
            Method::Encoder => Some(ConceptSpace::Encoder),
            Method::Heatmap | Method::MilBase => None,
        }
    }

    pub fn needs_mil(self) -> bool {
        self != Method::Encoder
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method `{s}`")))
    }
}

/// Fraction weighting paired with each concept space.
pub fn fraction_mode_for(space: ConceptSpace) -> FractionMode {
    match space {
        ConceptSpace::AwH => FractionMode::AttentionWeighted,
        ConceptSpace::RawH | ConceptSpace::Encoder => FractionMode::Raw,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    pub folds: usize,
    pub fold_seed: u64,
    pub train: TrainConfig,
    pub kmeans: KMeansConfig,
    pub logistic: LogisticConfig,
    /// Candidate attention thresholds for the heatmap baseline.
    pub heatmap_thresholds: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 10,
            folds: 10,
            fold_seed: 0,
            train: TrainConfig::default(),
            kmeans: KMeansConfig::default(),
            logistic: LogisticConfig::default(),
            heatmap_thresholds: vec![0.5, 0.75, 1.0, 1.25, 1.5, 2.0],
        }
    }
}

impl PipelineConfig {
    /// Configuration for the synthetic acceptance cohort: wide hidden layer,
    /// narrow attention layer, short training run.
    pub fn acceptance(seed: u64) -> Self {
        Self {
            fold_seed: seed,
            train: TrainConfig {
                d_h: 512,
                d_a: 16,
                learning_rate: 3e-3,
                epochs: 10,
                init_scale: 0.05,
                seed,
            },
            kmeans: KMeansConfig {
                seed,
                ..KMeansConfig::default()
            },
            ..Self::default()
        }
    }

    /// Small and fast, for tests and smoke runs on small cohorts.
    pub fn quick(seed: u64) -> Self {
        let mut c = Self::acceptance(seed);
        c.k = 4;
        c.folds = 4;
        c.train.d_h = 32;
        c.train.d_a = 8;
        c.train.learning_rate = 1e-2;
        c.train.epochs = 5;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: BTreeMap<String, usize>,
    pub n_folds: usize,
    pub seed: u64,
    pub stratified: bool,
}

impl FoldPlan {
    pub fn fold_of(&self, slide_id: &str) -> Option<usize> {
        self.folds.get(slide_id).copied()
    }

    /// Labeled held-out slides of fold `f`, in cohort order.
    pub fn test_indices(&self, cohort: &Cohort, f: usize) -> Vec<usize> {
        (0..cohort.len())
            .filter(|&i| self.fold_of(&cohort.slides[i].slide_id) == Some(f))
            .collect()
    }

    /// Labeled training slides of fold `f`, in cohort order.
    pub fn train_indices(&self, cohort: &Cohort, f: usize) -> Vec<usize> {
        (0..cohort.len())
            .filter(|&i| matches!(self.fold_of(&cohort.slides[i].slide_id), Some(g) if g != f))
            .collect()
    }
}

/// Stratified assignment: each class is shuffled and dealt round-robin,
/// continuing the deal across classes so fold sizes stay balanced.
pub fn stratified_folds(cohort: &Cohort, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::Invalid("need at least two folds".into()));
    }
    let labeled = cohort.labeled_indices();
    if labeled.len() < n_folds {
        return Err(Error::Invalid(format!(
            "{} labeled slides cannot fill {n_folds} folds",
            labeled.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = BTreeMap::new();
    let mut dealt = 0usize;
    for class in [Class::Negative, Class::Positive] {
        let mut idx: Vec<usize> = labeled
            .iter()
            .copied()
            .filter(|&i| cohort.slides[i].label == Some(class))
            .collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds.insert(cohort.slides[i].slide_id.clone(), dealt % n_folds);
            dealt += 1;
        }
    }
    Ok(FoldPlan {
        folds,
        n_folds,
        seed,
        stratified: true,
    })
}

/// Backbone, concepts and classifier fitted together on one training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineBundle {
    pub mil: Option<MilParams>,
    pub concepts: ConceptModel,
    pub classifier: RuleClassifier,
    pub mode: FractionMode,
}

impl PipelineBundle {
    pub fn new(
        mil: Option<MilParams>,
        concepts: ConceptModel,
        classifier: RuleClassifier,
    ) -> Result<Self> {
        if concepts.space.needs_mil() && mil.is_none() {
            return Err(Error::Invalid(format!(
                "concept space `{}` needs a MIL model in the bundle",
                concepts.space
            )));
        }
        if classifier.k() != concepts.k() {
            return Err(Error::dims("classifier K vs concept K", concepts.k(), classifier.k()));
        }
        if let Some(m) = &mil {
            if concepts.space.needs_mil() && m.dims().d_h != concepts.dim() {
                return Err(Error::dims("concept width vs MIL d_h", m.dims().d_h, concepts.dim()));
            }
        }
        Ok(Self {
            mode: fraction_mode_for(concepts.space),
            mil,
            concepts,
            classifier,
        })
    }

    pub fn d_in(&self) -> usize {
        match (&self.mil, self.concepts.space) {
            (_, ConceptSpace::Encoder) => self.concepts.dim(),
            (Some(m), _) => m.dims().d_in,
            (None, _) => self.concepts.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub score: f64,
    pub pred: Class,
    pub label: Option<Class>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricsVector,
    pub predictions: Vec<SlidePrediction>,
}

fn metrics_of(predictions: Vec<SlidePrediction>) -> Result<Evaluation> {
    let labeled: Vec<Prediction> = predictions
        .iter()
        .filter_map(|p| {
            p.label.map(|label| Prediction {
                score: p.score,
                pred: p.pred,
                label,
            })
        })
        .collect();
    if labeled.is_empty() {
        return Err(Error::MissingLabels("no labeled slides to evaluate".into()));
    }
    Ok(Evaluation {
        metrics: metrics::compute_metrics(&labeled)?,
        predictions,
    })
}

/// Fraction vector of one slide from its concept-space points.
pub fn fraction_vector(
    concepts: &ConceptModel,
    sp: &SlidePoints,
    slide_id: &str,
    mode: FractionMode,
) -> Result<ConceptFractionVector> {
    let asg = concepts::ConceptAssignment {
        slide_id: slide_id.to_string(),
        k: concepts.k(),
        assignments: concepts::assign_points(concepts, sp.points.view())?,
    };
    fractions::fractions(&asg, sp.alpha.as_ref().and_then(|a| a.as_slice()), mode)
}

/// Frozen forward, frozen assignment, fractions, frozen rule.
pub fn bundle_fractions(bundle: &PipelineBundle, bag: &SlideBag) -> Result<ConceptFractionVector> {
    let sp = concepts::slide_points(bag, bundle.mil.as_ref(), bundle.concepts.space)?;
    fraction_vector(&bundle.concepts, &sp, &bag.slide_id, bundle.mode)
}

pub fn predict_slide(bundle: &PipelineBundle, bag: &SlideBag) -> Result<SlidePrediction> {
    let f = bundle_fractions(bundle, bag)?;
    Ok(SlidePrediction {
        slide_id: bag.slide_id.clone(),
        score: classifier::score(&bundle.classifier, &f)?,
        pred: classifier::predict(&bundle.classifier, &f)?,
        label: bag.label,
    })
}

pub fn evaluate_bundle(
    bundle: &PipelineBundle,
    cohort: &Cohort,
    indices: &[usize],
) -> Result<Evaluation> {
    let predictions = indices
        .iter()
        .map(|&i| predict_slide(bundle, &cohort.slides[i]))
        .collect::<Result<Vec<_>>>()?;
    metrics_of(predictions)
}

/// Apply a frozen bundle to an external cohort. Nothing is refitted.
pub fn transfer(bundle: &PipelineBundle, external: &Cohort) -> Result<Evaluation> {
    if external.d_in != bundle.d_in() {
        return Err(Error::dims("external cohort D_in", bundle.d_in(), external.d_in));
    }
    let all: Vec<usize> = (0..external.len()).collect();
    evaluate_bundle(bundle, external, &all)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub fold: usize,
    pub metrics: MetricsVector,
    pub predictions: Vec<SlidePrediction>,
    /// Fitted pipeline for rule-based concept methods.
    pub bundle: Option<PipelineBundle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: String,
    pub folds: Vec<FoldOutcome>,
    pub summary: Vec<(Metric, MetricStat)>,
}

impl MethodReport {
    fn new(method: String, folds: Vec<FoldOutcome>) -> Result<Self> {
        let per_fold: Vec<MetricsVector> = folds.iter().map(|f| f.metrics).collect();
        let summary = metrics::aggregate_folds(&per_fold)?;
        Ok(Self {
            method,
            folds,
            summary,
        })
    }

    pub fn per_fold(&self) -> Vec<MetricsVector> {
        self.folds.iter().map(|f| f.metrics).collect()
    }

    pub fn stat(&self, m: Metric) -> Option<MetricStat> {
        self.summary.iter().find(|(k, _)| *k == m).map(|(_, s)| *s)
    }
}

fn fold_seed(base: u64, fold: usize) -> u64 {
    base.wrapping_add(fold as u64)
}

fn check_labels(cohort: &Cohort) -> Result<()> {
    if cohort.label_kind == LabelKind::None || cohort.labeled_indices().is_empty() {
        return Err(Error::MissingLabels(format!(
            "cohort `{}` has no labels for evaluation",
            cohort.cohort_id
        )));
    }
    Ok(())
}

fn check_train_classes(cohort: &Cohort, train: &[usize], fold: usize) -> Result<()> {
    let pos = train
        .iter()
        .filter(|&&i| cohort.slides[i].label == Some(Class::Positive))
        .count();
    if pos == 0 || pos == train.len() {
        return Err(Error::SingleClass(format!(
            "fold {fold} has a single class in its training split"
        )));
    }
    Ok(())
}

pub fn run_folds(cohort: &Cohort, method: Method, config: &PipelineConfig) -> Result<MethodReport> {
    let mut reports = run_methods(cohort, &[method], config)?;
    Ok(reports.remove(0))
}

/// Run several methods over the same stratified folds. Methods that need a
/// backbone share one trained MIL per fold.
pub fn run_methods(
    cohort: &Cohort,
    methods: &[Method],
    config: &PipelineConfig,
) -> Result<Vec<MethodReport>> {
    check_labels(cohort)?;
    let plan = stratified_folds(cohort, config.folds, config.fold_seed)?;
    run_methods_with_plan(cohort, &plan, methods, config)
}

pub fn run_methods_with_plan(
    cohort: &Cohort,
    plan: &FoldPlan,
    methods: &[Method],
    config: &PipelineConfig,
) -> Result<Vec<MethodReport>> {
    check_labels(cohort)?;
    if methods.is_empty() {
        return Err(Error::Invalid("no methods requested".into()));
    }
    let unlabeled: Vec<usize> = (0..cohort.len())
        .filter(|&i| cohort.slides[i].label.is_none())
        .collect();
    let mut outcomes: Vec<Vec<FoldOutcome>> = vec![Vec::new(); methods.len()];
    for f in 0..plan.n_folds {
        let train = plan.train_indices(cohort, f);
        let test = plan.test_indices(cohort, f);
        if test.is_empty() {
            continue;
        }
        check_train_classes(cohort, &train, f)?;
        let fold = run_fold(cohort, f, &train, &test, &unlabeled, methods, config)?;
        for (slot, o) in outcomes.iter_mut().zip(fold) {
            slot.push(o);
        }
    }
    methods
        .iter()
        .zip(outcomes)
        .map(|(m, o)| MethodReport::new(m.as_str().to_string(), o))
        .collect()
}

struct FoldState<'a> {
    cohort: &'a Cohort,
    fold: usize,
    train: &'a [usize],
    discovery: Vec<usize>,
    config: &'a PipelineConfig,
    mil: Option<MilParams>,
    h_points: HashMap<usize, SlidePoints>,
    x_points: HashMap<usize, SlidePoints>,
    concepts: HashMap<ConceptSpace, ConceptModel>,
}

impl FoldState<'_> {
    fn points(&self, space: ConceptSpace, i: usize) -> &SlidePoints {
        match space {
            ConceptSpace::Encoder => &self.x_points[&i],
            _ => &self.h_points[&i],
        }
    }

    fn concepts(&mut self, space: ConceptSpace) -> Result<ConceptModel> {
        if let Some(m) = self.concepts.get(&space) {
            return Ok(m.clone());
        }
        let per_slide: Vec<SlidePoints> = self
            .discovery
            .iter()
            .map(|&i| self.points(space, i).clone())
            .collect();
        let mut km = self.config.kmeans.clone();
        km.seed = fold_seed(km.seed, self.fold);
        let model = concepts::discover_from_points(&per_slide, space, self.config.k, &km)?;
        self.concepts.insert(space, model.clone());
        Ok(model)
    }

    fn training_fractions(
        &self,
        model: &ConceptModel,
        mode: FractionMode,
    ) -> Result<Vec<(ConceptFractionVector, Class)>> {
        self.train
            .iter()
            .map(|&i| {
                let s = &self.cohort.slides[i];
                let f = fraction_vector(model, self.points(model.space, i), &s.slide_id, mode)?;
                Ok((f, s.label.expect("training slides are labeled")))
            })
            .collect()
    }

    fn metadata(&self) -> FitMetadata {
        FitMetadata {
            cohort: self.cohort.cohort_id.clone(),
            fold: Some(self.fold),
            label_kind: self.cohort.label_kind.as_str().to_string(),
        }
    }
}

fn run_fold(
    cohort: &Cohort,
    fold: usize,
    train: &[usize],
    test: &[usize],
    unlabeled: &[usize],
    methods: &[Method],
    config: &PipelineConfig,
) -> Result<Vec<FoldOutcome>> {
    let discovery: Vec<usize> = train
        .iter()
        .chain(unlabeled)
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mil = if methods.iter().any(|m| m.needs_mil()) {
        let mut tc = config.train.clone();
        tc.seed = fold_seed(tc.seed, fold);
        Some(mil::train(&cohort.subset(train), &tc)?.params)
    } else {
        None
    };
    let every: Vec<usize> = discovery.iter().chain(test).copied().collect();
    let mut h_points = HashMap::new();
    let mut x_points = HashMap::new();
    if let Some(p) = &mil {
        for (i, sp) in every
            .iter()
            .zip(concepts::cohort_points(cohort, &every, Some(p), ConceptSpace::AwH)?)
        {
            h_points.insert(*i, sp);
        }
    }
    if methods.contains(&Method::Encoder) {
        for (i, sp) in every
            .iter()
            .zip(concepts::cohort_points(cohort, &every, None, ConceptSpace::Encoder)?)
        {
            x_points.insert(*i, sp);
        }
    }
    let mut state = FoldState {
        cohort,
        fold,
        train,
        discovery,
        config,
        mil,
        h_points,
        x_points,
        concepts: HashMap::new(),
    };

    methods
        .iter()
        .map(|&method| {
            let (eval, bundle) = match method {
                Method::AwH | Method::RawH | Method::Encoder => {
                    let space = method.space().unwrap();
                    let model = state.concepts(space)?;
                    let mode = fraction_mode_for(space);
                    let train_f = state.training_fractions(&model, mode)?;
                    let clf = classifier::fit_rule_with(&train_f, state.metadata())?;
                    let mil = if space.needs_mil() { state.mil.clone() } else { None };
                    let bundle = PipelineBundle::new(mil, model, clf)?;
                    (evaluate_bundle(&bundle, cohort, test)?, Some(bundle))
                }
                Method::Logistic => {
                    let model = state.concepts(ConceptSpace::AwH)?;
                    let mode = FractionMode::AttentionWeighted;
                    let train_f = state.training_fractions(&model, mode)?;
                    let lm = classifier::fit_logistic(&train_f, config.logistic)?;
                    let preds = test
                        .iter()
                        .map(|&i| {
                            let s = &cohort.slides[i];
                            let f = fraction_vector(&model, state.points(model.space, i), &s.slide_id, mode)?;
                            let (p, c) = classifier::predict_logistic(&lm, &f)?;
                            Ok(SlidePrediction {
                                slide_id: s.slide_id.clone(),
                                score: p,
                                pred: c,
                                label: s.label,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (metrics_of(preds)?, None)
                }
                Method::Heatmap => (heatmap_fold(&state, test)?, None),
                Method::MilBase => {
                    let preds = test
                        .iter()
                        .map(|&i| {
                            let s = &cohort.slides[i];
                            let p = state.h_points[&i].prob.expect("h-space points carry prob");
                            SlidePrediction {
                                slide_id: s.slide_id.clone(),
                                score: p,
                                pred: Class::from_bool(p >= 0.5),
                                label: s.label,
                            }
                        })
                        .collect();
                    (metrics_of(preds)?, None)
                }
            };
            Ok(FoldOutcome {
                fold,
                metrics: eval.metrics,
                predictions: eval.predictions,
                bundle,
            })
        })
        .collect()
}

/// Heatmap baseline: pick the attention threshold and score cutoff jointly
/// by training balanced accuracy (first candidate wins ties).
fn heatmap_fold(state: &FoldState<'_>, test: &[usize]) -> Result<Evaluation> {
    let cfg = state.config;
    if cfg.heatmap_thresholds.is_empty() {
        return Err(Error::Invalid("no heatmap attention thresholds configured".into()));
    }
    let labels: Vec<Class> = state
        .train
        .iter()
        .map(|&i| state.cohort.slides[i].label.unwrap())
        .collect();
    let alpha = |i: usize| state.h_points[&i].alpha.as_ref().expect("attention");
    let mut best: Option<(f64, f64, f64)> = None;
    for &t in &cfg.heatmap_thresholds {
        let scores: Vec<f64> = state
            .train
            .iter()
            .map(|&i| concepts::heatmap_score_from_alpha(alpha(i), t))
            .collect();
        let cut = classifier::select_threshold(&scores, &labels)?;
        let ba = classifier::balanced_accuracy(&scores, &labels, cut);
        if best.is_none_or(|(_, _, b)| ba > b) {
            best = Some((t, cut, ba));
        }
    }
    let (t, cut, _) = best.unwrap();
    let preds = test
        .iter()
        .map(|&i| {
            let s = &state.cohort.slides[i];
            let score = concepts::heatmap_score_from_alpha(alpha(i), t);
            SlidePrediction {
                slide_id: s.slide_id.clone(),
                score,
                pred: Class::from_bool(score >= cut),
                label: s.label,
            }
        })
        .collect();
    metrics_of(preds)
}

/// Fit a bundle on the given training slides (all labeled slides when
/// `None`), for later frozen transfer.
pub fn fit_bundle(
    cohort: &Cohort,
    train: Option<&[usize]>,
    space: ConceptSpace,
    config: &PipelineConfig,
) -> Result<PipelineBundle> {
    let train: Vec<usize> = match train {
        Some(t) => t.to_vec(),
        None => cohort.labeled_indices(),
    };
    check_train_classes(cohort, &train, 0)?;
    let mil = if space.needs_mil() {
        Some(mil::train(&cohort.subset(&train), &config.train)?.params)
    } else {
        None
    };
    let discovery: Vec<usize> = (0..cohort.len())
        .filter(|&i| train.contains(&i) || cohort.slides[i].label.is_none())
        .collect();
    let model = concepts::discover(cohort, &discovery, mil.as_ref(), space, config.k, &config.kmeans)?;
    let mode = fraction_mode_for(space);
    let per_slide = concepts::cohort_points(cohort, &train, mil.as_ref(), space)?;
    let train_f = train
        .iter()
        .zip(&per_slide)
        .map(|(&i, sp)| {
            let s = &cohort.slides[i];
            Ok((fraction_vector(&model, sp, &s.slide_id, mode)?, s.label.unwrap()))
        })
        .collect::<Result<Vec<_>>>()?;
    let clf = classifier::fit_rule_with(
        &train_f,
        FitMetadata {
            cohort: cohort.cohort_id.clone(),
            fold: None,
            label_kind: cohort.label_kind.as_str().to_string(),
        },
    )?;
    PipelineBundle::new(mil, model, clf)
}

/// Per-fold rule refit over frozen fraction vectors: only the concept mask
/// and threshold see the labels.
pub fn refit_rule_folds(
    cohort: &Cohort,
    mil: Option<&MilParams>,
    concepts_model: &ConceptModel,
    config: &PipelineConfig,
) -> Result<MethodReport> {
    check_labels(cohort)?;
    let mode = fraction_mode_for(concepts_model.space);
    let labeled = cohort.labeled_indices();
    let per_slide = concepts::cohort_points(cohort, &labeled, mil, concepts_model.space)?;
    let vectors: HashMap<usize, ConceptFractionVector> = labeled
        .iter()
        .zip(&per_slide)
        .map(|(&i, sp)| {
            Ok((i, fraction_vector(concepts_model, sp, &cohort.slides[i].slide_id, mode)?))
        })
        .collect::<Result<_>>()?;
    let plan = stratified_folds(cohort, config.folds, config.fold_seed)?;
    let mut folds = Vec::new();
    for f in 0..plan.n_folds {
        let train = plan.train_indices(cohort, f);
        let test = plan.test_indices(cohort, f);
        if test.is_empty() {
            continue;
        }
        check_train_classes(cohort, &train, f)?;
        let train_f: Vec<(ConceptFractionVector, Class)> = train
            .iter()
            .map(|&i| (vectors[&i].clone(), cohort.slides[i].label.unwrap()))
            .collect();
        let clf = classifier::fit_rule_with(
            &train_f,
            FitMetadata {
                cohort: cohort.cohort_id.clone(),
                fold: Some(f),
                label_kind: cohort.label_kind.as_str().to_string(),
            },
        )?;
        let preds = test
            .iter()
            .map(|&i| {
                let v = &vectors[&i];
                Ok(SlidePrediction {
                    slide_id: cohort.slides[i].slide_id.clone(),
                    score: classifier::score(&clf, v)?,
                    pred: classifier::predict(&clf, v)?,
                    label: cohort.slides[i].label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let eval = metrics_of(preds)?;
        folds.push(FoldOutcome {
            fold: f,
            metrics: eval.metrics,
            predictions: eval.predictions,
            bundle: None,
        });
    }
    MethodReport::new(format!("rule_refit_{}", cohort.label_kind), folds)
}

/// Survival-label reuse of a backbone and concepts trained for HPV status.
pub fn survival_eval(
    cohort: &Cohort,
    mil: Option<&MilParams>,
    concepts_model: &ConceptModel,
    config: &PipelineConfig,
) -> Result<MethodReport> {
    if cohort.label_kind != LabelKind::Survival {
        return Err(Error::MissingLabels(format!(
            "cohort `{}` carries `{}` labels, not survival labels",
            cohort.cohort_id, cohort.label_kind
        )));
    }
    refit_rule_folds(cohort, mil, concepts_model, config)
}

/// Recovery score of `method` against `base`, fold by fold.
pub fn recovery_per_fold(method: &MethodReport, base: &MethodReport) -> Result<Vec<RecoveryScore>> {
    if method.folds.len() != base.folds.len() {
        return Err(Error::dims("fold count", base.folds.len(), method.folds.len()));
    }
    method
        .folds
        .iter()
        .zip(&base.folds)
        .map(|(a, b)| {
            if a.fold != b.fold {
                return Err(Error::Invalid("fold indices do not line up".into()));
            }
            metrics::recovery(&a.metrics, &b.metrics)
        })
        .collect()
}
