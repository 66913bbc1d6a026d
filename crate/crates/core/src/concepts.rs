//! Concept discovery over a cohort: builds the clustering point set in the
//! chosen space, fits weighted k-means, and assigns tiles to concepts.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, SlideBag};
use crate::error::{Error, Result};
use crate::kmeans::{self, KMeansConfig, KMeansFit};
use crate::mil::{self, MilParams};

/// Where concepts live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptSpace {
    /// MIL h-space, every tile weighted equally.
    RawH,
    /// MIL h-space, tiles weighted by rescaled attention.
    AwH,
    /// Encoder embeddings, no MIL involved.
    Encoder,
}

impl ConceptSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            ConceptSpace::RawH => "raw_h",
            ConceptSpace::AwH => "aw_h",
            ConceptSpace::Encoder => "encoder",
        }
    }

    pub fn needs_mil(self) -> bool {
        !matches!(self, ConceptSpace::Encoder)
    }
}

impl fmt::Display for ConceptSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConceptSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_h" => Ok(ConceptSpace::RawH),
            "aw_h" => Ok(ConceptSpace::AwH),
            "encoder" => Ok(ConceptSpace::Encoder),
            other => Err(Error::Invalid(format!("unknown concept space `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel {
    /// K x d centroid matrix.
    pub centroids: Array2<f64>,
    pub space: ConceptSpace,
    pub wcss: f64,
    pub seed: u64,
}

impl ConceptModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() == 0 {
            return Err(Error::Invalid("concept model has K = 0".into()));
        }
        if self.dim() == 0 {
            return Err(Error::Invalid("concept model has zero-width centroids".into()));
        }
        if self.centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("concept centroids".into()));
        }
        if self.wcss.is_nan() || self.wcss < 0.0 {
            return Err(Error::Invalid(format!("wcss must be >= 0, got {}", self.wcss)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptAssignment {
    pub slide_id: String,
    pub k: usize,
    pub assignments: Vec<usize>,
}

/// Fit K concepts to a point set. `weights = None` is the unweighted objective.
pub fn fit_concepts(
    points: ArrayView2<'_, f64>,
    weights: Option<&[f64]>,
    k: usize,
    space: ConceptSpace,
    config: &KMeansConfig,
) -> Result<ConceptModel> {
    let fit = kmeans::fit(points, weights, k, config)?;
    Ok(model_from_fit(fit, space, config.seed))
}

fn model_from_fit(fit: KMeansFit, space: ConceptSpace, seed: u64) -> ConceptModel {
    ConceptModel {
        centroids: fit.centroids,
        space,
        wcss: fit.wcss,
        seed,
    }
}

pub fn assign_points(model: &ConceptModel, points: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    if points.ncols() != model.dim() {
        return Err(Error::dims("points vs centroids", model.dim(), points.ncols()));
    }
    Ok(kmeans::assign_all(model.centroids.view(), points))
}

/// Per-tile view of one slide in a concept space.
#[derive(Debug, Clone)]
pub struct SlidePoints {
    pub points: Array2<f64>,
    /// Rescaled attention when a MIL model was used.
    pub alpha: Option<Array1<f64>>,
    pub prob: Option<f64>,
}

/// Points for one slide: h-space embeddings (with attention) or raw encoder
/// embeddings.
pub fn slide_points(
    bag: &SlideBag,
    mil: Option<&MilParams>,
    space: ConceptSpace,
) -> Result<SlidePoints> {
    match (space.needs_mil(), mil) {
        (true, None) => Err(Error::Invalid(format!(
            "concept space `{space}` needs a MIL model"
        ))),
        (true, Some(p)) => {
            let out = mil::forward(p, bag)?;
            Ok(SlidePoints {
                points: out.h,
                alpha: Some(out.alpha_rescaled),
                prob: Some(out.prob),
            })
        }
        (false, _) => Ok(SlidePoints {
            points: bag.embeddings.clone(),
            alpha: None,
            prob: None,
        }),
    }
}

pub fn cohort_points(
    cohort: &Cohort,
    indices: &[usize],
    mil: Option<&MilParams>,
    space: ConceptSpace,
) -> Result<Vec<SlidePoints>> {
    indices
        .par_iter()
        .map(|&i| slide_points(&cohort.slides[i], mil, space))
        .collect()
}

/// Stack per-slide points (in slide order) and the matching weights for the
/// given space: rescaled attention for `aw_h`, none otherwise.
pub fn stack(per_slide: &[SlidePoints], space: ConceptSpace) -> (Array2<f64>, Option<Vec<f64>>) {
    let views: Vec<_> = per_slide.iter().map(|s| s.points.view()).collect();
    let points = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    let weights = (space == ConceptSpace::AwH).then(|| {
        per_slide
            .iter()
            .flat_map(|s| s.alpha.as_ref().expect("h-space slide has attention").iter().copied())
            .collect()
    });
    (points, weights)
}

/// Discover K concepts from the slides at `indices`.
pub fn discover(
    cohort: &Cohort,
    indices: &[usize],
    mil: Option<&MilParams>,
    space: ConceptSpace,
    k: usize,
    config: &KMeansConfig,
) -> Result<ConceptModel> {
    let per_slide = cohort_points(cohort, indices, mil, space)?;
    discover_from_points(&per_slide, space, k, config)
}

pub fn discover_from_points(
    per_slide: &[SlidePoints],
    space: ConceptSpace,
    k: usize,
    config: &KMeansConfig,
) -> Result<ConceptModel> {
    if per_slide.is_empty() {
        return Err(Error::Invalid("no slides to discover concepts from".into()));
    }
    let (points, weights) = stack(per_slide, space);
    fit_concepts(points.view(), weights.as_deref(), k, space, config)
}

/// Assign every tile of a bag.
pub fn assign(
    model: &ConceptModel,
    bag: &SlideBag,
    mil: Option<&MilParams>,
) -> Result<ConceptAssignment> {
    let sp = slide_points(bag, mil, model.space)?;
    Ok(ConceptAssignment {
        slide_id: bag.slide_id.clone(),
        k: model.k(),
        assignments: assign_points(model, sp.points.view())?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElbowCurve {
    pub points: Vec<(usize, f64)>,
    pub selected: usize,
}

/// WCSS for each k, fitted as a nested chain: the first k from the shared
/// seed, every later k grown from the previous solution. Selects the k with
/// the largest discrete second difference.
pub fn elbow_curve(
    points: ArrayView2<'_, f64>,
    weights: Option<&[f64]>,
    k_range: &[usize],
    config: &KMeansConfig,
) -> Result<ElbowCurve> {
    if k_range.is_empty() {
        return Err(Error::Invalid("empty k range".into()));
    }
    if k_range.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("k range must be strictly ascending".into()));
    }
    let last = *k_range.last().unwrap();
    if last > points.nrows() {
        return Err(Error::Invalid(format!(
            "k = {last} exceeds the {} available points",
            points.nrows()
        )));
    }
    let mut fit = kmeans::fit(points, weights, k_range[0], config)?;
    let mut curve = vec![(k_range[0], fit.wcss)];
    for pair in k_range.windows(2) {
        fit = kmeans::grow(points, weights, &fit, pair[1] - pair[0], config.tol, config.max_iter)?;
        curve.push((pair[1], fit.wcss));
    }
    let selected = select_elbow(&curve);
    Ok(ElbowCurve {
        points: curve,
        selected,
    })
}

/// Interior k maximizing `w[k-1] - 2 w[k] + w[k+1]`; first on ties. With
/// fewer than three points the smallest k is returned.
pub fn select_elbow(curve: &[(usize, f64)]) -> usize {
    let mut best = (curve[0].0, f64::NEG_INFINITY);
    for w in curve.windows(3) {
        let second = w[0].1 - 2.0 * w[1].1 + w[2].1;
        if second > best.1 {
            best = (w[1].0, second);
        }
    }
    best.0
}

pub fn elbow_for_cohort(
    cohort: &Cohort,
    indices: &[usize],
    mil: Option<&MilParams>,
    space: ConceptSpace,
    k_range: &[usize],
    config: &KMeansConfig,
) -> Result<ElbowCurve> {
    let per_slide = cohort_points(cohort, indices, mil, space)?;
    let (points, weights) = stack(&per_slide, space);
    elbow_curve(points.view(), weights.as_deref(), k_range, config)
}

/// Share of tiles whose rescaled attention exceeds `tau_attn`.
pub fn heatmap_score_from_alpha(alpha: &Array1<f64>, tau_attn: f64) -> f64 {
    let above = alpha.iter().filter(|&&a| a > tau_attn).count();
    above as f64 / alpha.len() as f64
}

pub fn heatmap_score(bag: &SlideBag, mil: &MilParams, tau_attn: f64) -> Result<f64> {
    if !tau_attn.is_finite() {
        return Err(Error::Invalid("attention threshold must be finite".into()));
    }
    let out = mil::forward(mil, bag)?;
    Ok(heatmap_score_from_alpha(&out.alpha_rescaled, tau_attn))
}
