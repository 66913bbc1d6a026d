//! Synthetic cohorts with planted concepts.
//!
//! Every tile belongs to one planted concept and its embedding is an
//! isotropic Gaussian draw around that concept's mean. Slides draw tile
//! concepts from a fixed per-class mixing vector.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Class, Cohort, LabelKind, SlideBag, TileRecord};
use crate::error::{Error, Result};
use crate::text::write_string;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Tiles scattered over random grid cells.
    Random,
    /// Each concept fills a band of whole grid rows (its last row may be partial).
    Blocky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub cohort_id: String,
    pub k_true: usize,
    pub d_in: usize,
    /// k_true x d_in; drawn from a seeded scaled orthonormal frame when absent.
    #[serde(skip)]
    pub means: Option<Array2<f64>>,
    pub sigma: f64,
    /// Minimum pairwise mean distance, in units of sigma.
    pub separation: f64,
    pub mixing_positive: Vec<f64>,
    pub mixing_negative: Vec<f64>,
    pub slides_per_class: usize,
    pub tiles_min: usize,
    pub tiles_max: usize,
    pub layout: Layout,
    pub informative: Vec<usize>,
    pub seed: u64,
}

/// Mixing vector: `peak` at `at`, the rest shared evenly.
pub fn peaked_mixing(k: usize, at: usize, peak: f64) -> Vec<f64> {
    let rest = (1.0 - peak) / (k - 1) as f64;
    (0..k).map(|i| if i == at { peak } else { rest }).collect()
}

impl SyntheticSpec {
    /// Ten planted concepts in 32 dimensions; positives elevated at concept 5,
    /// negatives at concept 7.
    pub fn acceptance(seed: u64) -> Self {
        Self {
            cohort_id: "synthetic".into(),
            k_true: 10,
            d_in: 32,
            means: None,
            sigma: 1.0,
            separation: 6.0,
            mixing_positive: peaked_mixing(10, 5, 0.28),
            mixing_negative: peaked_mixing(10, 7, 0.28),
            slides_per_class: 60,
            tiles_min: 200,
            tiles_max: 400,
            layout: Layout::Blocky,
            informative: vec![5, 7],
            seed,
        }
    }

    /// Smaller, faster cohort for unit tests and quick runs.
    pub fn small(seed: u64) -> Self {
        Self {
            cohort_id: "synthetic-small".into(),
            k_true: 4,
            d_in: 8,
            mixing_positive: peaked_mixing(4, 1, 0.55),
            mixing_negative: peaked_mixing(4, 2, 0.55),
            slides_per_class: 12,
            tiles_min: 30,
            tiles_max: 60,
            informative: vec![1, 2],
            ..Self::acceptance(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k_true == 0 || self.d_in == 0 {
            return Err(Error::Invalid("k_true and d_in must be positive".into()));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::Invalid("sigma must be finite and nonnegative".into()));
        }
        if self.tiles_min == 0 || self.tiles_min > self.tiles_max {
            return Err(Error::Invalid("tile count range is empty".into()));
        }
        for (name, m) in [("positive", &self.mixing_positive), ("negative", &self.mixing_negative)] {
            if m.len() != self.k_true {
                return Err(Error::dims(format!("{name} mixing vector"), self.k_true, m.len()));
            }
            let sum: f64 = m.iter().sum();
            if m.iter().any(|v| v.is_nan() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("{name} mixing vector is not on the simplex")));
            }
        }
        if let Some(&bad) = self.informative.iter().find(|&&i| i >= self.k_true) {
            return Err(Error::Invalid(format!("informative concept {bad} out of range")));
        }
        Ok(())
    }

    /// Concept means, generating the orthonormal frame if none were supplied.
    pub fn resolve_means(&self) -> Result<Array2<f64>> {
        let means = match &self.means {
            Some(m) => {
                if m.nrows() < self.k_true {
                    return Err(Error::Invalid(format!(
                        "k_true = {} exceeds the {} supplied means",
                        self.k_true,
                        m.nrows()
                    )));
                }
                if m.ncols() != self.d_in {
                    return Err(Error::dims("supplied means", self.d_in, m.ncols()));
                }
                m.slice(ndarray::s![..self.k_true, ..]).to_owned()
            }
            None => {
                if self.k_true > self.d_in {
                    return Err(Error::Invalid(format!(
                        "k_true = {} exceeds d_in = {}: no orthonormal frame",
                        self.k_true, self.d_in
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d65_616e);
                let frame = orthonormal_frame(self.k_true, self.d_in, &mut rng);
                frame * (self.separation * self.sigma / std::f64::consts::SQRT_2)
            }
        };
        for i in 0..self.k_true {
            for j in 0..i {
                let d = (&means.row(i) - &means.row(j)).mapv(|v| v * v).sum().sqrt();
                if d == 0.0 {
                    return Err(Error::Invalid(format!(
                        "k_true = {} exceeds the number of distinct means",
                        self.k_true
                    )));
                }
                let required = self.separation * self.sigma;
                if d < required * (1.0 - 1e-9) {
                    return Err(Error::Invalid(format!(
                        "means {i} and {j} are {d:.3} apart, below the required {required:.3}"
                    )));
                }
            }
        }
        Ok(means)
    }

    /// Smallest pairwise distance between concept means.
    pub fn min_separation(&self) -> Result<f64> {
        let m = self.resolve_means()?;
        let mut best = f64::INFINITY;
        for i in 0..m.nrows() {
            for j in 0..i {
                best = best.min((&m.row(i) - &m.row(j)).mapv(|v| v * v).sum().sqrt());
            }
        }
        Ok(best)
    }
}

/// Rows are orthonormal (Gram-Schmidt on Gaussian draws).
pub fn orthonormal_frame(k: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((k, d));
    let mut i = 0;
    while i < k {
        let mut v: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for j in 0..i {
            let proj = v.dot(&out.row(j));
            v = v - &out.row(j) * proj;
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            out.row_mut(i).assign(&(v / norm));
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub means: Array2<f64>,
    /// Planted concept per tile, aligned with the cohort's slides and tiles.
    pub planted: Vec<Vec<usize>>,
    /// Mixing vector each slide was drawn from.
    pub mixtures: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn flat_labels(&self) -> Vec<usize> {
        self.planted.iter().flatten().copied().collect()
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<(Cohort, GroundTruth)> {
    spec.validate()?;
    let means = spec.resolve_means()?;
    generate_with_means(spec, &means, spec.seed)
}

fn generate_with_means(
    spec: &SyntheticSpec,
    means: &Array2<f64>,
    seed: u64,
) -> Result<(Cohort, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slides = Vec::with_capacity(2 * spec.slides_per_class);
    let mut planted = Vec::with_capacity(slides.capacity());
    let mut mixtures = Vec::with_capacity(slides.capacity());
    let width = 2 * spec.slides_per_class;
    let digits = width.max(1).to_string().len().max(3);
    for s in 0..width {
        let class = Class::from_bool(s % 2 == 0);
        let mixing = if class.is_positive() {
            &spec.mixing_positive
        } else {
            &spec.mixing_negative
        };
        let n = rng.random_range(spec.tiles_min..=spec.tiles_max);
        let mut concepts: Vec<usize> = (0..n).map(|_| sample_categorical(mixing, &mut rng)).collect();
        let cells = match spec.layout {
            Layout::Random => random_cells(n, &mut rng),
            Layout::Blocky => {
                concepts.sort_unstable();
                blocky_cells(&concepts)
            }
        };
        let mut emb = Array2::zeros((n, spec.d_in));
        for (i, &c) in concepts.iter().enumerate() {
            for j in 0..spec.d_in {
                let z: f64 = rng.sample(StandardNormal);
                emb[[i, j]] = means[[c, j]] + spec.sigma * z;
            }
        }
        let tiles = cells
            .iter()
            .enumerate()
            .map(|(i, &(row, col))| TileRecord {
                tile_id: i as u64,
                row,
                col,
            })
            .collect();
        slides.push(SlideBag::new(
            format!("s{s:0digits$}"),
            Some(class),
            LabelKind::Hpv,
            spec.cohort_id.clone(),
            tiles,
            emb,
        )?);
        planted.push(concepts);
        mixtures.push(mixing.clone());
    }
    let cohort = Cohort::new(spec.cohort_id.clone(), spec.d_in, LabelKind::Hpv, slides)?;
    Ok((
        cohort,
        GroundTruth {
            means: means.clone(),
            planted,
            mixtures,
        },
    ))
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

fn grid_width(n: usize) -> u32 {
    (n as f64).sqrt().ceil().max(1.0) as u32
}

fn random_cells(n: usize, rng: &mut impl Rng) -> Vec<(u32, u32)> {
    let w = ((1.5 * n as f64).sqrt().ceil() as u32).max(1);
    let h = (n as u32).div_ceil(w) + (n as u32 / 2).div_ceil(w);
    let mut cells: Vec<(u32, u32)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    cells.shuffle(rng);
    cells.truncate(n);
    cells
}

/// `concepts` must be sorted; every concept starts on a fresh row.
fn blocky_cells(concepts: &[usize]) -> Vec<(u32, u32)> {
    let w = grid_width(concepts.len());
    let mut cells = Vec::with_capacity(concepts.len());
    let (mut row, mut col) = (0u32, 0u32);
    for (i, &c) in concepts.iter().enumerate() {
        if i > 0 && (c != concepts[i - 1] || col == w) {
            row += 1;
            col = 0;
        }
        cells.push((row, col));
        col += 1;
    }
    cells
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftRestriction {
    /// Shift must be orthogonal to every pairwise concept-mean difference.
    Orthogonal,
    Unrestricted,
}

/// A fresh cohort from the same spec with every concept mean moved by `shift`.
pub fn shifted_external(
    spec: &SyntheticSpec,
    shift: &Array1<f64>,
    restriction: ShiftRestriction,
    seed: u64,
) -> Result<(Cohort, GroundTruth)> {
    spec.validate()?;
    let means = spec.resolve_means()?;
    if shift.len() != spec.d_in {
        return Err(Error::dims("shift vector", spec.d_in, shift.len()));
    }
    if restriction == ShiftRestriction::Orthogonal {
        let sn = shift.dot(shift).sqrt();
        for i in 0..means.nrows() {
            for j in 0..i {
                let diff = &means.row(i) - &means.row(j);
                let dn = diff.dot(&diff).sqrt();
                if shift.dot(&diff).abs() > 1e-9 * sn * dn.max(1.0) {
                    return Err(Error::Invalid(format!(
                        "shift is not orthogonal to the difference of concepts {i} and {j}"
                    )));
                }
            }
        }
    }
    let shifted = &means + shift;
    let (mut cohort, truth) = generate_with_means(spec, &shifted, seed)?;
    cohort.cohort_id = format!("{}-external", spec.cohort_id);
    for s in &mut cohort.slides {
        s.cohort_id = cohort.cohort_id.clone();
    }
    Ok((cohort, truth))
}

/// Shift of the given norm orthogonal to the span of all concept means.
pub fn orthogonal_shift(means: &Array2<f64>, norm: f64, seed: u64) -> Result<Array1<f64>> {
    let d = means.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // orthonormal basis of the mean span
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for row in means.rows() {
        let mut v = row.to_owned();
        for b in &basis {
            let p = v.dot(b);
            v = v - b * p;
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-10 {
            basis.push(v / n);
        }
    }
    if basis.len() >= d {
        return Err(Error::Invalid("concept means span the whole space".into()));
    }
    for _ in 0..100 {
        let mut v: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        // two passes of Gram-Schmidt keep the residual at rounding level
        for _ in 0..2 {
            for b in &basis {
                let p = v.dot(b);
                v = v - b * p;
            }
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            return Ok(v * (norm / n));
        }
    }
    Err(Error::Numerical("could not draw an orthogonal shift".into()))
}

/// Shift of the given norm along `means[a] - means[b]`.
pub fn concept_difference_shift(
    means: &Array2<f64>,
    a: usize,
    b: usize,
    norm: f64,
) -> Result<Array1<f64>> {
    if a >= means.nrows() || b >= means.nrows() || a == b {
        return Err(Error::Invalid("concept pair out of range".into()));
    }
    let diff = &means.row(a) - &means.row(b);
    let n = diff.dot(&diff).sqrt();
    Ok(diff * (norm / n))
}

/// Survival-style labels that agree with the class label except for a
/// seeded fraction `(1 - correlation) / 2` of slides, which are flipped.
/// For balanced classes the phi coefficient equals `correlation`.
pub fn correlated_labels(cohort: &Cohort, correlation: f64, seed: u64) -> Result<Cohort> {
    if !(-1.0..=1.0).contains(&correlation) {
        return Err(Error::Invalid("correlation must be in [-1, 1]".into()));
    }
    let flip = (1.0 - correlation) / 2.0;
    let n = cohort.slides.len();
    let n_flip = (flip * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut flipped = vec![false; n];
    for &i in &order[..n_flip] {
        flipped[i] = true;
    }
    let labels: Vec<Option<Class>> = cohort
        .slides
        .iter()
        .zip(&flipped)
        .map(|(s, &f)| s.label.map(|c| if f { c.flipped() } else { c }))
        .collect();
    cohort.relabeled(LabelKind::Survival, &labels)
}

/// Cohort containing only the slides of one class.
pub fn single_class(cohort: &Cohort, class: Class) -> Cohort {
    let idx: Vec<usize> = (0..cohort.len())
        .filter(|&i| cohort.slides[i].label == Some(class))
        .collect();
    cohort.subset(&idx)
}

/// `slide_id,tile_id,planted_concept`
pub fn write_ground_truth(path: &Path, cohort: &Cohort, truth: &GroundTruth) -> Result<()> {
    let mut out = String::from("slide_id,tile_id,planted_concept\n");
    for (s, planted) in cohort.slides.iter().zip(&truth.planted) {
        for (t, c) in s.tiles.iter().zip(planted) {
            out.push_str(&format!("{},{},{}\n", s.slide_id, t.tile_id, c));
        }
    }
    write_string(path, &out)
}

/// Per-slide mixture draws for one class, as a distribution check helper.
pub fn empirical_mixture(planted: &[usize], k: usize) -> Vec<f64> {
    let mut f = vec![0.0; k];
    for &c in planted {
        f[c] += 1.0;
    }
    let n = planted.len() as f64;
    f.iter_mut().for_each(|v| *v /= n);
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::small(11);
        let (a, ta) = generate(&spec).unwrap();
        let (b, tb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn frame_separation_matches_spec() {
        let spec = SyntheticSpec::acceptance(1);
        let sep = spec.min_separation().unwrap();
        assert!((sep - 6.0).abs() < 1e-9, "{sep}");
    }

    #[test]
    fn zero_noise_tiles_sit_on_their_means() {
        let base = SyntheticSpec::small(2);
        let spec = SyntheticSpec {
            sigma: 0.0,
            means: Some(base.resolve_means().unwrap()),
            ..base
        };
        let (cohort, truth) = generate(&spec).unwrap();
        for (s, planted) in cohort.slides.iter().zip(&truth.planted) {
            for (x, &c) in s.embeddings.rows().into_iter().zip(planted) {
                assert_eq!(x, truth.means.row(c));
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SyntheticSpec::small(0);
        spec.mixing_positive[0] += 0.1;
        assert!(generate(&spec).is_err());
        let spec = SyntheticSpec {
            k_true: 9,
            mixing_positive: peaked_mixing(9, 1, 0.5),
            mixing_negative: peaked_mixing(9, 2, 0.5),
            ..SyntheticSpec::small(0)
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn blocky_layout_is_row_bands() {
        let cells = blocky_cells(&[0, 0, 0, 1, 1, 2, 2, 2, 2]);
        assert_eq!(cells[..3], [(0, 0), (0, 1), (0, 2)]);
        assert_eq!(cells[3..5], [(1, 0), (1, 1)]);
        assert_eq!(cells[5..], [(2, 0), (2, 1), (2, 2), (3, 0)]);
    }

    #[test]
    fn orthogonal_shift_is_orthogonal() {
        let spec = SyntheticSpec::small(4);
        let means = spec.resolve_means().unwrap();
        let s = orthogonal_shift(&means, 3.0, 9).unwrap();
        assert!((s.dot(&s).sqrt() - 3.0).abs() < 1e-12);
        assert!(shifted_external(&spec, &s, ShiftRestriction::Orthogonal, 5).is_ok());
        let bad = concept_difference_shift(&means, 0, 1, 3.0).unwrap();
        assert!(shifted_external(&spec, &bad, ShiftRestriction::Orthogonal, 5).is_err());
    }

    #[test]
    fn label_correlation_flips_expected_share() {
        let (cohort, _) = generate(&SyntheticSpec::small(3)).unwrap();
        let surv = correlated_labels(&cohort, 0.8, 1).unwrap();
        let flips = cohort
            .slides
            .iter()
            .zip(&surv.slides)
            .filter(|(a, b)| a.label != b.label)
            .count();
        assert_eq!(flips, (0.1 * cohort.len() as f64).round() as usize);
        assert_eq!(surv.label_kind, LabelKind::Survival);
    }
}
