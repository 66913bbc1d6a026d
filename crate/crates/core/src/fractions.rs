//! Slide-level concept-fraction vectors and class-averaged profiles.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::concepts::ConceptAssignment;
use crate::data::{Class, ConceptFractionVector, FractionMode, SlideBag};
use crate::error::{Error, Result};

/// Raw mode: share of tiles per concept. Attention-weighted mode: share of
/// attention mass per concept.
pub fn fractions(
    assignment: &ConceptAssignment,
    alpha: Option<&[f64]>,
    mode: FractionMode,
) -> Result<ConceptFractionVector> {
    let all: Vec<usize> = (0..assignment.assignments.len()).collect();
    fractions_over(assignment, alpha, mode, &all)
}

fn fractions_over(
    assignment: &ConceptAssignment,
    alpha: Option<&[f64]>,
    mode: FractionMode,
    tiles: &[usize],
) -> Result<ConceptFractionVector> {
    let k = assignment.k;
    if k == 0 {
        return Err(Error::Invalid("K must be positive".into()));
    }
    if tiles.is_empty() {
        return Err(Error::Invalid("no tiles to compute fractions over".into()));
    }
    if let Some(&bad) = assignment.assignments.iter().find(|&&c| c >= k) {
        return Err(Error::Invalid(format!("assignment {bad} out of range for K = {k}")));
    }
    let mut f = vec![0.0; k];
    match mode {
        FractionMode::Raw => {
            let mut counts = vec![0usize; k];
            for &i in tiles {
                counts[assignment.assignments[i]] += 1;
            }
            let n = tiles.len() as f64;
            for (fk, c) in f.iter_mut().zip(counts) {
                *fk = c as f64 / n;
            }
        }
        FractionMode::AttentionWeighted => {
            let alpha = alpha.ok_or_else(|| {
                Error::Invalid("attention-weighted fractions need attention weights".into())
            })?;
            if alpha.len() != assignment.assignments.len() {
                return Err(Error::dims(
                    "attention vs assignments",
                    assignment.assignments.len(),
                    alpha.len(),
                ));
            }
            if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
                return Err(Error::Invalid("attention must be finite and nonnegative".into()));
            }
            let mut total = 0.0;
            for &i in tiles {
                f[assignment.assignments[i]] += alpha[i];
                total += alpha[i];
            }
            if total <= 0.0 {
                return Err(Error::Invalid("attention sums to zero".into()));
            }
            for fk in &mut f {
                *fk /= total;
            }
        }
    }
    Ok(ConceptFractionVector {
        fractions: f,
        weighting: mode,
    })
}

/// Inclusive grid rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridRect {
    pub row_min: u32,
    pub row_max: u32,
    pub col_min: u32,
    pub col_max: u32,
}

impl GridRect {
    pub fn contains(&self, row: u32, col: u32) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }
}

/// Fractions restricted to tiles inside `roi`.
pub fn roi_fractions(
    bag: &SlideBag,
    assignment: &ConceptAssignment,
    alpha: Option<&[f64]>,
    roi: GridRect,
    mode: FractionMode,
) -> Result<ConceptFractionVector> {
    if bag.len() != assignment.assignments.len() {
        return Err(Error::dims("bag vs assignments", bag.len(), assignment.assignments.len()));
    }
    let inside: Vec<usize> = bag
        .tiles
        .iter()
        .enumerate()
        .filter(|(_, t)| roi.contains(t.row, t.col))
        .map(|(i, _)| i)
        .collect();
    if inside.is_empty() {
        return Err(Error::Invalid(format!(
            "region of interest {roi:?} contains no tiles of slide `{}`",
            bag.slide_id
        )));
    }
    fractions_over(assignment, alpha, mode, &inside)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProfile {
    pub mean: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub n_slides: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAveragedFractions {
    pub k: usize,
    pub classes: BTreeMap<Class, ClassProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub reps: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { reps: 1000, seed: 0 }
    }
}

/// Per-class mean fraction vector with a 95% percentile bootstrap over slides.
///
/// Bounds are widened to include the mean when the percentile interval of a
/// skewed resampling distribution misses it.
pub fn class_averages(
    vectors: &[(ConceptFractionVector, Class)],
    bootstrap: BootstrapConfig,
) -> Result<ClassAveragedFractions> {
    let k = vectors
        .first()
        .map(|(v, _)| v.k())
        .ok_or_else(|| Error::Invalid("no fraction vectors".into()))?;
    if vectors.iter().any(|(v, _)| v.k() != k) {
        return Err(Error::Invalid("fraction vectors have different K".into()));
    }
    let mut groups: BTreeMap<Class, Vec<&[f64]>> = BTreeMap::new();
    for (v, c) in vectors {
        groups.entry(*c).or_default().push(&v.fractions);
    }
    for c in [Class::Negative, Class::Positive] {
        if !groups.contains_key(&c) {
            return Err(Error::SingleClass(format!("class `{c}` has no slides")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(bootstrap.seed);
    let mut classes = BTreeMap::new();
    for (class, rows) in groups {
        let n = rows.len();
        let mean = mean_of(&rows, k);
        let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(bootstrap.reps); k];
        let mut picked: Vec<&[f64]> = Vec::with_capacity(n);
        for _ in 0..bootstrap.reps {
            picked.clear();
            for _ in 0..n {
                picked.push(rows[rng.random_range(0..n)]);
            }
            for (j, m) in mean_of(&picked, k).into_iter().enumerate() {
                draws[j].push(m);
            }
        }
        let mut ci_low = mean.clone();
        let mut ci_high = mean.clone();
        if bootstrap.reps > 0 {
            for j in 0..k {
                draws[j].sort_by(f64::total_cmp);
                ci_low[j] = percentile(&draws[j], 2.5).min(mean[j]);
                ci_high[j] = percentile(&draws[j], 97.5).max(mean[j]);
            }
        }
        classes.insert(
            class,
            ClassProfile {
                mean,
                ci_low,
                ci_high,
                n_slides: n,
            },
        );
    }
    Ok(ClassAveragedFractions { k, classes })
}

fn mean_of(rows: &[&[f64]], k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r.iter()) {
            *a += b;
        }
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
