//! Cohort data model and the manifest / tile-table file formats.
//!
//! A cohort on disk is one TOML manifest plus one CSV tile table per slide:
//!
//! ```toml
//! cohort_id = "tcga-like"
//! d_in = 32
//! label_kind = "hpv"
//!
//! [[slides]]
//! slide_id = "s000"
//! label = "positive"
//! table = "tiles/s000.csv"
//! ```
//!
//! Tile tables have the header `tile_id,row,col,e0,...,e{D-1}` and one tile per
//! row. Table paths are resolved relative to the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{fmt_f64, read_to_string, write_string};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Class {
    Negative,
    Positive,
}

impl Class {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Class::Positive
        } else {
            Class::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Class::Positive
    }

    pub fn flipped(self) -> Self {
        Class::from_bool(!self.is_positive())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Class::Negative => "negative",
            Class::Positive => "positive",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" | "pos" | "1" => Ok(Class::Positive),
            "negative" | "neg" | "0" => Ok(Class::Negative),
            other => Err(Error::Invalid(format!("unknown class label `{other}`"))),
        }
    }
}

/// What a slide-level label means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelKind {
    Hpv,
    Survival,
    None,
}

impl LabelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Hpv => "hpv",
            LabelKind::Survival => "survival",
            LabelKind::None => "none",
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hpv" => Ok(LabelKind::Hpv),
            "survival" => Ok(LabelKind::Survival),
            "none" => Ok(LabelKind::None),
            other => Err(Error::UnknownLabelKind(other.to_string())),
        }
    }
}

/// Position and identity of one tile. The embedding lives in the owning
/// bag's embedding matrix at the same row index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileRecord {
    pub tile_id: u64,
    pub row: u32,
    pub col: u32,
}

/// One slide: N tiles with their encoder embeddings (N x D_in).
///
/// Tile order is canonical: every reduction over tiles runs in this order.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    pub label: Option<Class>,
    pub label_kind: LabelKind,
    pub cohort_id: String,
    pub tiles: Vec<TileRecord>,
    pub embeddings: Array2<f64>,
}

impl SlideBag {
    pub fn new(
        slide_id: impl Into<String>,
        label: Option<Class>,
        label_kind: LabelKind,
        cohort_id: impl Into<String>,
        tiles: Vec<TileRecord>,
        embeddings: Array2<f64>,
    ) -> Result<Self> {
        let bag = Self {
            slide_id: slide_id.into(),
            label,
            label_kind,
            cohort_id: cohort_id.into(),
            tiles,
            embeddings,
        };
        bag.validate(bag.embeddings.ncols())?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn width(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn embedding(&self, i: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(i)
    }

    pub fn validate(&self, d_in: usize) -> Result<()> {
        if self.tiles.is_empty() {
            return Err(Error::Invalid(format!("slide `{}` has no tiles", self.slide_id)));
        }
        if self.embeddings.nrows() != self.tiles.len() {
            return Err(Error::dims(
                format!("slide `{}` embedding rows", self.slide_id),
                self.tiles.len(),
                self.embeddings.nrows(),
            ));
        }
        if self.embeddings.ncols() != d_in {
            return Err(Error::dims(
                format!("slide `{}` embedding width", self.slide_id),
                d_in,
                self.embeddings.ncols(),
            ));
        }
        if self.embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embeddings of slide `{}`", self.slide_id)));
        }
        let mut seen = HashSet::with_capacity(self.tiles.len());
        for t in &self.tiles {
            if !seen.insert((t.row, t.col)) {
                return Err(Error::DuplicatePosition {
                    slide_id: self.slide_id.clone(),
                    row: t.row,
                    col: t.col,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub cohort_id: String,
    pub d_in: usize,
    pub label_kind: LabelKind,
    pub slides: Vec<SlideBag>,
}

impl Cohort {
    pub fn new(
        cohort_id: impl Into<String>,
        d_in: usize,
        label_kind: LabelKind,
        slides: Vec<SlideBag>,
    ) -> Result<Self> {
        if d_in == 0 {
            return Err(Error::Invalid("D_in must be positive".into()));
        }
        let cohort = Self {
            cohort_id: cohort_id.into(),
            d_in,
            label_kind,
            slides,
        };
        let mut ids = HashSet::new();
        for s in &cohort.slides {
            s.validate(d_in)?;
            if !ids.insert(s.slide_id.as_str()) {
                return Err(Error::Invalid(format!("duplicate slide id `{}`", s.slide_id)));
            }
        }
        Ok(cohort)
    }

    pub fn len(&self) -> usize {
        self.slides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slides.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<Class, usize> {
        let mut counts = BTreeMap::new();
        for c in self.slides.iter().filter_map(|s| s.label) {
            *counts.entry(c).or_insert(0) += 1;
        }
        counts
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.slides.len())
            .filter(|&i| self.slides[i].label.is_some())
            .collect()
    }

    pub fn total_tiles(&self) -> usize {
        self.slides.iter().map(SlideBag::len).sum()
    }

    /// New cohort holding the given slides, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            cohort_id: self.cohort_id.clone(),
            d_in: self.d_in,
            label_kind: self.label_kind,
            slides: indices.iter().map(|&i| self.slides[i].clone()).collect(),
        }
    }

    /// Same slides with labels replaced; `labels` is aligned with `slides`.
    pub fn relabeled(&self, kind: LabelKind, labels: &[Option<Class>]) -> Result<Cohort> {
        if labels.len() != self.slides.len() {
            return Err(Error::dims("relabel", self.slides.len(), labels.len()));
        }
        let mut out = self.clone();
        out.label_kind = kind;
        for (s, l) in out.slides.iter_mut().zip(labels) {
            s.label = *l;
            s.label_kind = kind;
        }
        Ok(out)
    }
}

/// K nonnegative fractions summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptFractionVector {
    pub fractions: Vec<f64>,
    pub weighting: FractionMode,
}

impl ConceptFractionVector {
    pub fn k(&self) -> usize {
        self.fractions.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FractionMode {
    Raw,
    AttentionWeighted,
}

impl FractionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FractionMode::Raw => "raw",
            FractionMode::AttentionWeighted => "attention_weighted",
        }
    }
}

impl FromStr for FractionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(FractionMode::Raw),
            "attention_weighted" | "aw" => Ok(FractionMode::AttentionWeighted),
            other => Err(Error::Invalid(format!("unknown fraction mode `{other}`"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    cohort_id: String,
    d_in: usize,
    label_kind: String,
    #[serde(default)]
    slides: Vec<ManifestSlide>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSlide {
    slide_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    table: String,
}

/// Load a cohort from its manifest. Tables are read in parallel but slides
/// keep manifest order.
pub fn load_cohort(manifest_path: &Path) -> Result<Cohort> {
    let body = read_to_string(manifest_path)?;
    let manifest: ManifestFile = toml::from_str(&body).map_err(|e| {
        let line = e
            .span()
            .map(|s| body[..s.start].lines().count().max(1))
            .unwrap_or(0);
        Error::parse(manifest_path, line, e.message().to_string())
    })?;
    let label_kind: LabelKind = manifest.label_kind.parse()?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let d_in = manifest.d_in;
    let cohort_id = manifest.cohort_id.clone();

    let slides = manifest
        .slides
        .par_iter()
        .map(|entry| {
            let label = entry.label.as_deref().map(str::parse::<Class>).transpose()?;
            let table_path = base.join(&entry.table);
            let (tiles, emb) = read_tile_table(&table_path, d_in)?;
            SlideBag::new(
                entry.slide_id.clone(),
                label,
                label_kind,
                cohort_id.clone(),
                tiles,
                emb,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Cohort::new(cohort_id, d_in, label_kind, slides)
}

/// Write the manifest at `dir/manifest.toml` and one table per slide under
/// `dir/tiles/`. Returns the manifest path.
pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<PathBuf> {
    let manifest = ManifestFile {
        cohort_id: cohort.cohort_id.clone(),
        d_in: cohort.d_in,
        label_kind: cohort.label_kind.as_str().to_string(),
        slides: cohort
            .slides
            .iter()
            .map(|s| ManifestSlide {
                slide_id: s.slide_id.clone(),
                label: s.label.map(|c| c.as_str().to_string()),
                table: format!("tiles/{}.csv", s.slide_id),
            })
            .collect(),
    };
    for (s, entry) in cohort.slides.iter().zip(&manifest.slides) {
        write_tile_table(&dir.join(&entry.table), s)?;
    }
    let body = toml::to_string(&manifest)
        .map_err(|e| Error::Invalid(format!("cannot serialize manifest: {e}")))?;
    let path = dir.join("manifest.toml");
    write_string(&path, &body)?;
    Ok(path)
}

pub fn read_tile_table(path: &Path, d_in: usize) -> Result<(Vec<TileRecord>, Array2<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(path, 0, format!("{other:?}")),
        })?;
    let header_width = rdr
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .len();
    if header_width < 3 || header_width - 3 != d_in {
        return Err(Error::dims(
            format!("{} header", path.display()),
            d_in,
            header_width.saturating_sub(3),
        ));
    }
    let mut tiles = Vec::new();
    let mut values = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut line = 1;
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { len, .. } => Error::dims(
                format!("{} line {}", path.display(), line + 1),
                d_in,
                (*len as usize).saturating_sub(3),
            ),
            _ => Error::parse(path, line + 1, e.to_string()),
        })?;
        if !more {
            break;
        }
        line += 1;
        if record.len() != d_in + 3 {
            return Err(Error::dims(
                format!("{} line {line}", path.display()),
                d_in,
                record.len().saturating_sub(3),
            ));
        }
        let int = |i: usize, what: &str| -> Result<u64> {
            record[i]
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::parse(path, line, format!("bad {what} `{}`", &record[i])))
        };
        let tile_id = int(0, "tile_id")?;
        let row = u32::try_from(int(1, "row")?)
            .map_err(|_| Error::parse(path, line, "row out of range"))?;
        let col = u32::try_from(int(2, "col")?)
            .map_err(|_| Error::parse(path, line, "col out of range"))?;
        for tok in record.iter().skip(3) {
            let v = crate::text::parse_f64(tok, path, line)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{}:{line}", path.display())));
            }
            values.push(v);
        }
        tiles.push(TileRecord { tile_id, row, col });
    }
    let n = tiles.len();
    let emb = Array2::from_shape_vec((n, d_in), values)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    Ok((tiles, emb))
}

pub fn write_tile_table(path: &Path, bag: &SlideBag) -> Result<()> {
    let d = bag.width();
    let mut out = String::with_capacity(bag.len() * (d + 3) * 24);
    out.push_str("tile_id,row,col");
    for j in 0..d {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for (t, x) in bag.tiles.iter().zip(bag.embeddings.rows()) {
        out.push_str(&format!("{},{},{}", t.tile_id, t.row, t.col));
        for v in x {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    write_string(path, &out)
}
