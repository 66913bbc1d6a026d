//! Raster figures written as binary PPM, each paired with a numeric sidecar
//! so the figure content can be checked without decoding pixels.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::concepts::{self, ConceptAssignment, ConceptModel};
use crate::data::{Class, Cohort, SlideBag};
use crate::error::{Error, Result};
use crate::fractions::ClassAveragedFractions;
use crate::kmeans;
use crate::mil::MilParams;

pub type Rgb = [u8; 3];

const TAB10: [Rgb; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

const TAB10_LIGHT: [Rgb; 10] = [
    [174, 199, 232],
    [255, 187, 120],
    [152, 223, 138],
    [255, 152, 150],
    [197, 176, 213],
    [196, 156, 148],
    [247, 182, 210],
    [199, 199, 199],
    [219, 219, 141],
    [158, 218, 229],
];

pub const POSITIVE_COLOR: Rgb = [31, 119, 180];
pub const NEGATIVE_COLOR: Rgb = [255, 127, 14];

#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub colors: Vec<Rgb>,
    pub background: Rgb,
}

impl Palette {
    /// tab10 first, then its light variants, then evenly spread hues.
    pub fn for_k(k: usize) -> Self {
        let mut colors: Vec<Rgb> = TAB10.iter().chain(&TAB10_LIGHT).copied().take(k).collect();
        let extra = k.saturating_sub(colors.len());
        for i in 0..extra {
            colors.push(hsv((i as f64 + 0.5) / extra as f64, 0.65, 0.8));
        }
        Self {
            colors,
            background: [255, 255, 255],
        }
    }

    pub fn color(&self, concept: usize) -> Rgb {
        self.colors[concept % self.colors.len()]
    }
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Raster {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, c: Rgb) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.pixels[y * self.width + x] = c;
            }
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height).map_err(io)?;
        for px in &self.pixels {
            w.write_all(px).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

fn grid_extent(bag: &SlideBag) -> (usize, usize) {
    let rows = bag.tiles.iter().map(|t| t.row as usize + 1).max().unwrap_or(0);
    let cols = bag.tiles.iter().map(|t| t.col as usize + 1).max().unwrap_or(0);
    (rows, cols)
}

/// One cell per tile at its grid position, colored by concept.
pub fn concept_map(
    bag: &SlideBag,
    assignment: &ConceptAssignment,
    palette: &Palette,
    cell: usize,
) -> Result<Raster> {
    if assignment.assignments.len() != bag.len() {
        return Err(Error::dims("assignments vs tiles", bag.len(), assignment.assignments.len()));
    }
    let (rows, cols) = grid_extent(bag);
    let mut r = Raster::new(cols * cell, rows * cell, palette.background);
    for (t, &c) in bag.tiles.iter().zip(&assignment.assignments) {
        r.fill_rect(t.col as usize * cell, t.row as usize * cell, cell, cell, palette.color(c));
    }
    Ok(r)
}

/// Indices of the `ceil(fraction * N)` tiles with the largest attention;
/// ties go to the smaller tile id.
pub fn top_attention(bag: &SlideBag, alpha: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if alpha.len() != bag.len() {
        return Err(Error::dims("attention vs tiles", bag.len(), alpha.len()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("top fraction {fraction} outside (0, 1]")));
    }
    let n = ((fraction * bag.len() as f64).ceil() as usize).min(bag.len());
    let mut order: Vec<usize> = (0..bag.len()).collect();
    order.sort_by(|&a, &b| {
        alpha[b]
            .total_cmp(&alpha[a])
            .then(bag.tiles[a].tile_id.cmp(&bag.tiles[b].tile_id))
    });
    order.truncate(n);
    order.sort_unstable();
    Ok(order)
}

/// Concept map restricted to the high-attention tiles; every other cell
/// keeps the background color.
pub fn high_attention_map(
    bag: &SlideBag,
    assignment: &ConceptAssignment,
    alpha: &[f64],
    fraction: f64,
    palette: &Palette,
    cell: usize,
) -> Result<(Raster, Vec<usize>)> {
    if assignment.assignments.len() != bag.len() {
        return Err(Error::dims("assignments vs tiles", bag.len(), assignment.assignments.len()));
    }
    let top = top_attention(bag, alpha, fraction)?;
    let (rows, cols) = grid_extent(bag);
    let mut r = Raster::new(cols * cell, rows * cell, palette.background);
    for &i in &top {
        let t = &bag.tiles[i];
        let c = palette.color(assignment.assignments[i]);
        r.fill_rect(t.col as usize * cell, t.row as usize * cell, cell, cell, c);
    }
    Ok((r, top))
}

/// `row,col,tile_id,concept` for every drawn tile.
pub fn map_sidecar(bag: &SlideBag, assignment: &ConceptAssignment, drawn: Option<&[usize]>) -> String {
    let mut s = String::from("row,col,tile_id,concept\n");
    let all: Vec<usize>;
    let idx = match drawn {
        Some(d) => d,
        None => {
            all = (0..bag.len()).collect();
            &all
        }
    };
    for &i in idx {
        let t = &bag.tiles[i];
        s.push_str(&format!("{},{},{},{}\n", t.row, t.col, t.tile_id, assignment.assignments[i]));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeTile {
    pub concept: usize,
    pub rank: usize,
    pub slide_id: String,
    pub tile_id: u64,
    pub distance: f64,
}

/// The `m` tiles nearest each centroid among the tiles assigned to it, over
/// all slides at `indices`. Ties: smaller slide id, then smaller tile id.
pub fn representative_tiles(
    cohort: &Cohort,
    indices: &[usize],
    mil: Option<&MilParams>,
    model: &ConceptModel,
    m: usize,
) -> Result<Vec<RepresentativeTile>> {
    if m == 0 {
        return Err(Error::Invalid("representative tile count must be at least 1".into()));
    }
    let per_slide = concepts::cohort_points(cohort, indices, mil, model.space)?;
    let mut pools: Vec<Vec<(f64, &str, u64)>> = vec![Vec::new(); model.k()];
    for (&i, sp) in indices.iter().zip(&per_slide) {
        let bag = &cohort.slides[i];
        if sp.points.ncols() != model.dim() {
            return Err(Error::dims("tile width vs concept width", model.dim(), sp.points.ncols()));
        }
        for (row, tile) in sp.points.rows().into_iter().zip(&bag.tiles) {
            let (c, d2) = kmeans::nearest(model.centroids.view(), row);
            pools[c].push((d2.sqrt(), bag.slide_id.as_str(), tile.tile_id));
        }
    }
    let mut out = Vec::new();
    for (concept, mut pool) in pools.into_iter().enumerate() {
        pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
        for (rank, (distance, slide_id, tile_id)) in pool.into_iter().take(m).enumerate() {
            out.push(RepresentativeTile {
                concept,
                rank,
                slide_id: slide_id.to_string(),
                tile_id,
                distance,
            });
        }
    }
    Ok(out)
}

/// Grouped bars per concept (positive in blue, then negative in orange) with
/// CI whiskers and a palette strip under each group. Bar heights share one
/// scale set by the largest upper CI bound.
pub fn fraction_chart(avg: &ClassAveragedFractions, palette: &Palette) -> Result<Raster> {
    let neg = avg
        .classes
        .get(&Class::Negative)
        .ok_or_else(|| Error::SingleClass("no negative profile".into()))?;
    let pos = avg
        .classes
        .get(&Class::Positive)
        .ok_or_else(|| Error::SingleClass("no positive profile".into()))?;
    let (bar, gap, plot_h, strip, margin) = (12usize, 10usize, 200usize, 8usize, 10usize);
    let group = 2 * bar + gap;
    let width = 2 * margin + avg.k * group;
    let height = 2 * margin + plot_h + strip + 4;
    let top = neg
        .ci_high
        .iter()
        .chain(&pos.ci_high)
        .fold(0.0f64, |a, &b| a.max(b))
        .max(1e-12);
    let scale = |v: f64| ((v / top).clamp(0.0, 1.0) * plot_h as f64).round() as usize;
    let base = margin + plot_h;
    let mut r = Raster::new(width, height, palette.background);
    for k in 0..avg.k {
        let x0 = margin + k * group;
        for (j, (p, c)) in [(pos, POSITIVE_COLOR), (neg, NEGATIVE_COLOR)].into_iter().enumerate() {
            let x = x0 + j * bar;
            let h = scale(p.mean[k]);
            r.fill_rect(x + 1, base - h, bar - 2, h, c);
            let (lo, hi) = (scale(p.ci_low[k]), scale(p.ci_high[k]));
            let cx = x + bar / 2;
            r.fill_rect(cx, base - hi, 1, hi - lo + 1, [0, 0, 0]);
            r.fill_rect(cx - 2, base - hi, 5, 1, [0, 0, 0]);
            r.fill_rect(cx - 2, base - lo, 5, 1, [0, 0, 0]);
        }
        r.fill_rect(x0, base + 4, 2 * bar, strip, palette.color(k));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelKind, TileRecord};
    use ndarray::Array2;

    fn bag(n: u64) -> SlideBag {
        let tiles = (0..n)
            .map(|i| TileRecord {
                tile_id: i,
                row: (i / 4) as u32,
                col: (i % 4) as u32,
            })
            .collect();
        SlideBag::new("s", None, LabelKind::None, "c", tiles, Array2::zeros((n as usize, 2))).unwrap()
    }

    #[test]
    fn palette_colors_are_distinct() {
        for k in [1, 10, 20, 33] {
            let p = Palette::for_k(k);
            let mut c = p.colors.clone();
            c.sort();
            c.dedup();
            assert_eq!(c.len(), k);
        }
    }

    #[test]
    fn top_attention_breaks_ties_by_tile_id() {
        let b = bag(8);
        let alpha = [1.0, 2.0, 2.0, 0.5, 2.0, 0.5, 0.5, 0.5];
        assert_eq!(top_attention(&b, &alpha, 0.25).unwrap(), vec![1, 2]);
        assert_eq!(top_attention(&b, &alpha, 0.3).unwrap(), vec![1, 2, 4]);
        assert!(top_attention(&b, &alpha, 0.0).is_err());
        let uniform = [1.0; 8];
        assert_eq!(top_attention(&b, &uniform, 0.1).unwrap(), vec![0]);
    }

    #[test]
    fn concept_map_colors_cells() {
        let b = bag(8);
        let asg = ConceptAssignment {
            slide_id: "s".into(),
            k: 2,
            assignments: vec![0, 1, 0, 1, 1, 1, 1, 1],
        };
        let p = Palette::for_k(2);
        let r = concept_map(&b, &asg, &p, 3).unwrap();
        assert_eq!((r.width, r.height), (12, 6));
        assert_eq!(r.get(0, 0), p.color(0));
        assert_eq!(r.get(4, 1), p.color(1));
        let (full, _) = high_attention_map(&b, &asg, &[1.0; 8], 1.0, &p, 3).unwrap();
        assert_eq!(full, r);
        let (part, top) = high_attention_map(&b, &asg, &[1.0; 8], 0.25, &p, 3).unwrap();
        assert_eq!(top, vec![0, 1]);
        assert_eq!(part.get(0, 0), p.color(0));
        assert_eq!(part.get(6, 0), p.background);
    }
}
