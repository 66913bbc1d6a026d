//! Versioned text files for fitted models. Every real value is written with
//! 17 significant digits so loading reproduces it bit for bit.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::classifier::{FitMetadata, RuleClassifier};
use crate::concepts::{ConceptModel, ConceptSpace};
use crate::error::{Error, Result};
use crate::mil::{MilDims, MilParams};
use crate::text::{fmt_f64, join_row, read_to_string, write_string, Lines};

pub const CONCEPT_MODEL_VERSION: &str = "conceptmil-concept-model v1";
pub const MIL_MODEL_VERSION: &str = "conceptmil-mil-model v1";
pub const CLASSIFIER_VERSION: &str = "conceptmil-rule-classifier v1";

pub fn concept_model_to_string(model: &ConceptModel) -> String {
    let mut out = format!(
        "{CONCEPT_MODEL_VERSION}\nk {}\nd {}\nspace {}\nwcss {}\nseed {}\n",
        model.k(),
        model.dim(),
        model.space,
        fmt_f64(model.wcss),
        model.seed
    );
    for row in model.centroids.rows() {
        out.push_str(&join_row(row.iter().copied()));
        out.push('\n');
    }
    out
}

pub fn save_concept_model(model: &ConceptModel, path: &Path) -> Result<()> {
    model.validate()?;
    write_string(path, &concept_model_to_string(model))
}

pub fn load_concept_model(path: &Path) -> Result<ConceptModel> {
    let body = read_to_string(path)?;
    let mut lines = Lines::new(path, &body);
    lines.expect_version(CONCEPT_MODEL_VERSION)?;
    let k = lines.keyed_usize("k")?;
    let d = lines.keyed_usize("d")?;
    let space: ConceptSpace = lines.keyed("space")?.parse()?;
    let wcss = lines.keyed_f64("wcss")?;
    let seed = lines.keyed_u64("seed")?;
    if k == 0 {
        return Err(Error::Invalid(format!("{}: concept model has K = 0", path.display())));
    }
    let centroids = read_matrix(&mut lines, k, d)?;
    let model = ConceptModel {
        centroids,
        space,
        wcss,
        seed,
    };
    model.validate()?;
    Ok(model)
}

fn read_matrix(lines: &mut Lines<'_>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut vals = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        vals.extend(lines.row(cols)?);
    }
    Ok(Array2::from_shape_vec((rows, cols), vals).expect("row widths checked"))
}

pub fn mil_to_string(params: &MilParams) -> String {
    let MilDims { d_in, d_h, d_a } = params.dims();
    let mut out = format!("{MIL_MODEL_VERSION}\nd_in {d_in}\nd_h {d_h}\nd_a {d_a}\n");
    let mut block = |name: &str, m: &Array2<f64>| {
        out.push_str(name);
        out.push('\n');
        for r in m.rows() {
            out.push_str(&join_row(r.iter().copied()));
            out.push('\n');
        }
    };
    block("w_proj", &params.w_proj);
    block("b_proj", &params.b_proj.clone().insert_axis(ndarray::Axis(0)));
    block("v", &params.v);
    block("u", &params.u);
    block("w_attn", &params.w_attn.clone().insert_axis(ndarray::Axis(0)));
    block("w_head", &params.w_head.clone().insert_axis(ndarray::Axis(0)));
    out.push_str(&format!("b_head {}\n", fmt_f64(params.b_head)));
    out
}

pub fn save_mil(params: &MilParams, path: &Path) -> Result<()> {
    params.validate()?;
    write_string(path, &mil_to_string(params))
}

pub fn load_mil(path: &Path) -> Result<MilParams> {
    let body = read_to_string(path)?;
    let mut lines = Lines::new(path, &body);
    lines.expect_version(MIL_MODEL_VERSION)?;
    let d_in = lines.keyed_usize("d_in")?;
    let d_h = lines.keyed_usize("d_h")?;
    let d_a = lines.keyed_usize("d_a")?;
    let mut block = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
        let l = lines.next_line()?;
        if l.trim() != name {
            return Err(lines.err(format!("expected block `{name}`, found `{l}`")));
        }
        read_matrix(&mut lines, rows, cols)
    };
    let w_proj = block("w_proj", d_h, d_in)?;
    let b_proj = to_vec(block("b_proj", 1, d_h)?);
    let v = block("v", d_a, d_h)?;
    let u = block("u", d_a, d_h)?;
    let w_attn = to_vec(block("w_attn", 1, d_a)?);
    let w_head = to_vec(block("w_head", 1, d_h)?);
    let b_head = lines.keyed_f64("b_head")?;
    let params = MilParams {
        w_proj,
        b_proj,
        v,
        u,
        w_attn,
        w_head,
        b_head,
    };
    params.validate()?;
    Ok(params)
}

fn to_vec(m: Array2<f64>) -> Array1<f64> {
    m.row(0).to_owned()
}

pub fn classifier_to_string(clf: &RuleClassifier) -> String {
    let bits: Vec<&str> = clf.mask.iter().map(|&b| if b { "1" } else { "0" }).collect();
    format!(
        "{CLASSIFIER_VERSION}\nk {}\nmask {}\ntau {}\ncohort {}\nfold {}\nlabel_kind {}\n",
        clf.k(),
        bits.join(" "),
        fmt_f64(clf.tau),
        if clf.fitted_on.cohort.is_empty() { "-" } else { &clf.fitted_on.cohort },
        clf.fitted_on.fold.map_or("none".to_string(), |f| f.to_string()),
        clf.fitted_on.label_kind,
    )
}

pub fn save_classifier(clf: &RuleClassifier, path: &Path) -> Result<()> {
    clf.validate()?;
    write_string(path, &classifier_to_string(clf))
}

pub fn load_classifier(path: &Path) -> Result<RuleClassifier> {
    let body = read_to_string(path)?;
    let mut lines = Lines::new(path, &body);
    lines.expect_version(CLASSIFIER_VERSION)?;
    let k = lines.keyed_usize("k")?;
    let mask = lines
        .keyed("mask")?
        .split_whitespace()
        .map(|b| match b {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(lines.err(format!("mask bits must be 0 or 1, found `{other}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if mask.len() != k {
        return Err(Error::dims("classifier mask", k, mask.len()));
    }
    let tau = lines.keyed_f64("tau")?;
    let cohort = lines.keyed("cohort")?;
    let fold = match lines.keyed("fold")? {
        "none" => None,
        f => Some(f.parse().map_err(|_| lines.err(format!("bad fold `{f}`")))?),
    };
    let label_kind = lines.keyed("label_kind")?.to_string();
    let clf = RuleClassifier {
        mask,
        tau,
        fitted_on: FitMetadata {
            cohort: if cohort == "-" { String::new() } else { cohort.to_string() },
            fold,
            label_kind,
        },
    };
    clf.validate()?;
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn concept_model_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centroids = Array2::from_shape_fn((10, 8), |_| rng.random::<f64>() * 1e3 - 500.0);
        let model = ConceptModel {
            centroids,
            space: ConceptSpace::AwH,
            wcss: 1.0 / 3.0,
            seed: 42,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        save_concept_model(&model, &p).unwrap();
        assert_eq!(load_concept_model(&p).unwrap(), model);
    }

    #[test]
    fn concept_model_with_zero_k_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, format!("{CONCEPT_MODEL_VERSION}\nk 0\nd 2\nspace raw_h\nwcss 0\nseed 0\n")).unwrap();
        assert_eq!(load_concept_model(&p).unwrap_err().category(), "invalid-input");
        std::fs::write(&p, "conceptmil-concept-model v0\nk 1\n").unwrap();
        assert_eq!(load_concept_model(&p).unwrap_err().category(), "version-mismatch");
    }

    #[test]
    fn mil_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MilParams::init_uniform(MilDims { d_in: 3, d_h: 5, d_a: 2 }, 0.7, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        save_mil(&p, &path).unwrap();
        assert_eq!(load_mil(&path).unwrap(), p);
    }

    #[test]
    fn classifier_round_trip() {
        let clf = RuleClassifier {
            mask: vec![true, false, false, true],
            tau: 0.123_456_789_012_345_68,
            fitted_on: FitMetadata {
                cohort: "tcga".into(),
                fold: Some(3),
                label_kind: "survival".into(),
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.txt");
        save_classifier(&clf, &path).unwrap();
        assert_eq!(load_classifier(&path).unwrap(), clf);
    }
}
