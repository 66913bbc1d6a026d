//! Plain-text tables: comma-separated with a header row, floats printed with
//! full round-trip precision and `NA` for undefined values.

use std::fmt::Write as _;
use std::path::Path;

use crate::concepts::{ConceptAssignment, ElbowCurve};
use crate::data::{Class, ConceptFractionVector};
use crate::error::{Error, Result};
use crate::eval::{MethodReport, SlidePrediction};
use crate::fractions::ClassAveragedFractions;
use crate::metrics::{Metric, RecoveryScore};
use crate::mil::ForwardOutput;
use crate::render::RepresentativeTile;
use crate::metrics::MetricsVector;
use crate::text::{fmt_f64, fmt_opt, parse_f64, read_to_string, write_string};

fn label_str(c: Option<Class>) -> &'static str {
    c.map_or("NA", Class::as_str)
}

pub fn write_table(path: &Path, body: &str) -> Result<()> {
    write_string(path, body)
}

pub fn assignments_table(rows: &[(ConceptAssignment, Vec<u64>)]) -> String {
    let mut s = String::from("slide_id,tile_id,concept\n");
    for (a, tile_ids) in rows {
        for (t, c) in tile_ids.iter().zip(&a.assignments) {
            let _ = writeln!(s, "{},{t},{c}", a.slide_id);
        }
    }
    s
}

pub fn elbow_table(curve: &ElbowCurve) -> String {
    let mut s = String::from("k,wcss,selected\n");
    for &(k, w) in &curve.points {
        let _ = writeln!(s, "{k},{},{}", fmt_f64(w), u8::from(k == curve.selected));
    }
    s
}

pub fn fractions_table(rows: &[(String, ConceptFractionVector)]) -> String {
    let k = rows.first().map_or(0, |(_, v)| v.k());
    let mut s = String::from("slide_id,mode");
    for j in 0..k {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for (id, v) in rows {
        let _ = write!(s, "{id},{}", v.weighting.as_str());
        for f in &v.fractions {
            let _ = write!(s, ",{}", fmt_f64(*f));
        }
        s.push('\n');
    }
    s
}

pub fn class_average_table(avg: &ClassAveragedFractions) -> String {
    let mut s = String::from("class,concept,mean,ci_low,ci_high,n_slides\n");
    for (class, p) in &avg.classes {
        for j in 0..avg.k {
            let _ = writeln!(
                s,
                "{class},{j},{},{},{},{}",
                fmt_f64(p.mean[j]),
                fmt_f64(p.ci_low[j]),
                fmt_f64(p.ci_high[j]),
                p.n_slides
            );
        }
    }
    s
}

pub fn predictions_table(preds: &[SlidePrediction]) -> String {
    let mut s = String::from("slide_id,score,pred,label\n");
    for p in preds {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            p.slide_id,
            fmt_f64(p.score),
            p.pred,
            label_str(p.label)
        );
    }
    s
}

/// Per-fold rows followed by `mean` and `sd` rows for every method.
pub fn metrics_table(reports: &[MethodReport]) -> String {
    let mut s = String::from("method,fold,n");
    for m in Metric::ALL {
        let _ = write!(s, ",{}", m.name());
    }
    s.push('\n');
    for r in reports {
        for f in &r.folds {
            let _ = write!(s, "{},{},{}", r.method, f.fold, f.metrics.n);
            for m in Metric::ALL {
                let _ = write!(s, ",{}", fmt_opt(f.metrics.get(m)));
            }
            s.push('\n');
        }
        for (row, pick) in [("mean", 0), ("sd", 1)] {
            let _ = write!(s, "{},{row},{}", r.method, r.folds.len());
            for m in Metric::ALL {
                let v = r
                    .stat(m)
                    .and_then(|st| if pick == 0 { Some(st.mean) } else { st.sd });
                let _ = write!(s, ",{}", fmt_opt(v));
            }
            s.push('\n');
        }
    }
    s
}

/// One per-fold row of a metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldRow {
    pub method: String,
    pub fold: usize,
    pub metrics: MetricsVector,
}

/// Per-fold rows of a table written by [`metrics_table`]; the `mean` and
/// `sd` summary rows are skipped.
pub fn read_metrics_table(path: &Path) -> Result<Vec<FoldRow>> {
    let body = read_to_string(path)?;
    let mut lines = body.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    let mut expected = String::from("method,fold,n");
    for m in Metric::ALL {
        expected.push(',');
        expected.push_str(m.name());
    }
    if header != expected {
        return Err(Error::parse(path, 1, format!("expected header `{expected}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 + Metric::ALL.len() {
            return Err(Error::parse(path, ln, format!("expected {} cells", 3 + Metric::ALL.len())));
        }
        let Ok(fold) = cells[1].parse::<usize>() else {
            continue;
        };
        let n = cells[2]
            .parse::<usize>()
            .map_err(|e| Error::parse(path, ln, format!("bad count `{}`: {e}", cells[2])))?;
        let mut vals = [None; 6];
        for (v, c) in vals.iter_mut().zip(&cells[3..]) {
            if *c != "NA" {
                *v = Some(parse_f64(c, path, ln)?);
            }
        }
        let acc = vals[0].ok_or_else(|| Error::parse(path, ln, "accuracy is NA"))?;
        rows.push(FoldRow {
            method: cells[0].to_string(),
            fold,
            metrics: MetricsVector {
                acc,
                auc: vals[1],
                prec: vals[2],
                rec: vals[3],
                spec: vals[4],
                f1: vals[5],
                n,
                single_class: vals[1].is_none(),
            },
        });
    }
    Ok(rows)
}

pub fn recovery_table(method: &str, scores: &[RecoveryScore]) -> String {
    let mut s = String::from("method,fold,d,s\n");
    for (f, r) in scores.iter().enumerate() {
        let _ = writeln!(s, "{method},{f},{},{}", fmt_f64(r.d), fmt_f64(r.s));
    }
    s
}

pub fn attention_table(tile_ids: &[u64], out: &ForwardOutput) -> String {
    let mut s = String::from("tile_id,logit,alpha_norm,alpha_rescaled\n");
    for (i, t) in tile_ids.iter().enumerate() {
        let _ = writeln!(
            s,
            "{t},{},{},{}",
            fmt_f64(out.logits[i]),
            fmt_f64(out.alpha_norm[i]),
            fmt_f64(out.alpha_rescaled[i])
        );
    }
    s
}

pub fn representative_table(tiles: &[RepresentativeTile]) -> String {
    let mut s = String::from("concept,rank,slide_id,tile_id,distance\n");
    for t in tiles {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            t.concept,
            t.rank,
            t.slide_id,
            t.tile_id,
            fmt_f64(t.distance)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricsVector;
    use crate::eval::FoldOutcome;

    #[test]
    fn metrics_table_marks_undefined_as_na() {
        let mv = MetricsVector {
            acc: 1.0,
            auc: None,
            prec: None,
            rec: None,
            spec: None,
            f1: None,
            n: 3,
            single_class: true,
        };
        let r = MethodReport {
            method: "aw_h".into(),
            folds: vec![FoldOutcome {
                fold: 0,
                metrics: mv,
                predictions: vec![],
                bundle: None,
            }],
            summary: crate::metrics::aggregate_folds(&[mv]).unwrap(),
        };
        let t = metrics_table(&[r]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "method,fold,n,acc,auc,prec,rec,spec,f1");
        assert!(lines[1].ends_with(",NA,NA,NA,NA,NA"));
        assert!(lines[3].starts_with("aw_h,sd,1,NA"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_table(&path, &t).unwrap();
        let rows = read_metrics_table(&path).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].metrics, mv);
    }
}
