//! Gated-attention MIL backbone with hand-derived gradients.
//!
//! Per tile `x_i`:
//!
//! ```text
//! h_i   = relu(W_proj x_i + b_proj)                      (h-space)
//! a_i   = w_attn . (tanh(V h_i) * sigmoid(U h_i))        (attention logit)
//! at_i  = softmax_i(a)              alpha_i = N * at_i   (mean 1 per slide)
//! z     = sum_i at_i h_i
//! p     = sigmoid(W_head . z + b_head)
//! ```

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Class, Cohort, SlideBag};
use crate::error::{Error, Result};

const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilDims {
    pub d_in: usize,
    pub d_h: usize,
    pub d_a: usize,
}

/// Backbone parameters. Also used as the container for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MilParams {
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
    pub v: Array2<f64>,
    pub u: Array2<f64>,
    pub w_attn: Array1<f64>,
    pub w_head: Array1<f64>,
    pub b_head: f64,
}

impl MilParams {
    pub fn zeros(dims: MilDims) -> Self {
        let MilDims { d_in, d_h, d_a } = dims;
        Self {
            w_proj: Array2::zeros((d_h, d_in)),
            b_proj: Array1::zeros(d_h),
            v: Array2::zeros((d_a, d_h)),
            u: Array2::zeros((d_a, d_h)),
            w_attn: Array1::zeros(d_a),
            w_head: Array1::zeros(d_h),
            b_head: 0.0,
        }
    }

    /// Seeded uniform(-scale, scale) initialization, blocks filled in
    /// declaration order.
    pub fn init_uniform(dims: MilDims, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dims);
        for v in p.values_mut() {
            *v = rng.random_range(-scale..scale);
        }
        p
    }

    pub fn dims(&self) -> MilDims {
        MilDims {
            d_in: self.w_proj.ncols(),
            d_h: self.w_proj.nrows(),
            d_a: self.v.nrows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let MilDims { d_in, d_h, d_a } = self.dims();
        if d_in == 0 || d_h == 0 || d_a == 0 {
            return Err(Error::Invalid("MIL dimensions must be positive".into()));
        }
        let checks = [
            ("b_proj", d_h, self.b_proj.len()),
            ("V columns", d_h, self.v.ncols()),
            ("U rows", d_a, self.u.nrows()),
            ("U columns", d_h, self.u.ncols()),
            ("w_attn", d_a, self.w_attn.len()),
            ("w_head", d_h, self.w_head.len()),
        ];
        for (what, expected, found) in checks {
            if expected != found {
                return Err(Error::dims(format!("MIL parameter {what}"), expected, found));
            }
        }
        if self.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MIL parameters".into()));
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.w_proj.len()
            + self.b_proj.len()
            + self.v.len()
            + self.u.len()
            + self.w_attn.len()
            + self.w_head.len()
            + 1
    }

    /// All scalars in declaration order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w_proj
            .iter()
            .chain(self.b_proj.iter())
            .chain(self.v.iter())
            .chain(self.u.iter())
            .chain(self.w_attn.iter())
            .chain(self.w_head.iter())
            .chain(std::iter::once(&self.b_head))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w_proj
            .iter_mut()
            .chain(self.b_proj.iter_mut())
            .chain(self.v.iter_mut())
            .chain(self.u.iter_mut())
            .chain(self.w_attn.iter_mut())
            .chain(self.w_head.iter_mut())
            .chain(std::iter::once(&mut self.b_head))
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &MilParams) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// N x d_h tile embeddings in the h-space.
    pub h: Array2<f64>,
    pub logits: Array1<f64>,
    pub alpha_norm: Array1<f64>,
    /// `N * alpha_norm`; mean one within the slide.
    pub alpha_rescaled: Array1<f64>,
    pub pooled: Array1<f64>,
    pub head_logit: f64,
    pub prob: f64,
}

struct Cache {
    pre: Array2<f64>,
    gate_t: Array2<f64>,
    gate_s: Array2<f64>,
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Slide-wise softmax (max-subtracted) and its mean-one rescaling.
pub fn softmax_rescaled(logits: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|a| (a - max).exp());
    let total: f64 = e.iter().sum();
    let n = logits.len() as f64;
    // Rescaled form divides last so uniform logits give exactly 1.0.
    (e.mapv(|v| v / total), e.mapv(|v| v * n / total))
}

pub fn forward(params: &MilParams, bag: &SlideBag) -> Result<ForwardOutput> {
    forward_x(params, bag.x())
}

pub fn forward_x(params: &MilParams, x: ArrayView2<'_, f64>) -> Result<ForwardOutput> {
    forward_cached(params, x).map(|(out, _)| out)
}

fn forward_cached(params: &MilParams, x: ArrayView2<'_, f64>) -> Result<(ForwardOutput, Cache)> {
    let dims = params.dims();
    if x.ncols() != dims.d_in {
        return Err(Error::dims("MIL input", dims.d_in, x.ncols()));
    }
    if x.nrows() == 0 {
        return Err(Error::Invalid("MIL forward on an empty bag".into()));
    }
    let pre = x.dot(&params.w_proj.t()) + &params.b_proj;
    let h = pre.mapv(relu);
    let gate_t = h.dot(&params.v.t()).mapv(f64::tanh);
    let gate_s = h.dot(&params.u.t()).mapv(sigmoid);
    let logits = (&gate_t * &gate_s).dot(&params.w_attn);
    let (alpha_norm, alpha_rescaled) = softmax_rescaled(&logits);
    let pooled = alpha_norm.dot(&h);
    let head_logit = params.w_head.dot(&pooled) + params.b_head;
    let prob = sigmoid(head_logit);

    if !head_logit.is_finite() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in MIL forward pass".into()));
    }
    Ok((
        ForwardOutput {
            h,
            logits,
            alpha_norm,
            alpha_rescaled,
            pooled,
            head_logit,
            prob,
        },
        Cache { pre, gate_t, gate_s },
    ))
}

pub fn bce(prob: f64, label: Class) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label.is_positive() {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Binary cross-entropy of the bag prediction and its exact gradient.
pub fn loss_and_grad(params: &MilParams, bag: &SlideBag) -> Result<(f64, MilParams)> {
    let label = bag.label.ok_or_else(|| {
        Error::MissingLabels(format!("slide `{}` has no label", bag.slide_id))
    })?;
    loss_and_grad_x(params, bag.x(), label)
}

pub fn loss_and_grad_x(
    params: &MilParams,
    x: ArrayView2<'_, f64>,
    label: Class,
) -> Result<(f64, MilParams)> {
    let (out, cache) = forward_cached(params, x)?;
    let y = if label.is_positive() { 1.0 } else { 0.0 };
    let loss = bce(out.prob, label);
    let clamped = out.prob < PROB_CLAMP || out.prob > 1.0 - PROB_CLAMP;
    let d_logit = if clamped { 0.0 } else { out.prob - y };

    let mut g = MilParams::zeros(params.dims());
    g.b_head = d_logit;
    g.w_head = &out.pooled * d_logit;
    let d_pooled = &params.w_head * d_logit;

    // through the softmax
    let d_alpha = out.h.dot(&d_pooled);
    let mean = out.alpha_norm.dot(&d_alpha);
    let d_logits = &out.alpha_norm * &(d_alpha - mean);

    // pooling path into h
    let mut d_h = Array2::zeros(out.h.raw_dim());
    Zip::from(d_h.rows_mut())
        .and(&out.alpha_norm)
        .for_each(|mut row, &a| row.assign(&(&d_pooled * a)));

    // attention branch
    let gated = &cache.gate_t * &cache.gate_s;
    g.w_attn = gated.t().dot(&d_logits);
    let d_gated = outer(&d_logits, &params.w_attn);
    let d_pre_t = &d_gated * &cache.gate_s * &cache.gate_t.mapv(|t| 1.0 - t * t);
    let d_pre_s = &d_gated * &cache.gate_t * &cache.gate_s.mapv(|s| s * (1.0 - s));
    g.v = d_pre_t.t().dot(&out.h);
    g.u = d_pre_s.t().dot(&out.h);
    d_h = d_h + d_pre_t.dot(&params.v) + d_pre_s.dot(&params.u);

    // projection; relu subgradient at 0 is 0
    Zip::from(&mut d_h).and(&cache.pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    g.w_proj = d_h.t().dot(&x);
    g.b_proj = d_h.sum_axis(Axis(0));

    if !loss.is_finite() || g.values().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok((loss, g))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d_h: usize,
    pub d_a: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_h: 512,
            d_a: 128,
            learning_rate: 1e-3,
            epochs: 20,
            init_scale: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MilModel {
    pub params: MilParams,
    /// Mean per-slide loss of each epoch, accumulated during the epoch.
    pub epoch_losses: Vec<f64>,
}

/// Per-slide SGD over the labeled slides in a seeded shuffled order.
pub fn train(cohort: &Cohort, config: &TrainConfig) -> Result<MilModel> {
    let labeled: Vec<usize> = cohort.labeled_indices();
    let counts = cohort.class_counts();
    if counts.len() < 2 {
        return Err(Error::SingleClass(
            "MIL training needs at least one labeled slide per class".into(),
        ));
    }
    if config.d_h == 0 || config.d_a == 0 {
        return Err(Error::Invalid("d_h and d_a must be positive".into()));
    }
    let dims = MilDims {
        d_in: cohort.d_in,
        d_h: config.d_h,
        d_a: config.d_a,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = MilParams::init_uniform(dims, config.init_scale, &mut rng);
    let mut order = labeled;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grad) = loss_and_grad(&params, &cohort.slides[i])?;
            total += loss;
            params.add_scaled(-config.learning_rate, &grad);
        }
        epoch_losses.push(total / order.len() as f64);
    }
    params.validate()?;
    Ok(MilModel {
        params,
        epoch_losses,
    })
}

/// Fraction of labeled slides whose thresholded probability matches the label.
pub fn accuracy(params: &MilParams, cohort: &Cohort) -> Result<f64> {
    let mut hit = 0usize;
    let mut n = 0usize;
    for s in cohort.slides.iter().filter(|s| s.label.is_some()) {
        let p = forward(params, s)?.prob;
        n += 1;
        if Class::from_bool(p >= 0.5) == s.label.unwrap() {
            hit += 1;
        }
    }
    Ok(hit as f64 / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelKind, TileRecord};
    use ndarray::array;

    fn bag_from(x: Array2<f64>, label: Option<Class>) -> SlideBag {
        let tiles = (0..x.nrows())
            .map(|i| TileRecord {
                tile_id: i as u64,
                row: 0,
                col: i as u32,
            })
            .collect();
        SlideBag::new("s", label, LabelKind::Hpv, "c", tiles, x).unwrap()
    }

    #[test]
    fn identical_tiles_get_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MilParams::init_uniform(MilDims { d_in: 3, d_h: 4, d_a: 2 }, 0.5, &mut rng);
        let x = array![[0.3, -1.0, 2.0], [0.3, -1.0, 2.0], [0.3, -1.0, 2.0]];
        let out = forward_x(&p, x.view()).unwrap();
        for (&a, &r) in out.alpha_norm.iter().zip(&out.alpha_rescaled) {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(r, 1.0);
        }
    }

    /// Hand-evaluated forward pass for D_in = d_h = d_a = 2, N = 2.
    #[test]
    fn hand_computed_forward() {
        let p = MilParams {
            w_proj: array![[1.0, 0.0], [0.5, -1.0]],
            b_proj: array![0.0, 0.5],
            v: array![[1.0, 0.0], [0.0, 1.0]],
            u: array![[0.0, 0.0], [1.0, 1.0]],
            w_attn: array![1.0, -1.0],
            w_head: array![2.0, -1.0],
            b_head: -0.5,
        };
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let out = forward_x(&p, x.view()).unwrap();
        // tile 0: pre = (1, 1), h = (1, 1)
        //   a = tanh(1)*0.5 - tanh(1)*sigmoid(2)
        // tile 1: pre = (0, -0.5), h = (0, 0) -> a = 0
        let t1 = 1f64.tanh();
        let s2 = 1.0 / (1.0 + (-2f64).exp());
        let a0 = t1 * 0.5 - t1 * s2;
        assert!((out.logits[0] - a0).abs() < 1e-15);
        assert_eq!(out.logits[1], 0.0);
        let w0 = a0.exp() / (a0.exp() + 1.0);
        // z = w0 * (1, 1); logit = 2 w0 - w0 - 0.5
        let prob = 1.0 / (1.0 + (-(w0 - 0.5)).exp());
        assert!((out.prob - prob).abs() < 1e-15, "{} vs {prob}", out.prob);
    }

    #[test]
    fn zero_params_give_log_two() {
        let p = MilParams::zeros(MilDims { d_in: 2, d_h: 3, d_a: 2 });
        let b = bag_from(array![[1.0, 2.0], [3.0, -1.0]], Some(Class::Positive));
        let (loss, _) = loss_and_grad(&p, &b).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_prediction_has_no_gradient() {
        let mut p = MilParams::zeros(MilDims { d_in: 2, d_h: 2, d_a: 2 });
        p.b_head = 40.0;
        let b = bag_from(array![[1.0, 2.0], [3.0, -1.0]], Some(Class::Positive));
        let (loss, g) = loss_and_grad(&p, &b).unwrap();
        assert!(loss < 1e-11);
        assert!(g.norm() < 1e-11);
    }

    #[test]
    fn unlabeled_bag_is_rejected() {
        let p = MilParams::zeros(MilDims { d_in: 2, d_h: 2, d_a: 2 });
        let b = bag_from(array![[1.0, 2.0]], None);
        assert_eq!(loss_and_grad(&p, &b).unwrap_err().category(), "missing-labels");
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let p = MilParams::zeros(MilDims { d_in: 3, d_h: 2, d_a: 2 });
        let x = array![[1.0, 2.0]];
        assert_eq!(
            forward_x(&p, x.view()).unwrap_err().category(),
            "dimension-mismatch"
        );
    }
}
