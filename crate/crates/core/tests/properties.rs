use conceptmil::classifier::{self, RuleClassifier};
use conceptmil::concepts::{ConceptAssignment, ConceptModel, ConceptSpace};
use conceptmil::data::{ConceptFractionVector, FractionMode};
use conceptmil::fractions;
use conceptmil::kmeans::{self, KMeansConfig};
use conceptmil::metrics::{self, MetricsVector};
use conceptmil::mil::{self, MilDims, MilParams};
use conceptmil::{persist, Class, FitMetadata};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c))
}

fn class(b: bool) -> Class {
    Class::from_bool(b)
}

fn brute_auc(scores: &[f64], labels: &[Class]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if li.is_positive() && !lj.is_positive() {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn params(seed: u64, d_in: usize, d_h: usize, d_a: usize) -> MilParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MilParams::init_uniform(MilDims { d_in, d_h, d_a }, 0.8, &mut rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_sums_to_one_and_keeps_logit_order(logits in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let l = Array1::from(logits.clone());
        let (norm, rescaled) = mil::softmax_rescaled(&l);
        prop_assert!((norm.sum() - 1.0).abs() < 1e-12);
        prop_assert!((rescaled.mean().unwrap() - 1.0).abs() < 1e-12);
        for i in 0..logits.len() {
            for j in 0..logits.len() {
                if logits[i] < logits[j] {
                    prop_assert!(norm[i] <= norm[j]);
                }
            }
        }
        let (shifted, _) = mil::softmax_rescaled(&(&l + 17.0));
        for (a, b) in norm.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences(
        seed in any::<u64>(),
        x in sized_matrix(6, 4),
        positive in any::<bool>(),
    ) {
        let p = params(seed, x.ncols(), 3, 2);
        let label = class(positive);
        let (_, grad) = mil::loss_and_grad_x(&p, x.view(), label).unwrap();
        let analytic: Vec<f64> = grad.values().copied().collect();
        let h = 1e-5;
        for (idx, g) in analytic.iter().enumerate() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            *plus.values_mut().nth(idx).unwrap() += h;
            *minus.values_mut().nth(idx).unwrap() -= h;
            let fp = mil::loss_and_grad_x(&plus, x.view(), label).unwrap().0;
            let fm = mil::loss_and_grad_x(&minus, x.view(), label).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            // kinks of the ReLU make the difference quotient meaningless nearby
            let pre = x.dot(&p.w_proj.t()) + &p.b_proj;
            if pre.iter().any(|v| v.abs() < 1e-3) {
                continue;
            }
            let scale = g.abs().max(fd.abs()).max(1e-6);
            prop_assert!((g - fd).abs() / scale < 1e-4, "coord {idx}: {g} vs {fd}");
        }
    }

    #[test]
    fn lloyd_trace_never_increases(x in sized_matrix(40, 3), k in 1usize..5, seed in any::<u64>()) {
        let k = k.min(x.nrows());
        let config = KMeansConfig { seed, ..KMeansConfig::default() };
        let fit = kmeans::fit(x.view(), None, k, &config).unwrap();
        for w in fit.trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        let ones = vec![1.0; x.nrows()];
        let direct = kmeans::weighted_wcss(x.view(), &ones, fit.centroids.view(), &fit.assignments);
        prop_assert!((direct - fit.wcss).abs() <= 1e-9 * direct.max(1.0));
    }

    #[test]
    fn kmeans_ignores_power_of_two_scaling(x in sized_matrix(30, 3), k in 1usize..4, seed in any::<u64>()) {
        let k = k.min(x.nrows());
        let config = KMeansConfig { seed, ..KMeansConfig::default() };
        let a = kmeans::fit(x.view(), None, k, &config).unwrap();
        let scaled = &x * 4.0;
        let b = kmeans::fit(scaled.view(), None, k, &config).unwrap();
        prop_assert_eq!(a.assignments, b.assignments);
        let w4: Vec<f64> = vec![4.0; x.nrows()];
        let c = kmeans::fit(x.view(), Some(&w4), k, &config).unwrap();
        let w1: Vec<f64> = vec![1.0; x.nrows()];
        let d = kmeans::fit(x.view(), Some(&w1), k, &config).unwrap();
        prop_assert_eq!(c.assignments, d.assignments);
    }

    #[test]
    fn fast_assignment_equals_brute_force(c in sized_matrix(12, 5), seed in any::<u64>(), n in 1usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, c.ncols()), |_| rand::Rng::random_range(&mut rng, -3.0..3.0));
        let fast = kmeans::nearest_all(c.view(), x.view());
        for (row, got) in x.rows().into_iter().zip(fast) {
            prop_assert_eq!(got, kmeans::nearest(c.view(), row));
        }
    }

    #[test]
    fn fractions_live_on_the_simplex(
        a in prop::collection::vec(0usize..6, 1..60),
        w in prop::collection::vec(0.01f64..5.0, 60),
    ) {
        let asg = ConceptAssignment { slide_id: "s".into(), k: 6, assignments: a.clone() };
        let alpha = &w[..a.len()];
        for (mode, al) in [(FractionMode::Raw, None), (FractionMode::AttentionWeighted, Some(alpha))] {
            let f = fractions::fractions(&asg, al, mode).unwrap();
            prop_assert!((f.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(f.fractions.iter().all(|v| *v >= 0.0));
        }
        let ones = vec![1.0; a.len()];
        let aw = fractions::fractions(&asg, Some(&ones), FractionMode::AttentionWeighted).unwrap();
        let raw = fractions::fractions(&asg, None, FractionMode::Raw).unwrap();
        prop_assert_eq!(aw.fractions, raw.fractions);
    }

    #[test]
    fn auc_matches_pair_counting(items in prop::collection::vec((0u8..8, any::<bool>()), 1..50)) {
        let scores: Vec<f64> = items.iter().map(|(s, _)| *s as f64 / 8.0).collect();
        let labels: Vec<Class> = items.iter().map(|(_, l)| class(*l)).collect();
        prop_assert_eq!(metrics::auc(&scores, &labels), brute_auc(&scores, &labels));
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0).collect();
        prop_assert_eq!(metrics::auc(&cubed, &labels), metrics::auc(&scores, &labels));
    }

    #[test]
    fn recovery_is_symmetric_and_bounded(a in prop::collection::vec(0.0f64..1.0, 6), b in prop::collection::vec(0.0f64..1.0, 6)) {
        let mv = |v: &[f64]| MetricsVector {
            acc: v[0], auc: Some(v[1]), prec: Some(v[2]), rec: Some(v[3]), spec: Some(v[4]), f1: Some(v[5]),
            n: 10, single_class: false,
        };
        let (x, y) = (mv(&a), mv(&b));
        let r1 = metrics::recovery(&x, &y).unwrap();
        let r2 = metrics::recovery(&y, &x).unwrap();
        prop_assert_eq!(r1, r2);
        prop_assert!(r1.s > 0.0 && r1.s <= 1.0);
        prop_assert_eq!(metrics::recovery(&x, &x).unwrap().s, 1.0);
    }

    #[test]
    fn ari_is_symmetric_and_label_invariant(a in prop::collection::vec(0usize..4, 2..40), perm in Just([3usize, 0, 2, 1])) {
        let b: Vec<usize> = a.iter().map(|&v| (v + 1) % 4).collect();
        prop_assert!((metrics::adjusted_rand_index(&a, &b).unwrap() - metrics::adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
        let relabeled: Vec<usize> = a.iter().map(|&v| perm[v]).collect();
        prop_assert!((metrics::adjusted_rand_index(&a, &relabeled).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rule_fit_ignores_training_order(
        rows in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 4), any::<bool>()), 4..30),
        rot in 0usize..30,
    ) {
        let mut train: Vec<(ConceptFractionVector, Class)> = rows
            .iter()
            .map(|(f, l)| {
                let s: f64 = f.iter().sum::<f64>().max(1e-9);
                let v = ConceptFractionVector { fractions: f.iter().map(|x| x / s).collect(), weighting: FractionMode::Raw };
                (v, class(*l))
            })
            .collect();
        let pos = train.iter().filter(|(_, c)| c.is_positive()).count();
        prop_assume!(pos > 0 && pos < train.len());
        let a = classifier::fit_rule(&train).unwrap();
        let r = rot % train.len();
        train.rotate_left(r);
        let b = classifier::fit_rule(&train).unwrap();
        prop_assert_eq!(&a.mask, &b.mask);
        prop_assert!((a.tau - b.tau).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.tau));
    }

    #[test]
    fn model_files_round_trip_bit_for_bit(seed in any::<u64>(), c in sized_matrix(6, 5), tau in 0.0f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let model = ConceptModel { centroids: c.clone(), space: ConceptSpace::RawH, wcss: 1.25, seed };
        let path = dir.path().join("c.txt");
        persist::save_concept_model(&model, &path).unwrap();
        prop_assert_eq!(persist::load_concept_model(&path).unwrap(), model);

        let p = params(seed, 3, 4, 2);
        let path = dir.path().join("m.txt");
        persist::save_mil(&p, &path).unwrap();
        prop_assert_eq!(persist::load_mil(&path).unwrap(), p);

        let clf = RuleClassifier {
            mask: (0..c.nrows()).map(|i| (seed >> i) & 1 == 1).collect(),
            tau,
            fitted_on: FitMetadata { cohort: "c1".into(), fold: Some(2), label_kind: "hpv".into() },
        };
        let path = dir.path().join("r.txt");
        persist::save_classifier(&clf, &path).unwrap();
        prop_assert_eq!(persist::load_classifier(&path).unwrap(), clf);
    }
}
