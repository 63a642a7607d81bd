use std::collections::{BTreeMap, HashSet};

use genclass::conditioning::{ConditioningLayout, ConditioningMatrix};
use genclass::counterfactual::delta_adjust;
use genclass::data::{
    augment, augment_image, kfold_split, save_image, subsample_per_class, Annotation, AugmentationSpec, ColorJitter,
    ConfidenceLevel, DatasetManifest, ManifestRecord, Split,
};
use genclass::evaluation::{
    balanced_accuracy, confidence_confusion_matrix, majority_vote, pairwise_levels, turing_metrics, wilson_interval,
    Judgment, Z_95,
};
use genclass::uncertainty::confidence::{model_confidence, normalize_confidences};
use genclass::{LatentTensor, Space};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn level(i: u8) -> ConfidenceLevel {
    ConfidenceLevel::ALL[(i % 4) as usize]
}

fn arb_record() -> impl Strategy<Value = (u8, u8, Vec<(u8, u8, u8)>)> {
    (0u8..3, 0u8..3, prop::collection::vec((0u8..5, 0u8..3, 0u8..4), 0..4))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn manifest_save_load_round_trip(recs in prop::collection::vec(arb_record(), 1..12)) {
        let dir = tempfile::tempdir().unwrap();
        let img = LatentTensor::zeros((1, 2, 2), Space::Pixel);
        let classes = ["alpha", "beta", "gamma"];
        let splits = [Split::Train, Split::Val, Split::Test];
        let records: Vec<ManifestRecord> = recs
            .iter()
            .enumerate()
            .map(|(i, (label, split, anns))| {
                let path = format!("img/{i}.png");
                save_image(&img, &dir.path().join(&path)).unwrap();
                ManifestRecord {
                    path,
                    label: classes[*label as usize].to_string(),
                    split: splits[*split as usize],
                    annotations: anns
                        .iter()
                        .map(|(r, l, c)| Annotation {
                            rater_id: format!("rater{r}"),
                            label: classes[*l as usize].to_string(),
                            confidence: level(*c),
                        })
                        .collect(),
                }
            })
            .collect();
        let m = DatasetManifest::new(dir.path(), records).unwrap();
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn augmentation_preserves_shape_and_range(
        seed in any::<u64>(),
        channels in prop::sample::select(vec![1usize, 3]),
        flips in any::<bool>(),
        rot in 0.0f64..360.0,
        jitter in 0.0f64..1.0,
        hue in 0.0f64..0.5,
        policy in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = LatentTensor::standard_normal((channels, 9, 7), Space::Pixel, &mut rng);
        let img = LatentTensor::from_vec(
            img.shape(),
            img.as_slice().iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            Space::Pixel,
        )
        .unwrap();
        let spec = AugmentationSpec {
            flips,
            rotation_degrees: rot,
            color_jitter: ColorJitter { brightness: jitter, contrast: jitter, saturation: jitter, hue },
            policy_augment: policy,
            ..AugmentationSpec::default()
        };
        let out = augment_image(&img, &spec, &mut rng);
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn mixup_never_leaves_the_simplex(seed in any::<u64>(), a in 0usize..4, b in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = ConditioningLayout::for_classes(4);
        let (ca, cb) = (ConditioningMatrix::one_hot(a, layout).unwrap(), ConditioningMatrix::one_hot(b, layout).unwrap());
        let img = LatentTensor::zeros((1, 4, 4), Space::Pixel);
        let spec = AugmentationSpec { mixup_alpha: 0.3, mixup_prob: 1.0, ..AugmentationSpec::none() };
        let (_, c, lambda) = augment(&img, &ca, Some((&img, &cb)), &spec, &mut rng).unwrap();
        prop_assert!((0.0..=1.0).contains(&lambda));
        for row in c.matrix().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
        prop_assert_eq!(ca.mix(&cb, 1.0).unwrap(), ca.clone());
    }

    #[test]
    fn model_confidence_invariances(errs in prop::collection::vec(0.0f64..10.0, 2..10), shift in -5.0f64..5.0, rot in 0usize..10) {
        let c = model_confidence(&errs).unwrap();
        prop_assert!(c >= 0.0);
        let mut rotated = errs.clone();
        rotated.rotate_left(rot % errs.len());
        prop_assert_eq!(model_confidence(&rotated).unwrap(), c);
        let shifted: Vec<f64> = errs.iter().map(|e| e + shift).collect();
        prop_assert!((model_confidence(&shifted).unwrap() - c).abs() < 1e-9);
        let norm = normalize_confidences(&errs).unwrap();
        prop_assert!(norm.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn balanced_accuracy_ignores_class_duplication(
        items in prop::collection::vec((0usize..3, 0usize..3), 3..40),
        dup in 0usize..3,
        times in 1usize..4,
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = items.iter().copied().unzip();
        prop_assume!((0..3).all(|c| labels.contains(&c)));
        let base = balanced_accuracy(&preds, &labels, 3).unwrap();
        let mut p2 = preds.clone();
        let mut l2 = labels.clone();
        for _ in 0..times {
            for (p, l) in items.iter().filter(|(_, l)| *l == dup) {
                p2.push(*p);
                l2.push(*l);
            }
        }
        prop_assert!((balanced_accuracy(&p2, &l2, 3).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn turing_accuracy_decomposes(rows in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let js: Vec<Judgment> = rows
            .iter()
            .enumerate()
            .map(|(i, (truth, guess))| Judgment {
                item_id: i.to_string(),
                rater_id: None,
                truth_is_real: Some(*truth),
                guessed_real: *guess,
                intended_class: None,
                guessed_class: None,
            })
            .collect();
        let r = turing_metrics(&js).unwrap();
        let sens = r.sensitivity.unwrap_or(0.0) * r.n_real as f64;
        let spec = r.specificity.unwrap_or(0.0) * r.n_synthetic as f64;
        prop_assert!(((sens + spec) / r.n as f64 - r.accuracy).abs() < 1e-12);
        prop_assert!(r.ci95.0 <= r.accuracy && r.accuracy <= r.ci95.1);
        prop_assert!(r.ci95.0 >= 0.0 && r.ci95.1 <= 1.0);
    }

    #[test]
    fn wilson_contains_point_estimate(n in 1u64..5000, frac in 0.0f64..=1.0) {
        let s = (frac * n as f64).floor() as u64;
        let (lo, hi) = wilson_interval(s, n, Z_95).unwrap();
        let p = s as f64 / n as f64;
        prop_assert!(lo <= p + 1e-15 && p <= hi + 1e-15);
    }

    #[test]
    fn delta_for_predicted_class_is_exactly_zero(vals in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 6), 2..5), pick in 0usize..5) {
        let deltas: BTreeMap<usize, LatentTensor> = vals
            .iter()
            .enumerate()
            .map(|(c, v)| (c, LatentTensor::from_vec((1, 2, 3), v.clone(), Space::Latent).unwrap()))
            .collect();
        let predicted = pick % vals.len();
        let adj = delta_adjust(&deltas, predicted).unwrap();
        prop_assert!(adj[&predicted].as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn confidence_matrix_total_is_pair_count(items in 1usize..30, raters in 2usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for _ in 0..items {
            let anns: Vec<Annotation> = (0..raters)
                .map(|r| Annotation {
                    rater_id: r.to_string(),
                    label: "x".into(),
                    confidence: level(rand::Rng::random_range(&mut rng, 0..4)),
                })
                .collect();
            pairs.extend(pairwise_levels(&anns));
        }
        let m = confidence_confusion_matrix(&pairs);
        let expected = (items * raters * (raters - 1) / 2) as u64;
        prop_assert_eq!(m.total, expected);
        prop_assert_eq!(m.counts.iter().flatten().sum::<u64>(), expected);
        for i in 0..4 {
            for j in 0..4 {
                prop_assert_eq!(m.display[i][j], m.display[j][i]);
            }
        }
    }
}

#[test]
fn labeller_study_pair_count() {
    let anns: Vec<Annotation> = (0..6)
        .map(|r| Annotation {
            rater_id: r.to_string(),
            label: "x".into(),
            confidence: ConfidenceLevel::High,
        })
        .collect();
    let pairs: Vec<_> = (0..200).flat_map(|_| pairwise_levels(&anns)).collect();
    let m = confidence_confusion_matrix(&pairs);
    assert_eq!(m.total, 3000);
    assert_eq!(m.counts[0][0], 3000);
}

#[test]
fn majority_vote_examples() {
    let v = |xs: &[(&str, f64)]| xs.iter().map(|(a, b)| (a.to_string(), *b)).collect::<Vec<_>>();
    assert_eq!(majority_vote(&v(&[("A", 1.0), ("A", 1.0), ("A", 1.0)])).unwrap(), "A");
    assert_eq!(majority_vote(&v(&[("A", 3.0), ("A", 1.0), ("B", 40.0)])).unwrap(), "A");
    assert_eq!(majority_vote(&v(&[("A", 5.0), ("B", 34.0)])).unwrap(), "B");
}

/// Mean of Beta(0.3, 0.3) mixing weights over 1e5 draws.
#[test]
fn mixup_lambda_mean_is_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let layout = ConditioningLayout::for_classes(2);
    let (a, b) = (ConditioningMatrix::one_hot(0, layout).unwrap(), ConditioningMatrix::one_hot(1, layout).unwrap());
    let img = LatentTensor::zeros((1, 2, 2), Space::Pixel);
    let spec = AugmentationSpec {
        mixup_alpha: 0.3,
        mixup_prob: 1.0,
        ..AugmentationSpec::none()
    };
    let n = 100_000;
    let mut sum = 0.0;
    for _ in 0..n {
        sum += augment(&img, &a, Some((&img, &b)), &spec, &mut rng).unwrap().2;
    }
    let alpha: f64 = 0.3;
    let sd = (alpha * alpha / ((2.0 * alpha).powi(2) * (2.0 * alpha + 1.0))).sqrt();
    let mean = sum / n as f64;
    assert!((mean - 0.5).abs() < 3.0 * sd / (n as f64).sqrt(), "mean {mean}");
}

#[test]
fn subsample_overlap_matches_hypergeometric() {
    let labels = vec![0usize; 1000];
    let n = 100;
    let a: HashSet<usize> = subsample_per_class(&labels, n, 1).unwrap().into_iter().collect();
    let b: HashSet<usize> = subsample_per_class(&labels, n, 2).unwrap().into_iter().collect();
    assert_eq!(subsample_per_class(&labels, n, 1).unwrap().len(), n);
    let overlap = a.intersection(&b).count() as f64;
    let (nn, big) = (n as f64, 1000.0);
    let mean = nn * nn / big;
    let var = nn * (nn / big) * ((big - nn) / big) * ((big - nn) / (big - 1.0));
    assert!((overlap - mean).abs() <= 3.0 * var.sqrt(), "overlap {overlap}");
    let full: Vec<usize> = subsample_per_class(&labels, 1000, 5).unwrap();
    assert_eq!(full, (0..1000).collect::<Vec<_>>());
}

#[test]
fn kfold_is_stratified() {
    let labels: Vec<usize> = (0..100).map(|i| if i < 60 { 0 } else if i < 90 { 1 } else { 2 }).collect();
    let folds = kfold_split(&labels, 4, 3).unwrap();
    let mut seen = vec![0; 100];
    for f in &folds {
        assert_eq!(f.test.len(), 25);
        for c in 0..3 {
            let in_fold = f.test.iter().filter(|&&i| labels[i] == c).count() as f64;
            let expect = labels.iter().filter(|&&l| l == c).count() as f64 / 4.0;
            assert!((in_fold - expect).abs() <= 1.0);
        }
        let trainval = (f.train.len() + f.val.len()) as f64;
        assert!((f.val.len() as f64 - 0.2 * trainval).abs() <= 3.0);
        f.test.iter().for_each(|&i| seen[i] += 1);
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert!(kfold_split(&labels, 101, 0).is_err());
}
