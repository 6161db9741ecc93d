mod common;

use arc_core::fusion::{Branch, Detection};
use arc_core::metrics::{average_precision, confidence_order, evaluate, match_detections};
use common::{brute_evaluate, brute_match, brute_match_claims, instance};
use proptest::prelude::*;

const ORACLE_TOL: f64 = 1e-9;

#[test]
fn evaluate_matches_brute_force() {
    for seed in 0..50 {
        let inst = instance(seed, 30, 15, 3);
        let got = evaluate(&inst.dets, &inst.gts, &inst.classes).unwrap();
        let want = brute_evaluate(&inst);
        for (name, g, w) in [
            ("map50", got.map50, want.map50),
            ("map5095", got.map5095, want.map5095),
            ("precision", got.precision, want.precision),
            ("recall", got.recall, want.recall),
        ] {
            assert!((g - w).abs() <= ORACLE_TOL, "seed {seed} {name}: {g} vs {w}");
        }
    }
}

#[test]
fn matching_agrees_with_selection_oracle() {
    for seed in 0..200 {
        let mut inst = instance(10_000 + seed, 20, 10, 1);
        inst.dets.resize(
            20,
            inst.dets.first().copied().unwrap_or(Detection {
                image_id: 0,
                bbox: arc_core::fusion::BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
                class_id: 0,
                confidence: 0.5,
                branch: Branch::Context,
            }),
        );
        for thr in [0.3, 0.5, 0.75] {
            let m = match_detections(&inst.dets, &inst.gts, thr);
            let ordered: Vec<bool> = confidence_order(&inst.dets)
                .iter()
                .map(|&i| m.true_positive[i])
                .collect();
            assert_eq!(
                ordered,
                brute_match(&inst.dets, &inst.gts, thr),
                "seed {seed} thr {thr}"
            );
            let tp = ordered.iter().filter(|t| **t).count();
            assert_eq!(tp + m.false_negatives, inst.gts.len());
        }
    }
}

fn class_aps(dets: &[Detection], inst: &common::Instance) -> Vec<Option<[f64; 10]>> {
    evaluate(dets, &inst.gts, &inst.classes)
        .unwrap()
        .classes
        .into_iter()
        .map(|c| c.ap)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_depends_only_on_confidence_order(seed in any::<u64>()) {
        let inst = instance(seed, 30, 15, 3);
        let squashed: Vec<Detection> = inst
            .dets
            .iter()
            .map(|d| Detection { confidence: 0.1 + 0.8 * d.confidence * d.confidence, ..*d })
            .collect();
        prop_assert_eq!(class_aps(&inst.dets, &inst), class_aps(&squashed, &inst));
    }

    #[test]
    fn trailing_false_positive_never_raises_ap(seed in any::<u64>(), class in 0..3usize) {
        let inst = instance(seed, 30, 15, 3);
        prop_assume!(class < inst.classes.len());
        let mut more = inst.dets.clone();
        let floor = inst.dets.iter().map(|d| d.confidence).fold(1.0, f64::min);
        more.push(Detection {
            image_id: 99,
            bbox: arc_core::fusion::BBox::new(0.0, 0.0, 5.0, 5.0).unwrap(),
            class_id: class,
            confidence: floor / 2.0,
            branch: Branch::Specialist,
        });
        let (before, after) = (class_aps(&inst.dets, &inst), class_aps(&more, &inst));
        for t in 0..10 {
            let b = before[class].map_or(0.0, |a| a[t]);
            prop_assert!(after[class].unwrap()[t] <= b);
        }
    }

    #[test]
    fn matching_an_unmatched_truth_never_lowers_ap(seed in any::<u64>(), conf in 0..=1000u32) {
        let inst = instance(seed, 30, 15, 3);
        let (_, claimed) = brute_match_claims(&inst.dets, &inst.gts, 0.5);
        let free: Vec<usize> = (0..inst.gts.len()).filter(|&j| !claimed[j]).collect();
        prop_assume!(!free.is_empty());
        let g = inst.gts[free[0]];
        let mut more = inst.dets.clone();
        more.push(Detection {
            image_id: g.image_id,
            bbox: g.bbox,
            class_id: g.class_id,
            confidence: conf as f64 / 1000.0,
            branch: Branch::Specialist,
        });
        let (before, after) = (class_aps(&inst.dets, &inst), class_aps(&more, &inst));
        prop_assert!(after[g.class_id].unwrap()[0] >= before[g.class_id].unwrap()[0]);
    }
}

#[test]
fn evaluation_is_bit_reproducible() {
    for seed in 0..20 {
        let a = instance(seed, 30, 15, 3);
        let mut b = instance(seed + 500, 30, 15, 3);
        for d in &mut b.dets {
            d.image_id += 10;
        }
        for g in &mut b.gts {
            g.image_id += 10;
        }
        let dets: Vec<Detection> = a.dets.iter().chain(&b.dets).copied().collect();
        let gts: Vec<_> = a.gts.iter().chain(&b.gts).copied().collect();
        let first = evaluate(&dets, &gts, &[0, 1, 2]).unwrap();
        let second = evaluate(&dets, &gts, &[0, 1, 2]).unwrap();
        assert_eq!(first.map50.to_bits(), second.map50.to_bits());
        assert_eq!(first.map5095.to_bits(), second.map5095.to_bits());
        assert_eq!(first, second);
    }
}

#[test]
fn hand_computed_examples() {
    assert_eq!(average_precision(&[true, true], 2), Some(1.0));
    assert_eq!(average_precision(&[false, false, false], 3), Some(0.0));
    assert_eq!(
        average_precision(&[true, false, true], 2),
        Some((51.0 + 50.0 * (2.0 / 3.0)) / 101.0)
    );
}
