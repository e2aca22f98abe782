use mentorloop::acceptance::brute_force_ap;
use mentorloop::evalkit::{average_precision, match_detections, precision_recall, precision_recall_at, ScoredMatch};
use mentorloop::grid::Detection;
use mentorloop::Error;
use proptest::prelude::*;

fn det(class: usize, cells: &[(usize, usize)], conf: f64) -> Detection {
    Detection::new(class, cells.iter().copied().collect(), conf)
}

#[test]
fn greedy_matching_takes_confident_predictions_first() {
    let truths = vec![det(0, &[(0, 0), (0, 1)], 1.0)];
    let preds = vec![det(0, &[(0, 0)], 0.6), det(0, &[(0, 0), (0, 1)], 0.9)];
    let m = match_detections(&preds, &truths, 0.3);
    assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
    let tp: Vec<_> = m.scored.iter().filter(|s| s.true_positive).collect();
    assert_eq!(tp.len(), 1);
    assert_eq!(tp[0].confidence, 0.9);
}

#[test]
fn matching_respects_class_and_iou() {
    let truths = vec![det(0, &[(0, 0), (0, 1), (0, 2), (0, 3)], 1.0)];
    let wrong_class = vec![det(1, &[(0, 0), (0, 1), (0, 2), (0, 3)], 0.9)];
    assert_eq!(match_detections(&wrong_class, &truths, 0.3).tp, 0);
    let small = vec![det(0, &[(0, 0)], 0.9)];
    assert_eq!(match_detections(&small, &truths, 0.3).tp, 0);
    let enough = vec![det(0, &[(0, 0), (0, 1)], 0.9)];
    assert_eq!(match_detections(&enough, &truths, 0.3).tp, 1);
}

#[test]
fn vacuous_precision_is_one() {
    assert_eq!(precision_recall(0, 0, 4), (1.0, 0.0));
    let truths = vec![det(0, &[(1, 1)], 1.0)];
    let preds = vec![det(0, &[(1, 1)], 0.3)];
    assert_eq!(precision_recall_at(&preds, &truths, 0.3, 0.5), (1.0, 0.0));
    assert_eq!(precision_recall_at(&preds, &truths, 0.3, 0.2), (1.0, 1.0));
}

#[test]
fn ap_edge_cases() {
    assert!(matches!(average_precision(&[], 0), Err(Error::UndefinedMetric(_))));
    assert_eq!(average_precision(&[], 3).unwrap(), 0.0);
    let perfect: Vec<ScoredMatch> = (0..3)
        .map(|i| ScoredMatch {
            class_id: 0,
            confidence: 0.9 - i as f64 * 0.1,
            true_positive: true,
        })
        .collect();
    assert_eq!(average_precision(&perfect, 3).unwrap(), 1.0);
    let fp_first = vec![
        ScoredMatch { class_id: 0, confidence: 0.9, true_positive: false },
        ScoredMatch { class_id: 0, confidence: 0.8, true_positive: true },
    ];
    assert_eq!(average_precision(&fp_first, 1).unwrap(), 0.5);
}

#[test]
fn tied_confidences_enter_together() {
    let tied = vec![
        ScoredMatch { class_id: 0, confidence: 0.5, true_positive: false },
        ScoredMatch { class_id: 0, confidence: 0.5, true_positive: true },
    ];
    let swapped: Vec<_> = tied.iter().rev().copied().collect();
    assert_eq!(average_precision(&tied, 1).unwrap(), 0.5);
    assert_eq!(average_precision(&swapped, 1).unwrap(), 0.5);
}

proptest! {
    #[test]
    fn ap_matches_envelope_oracle(
        items in prop::collection::vec((1u32..6, any::<bool>()), 0..=10),
        extra in 0usize..4,
    ) {
        let scored: Vec<ScoredMatch> = items
            .iter()
            .map(|&(c, tp)| ScoredMatch { class_id: 0, confidence: c as f64 / 5.0, true_positive: tp })
            .collect();
        let n = scored.iter().filter(|s| s.true_positive).count() + extra;
        prop_assume!(n > 0);
        let ap = average_precision(&scored, n).unwrap();
        prop_assert_eq!(ap, brute_force_ap(&scored, n));
        prop_assert!((0.0..=1.0).contains(&ap));
    }
}
