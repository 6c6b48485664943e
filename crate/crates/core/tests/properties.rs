use proptest::prelude::*;
use rnnsm_core::cox::efron_partial_log_likelihood;
use rnnsm_core::data::WindowConfig;
use rnnsm_core::evaluation::{auc, concordance_index, nonreturning_recall, PredictionRecord};
use rnnsm_core::rnnsm::{
    absence_conditioned_expectation, expected_return_time, log_density_return, log_survival,
};

fn record(i: usize, pred: f64, truth: Option<f64>, horizon: f64) -> PredictionRecord {
    PredictionRecord {
        user_id: format!("u{i}"),
        predicted_return_days: pred,
        true_return_days: truth,
        horizon_gap_days: horizon,
        active_day_count: 1,
        last_session_end: 0.0,
    }
}

prop_compose! {
    fn labelled_scores()(
        pairs in prop::collection::vec((-50.0f64..50.0, any::<bool>()), 2..40)
    ) -> (Vec<f64>, Vec<bool>) {
        let mut pairs = pairs;
        pairs[0].1 = true;
        pairs[1].1 = false;
        pairs.into_iter().unzip()
    }
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_maps((scores, labels) in labelled_scores()) {
        let base = auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (s / 10.0).exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(base, auc(&mapped, &labels).unwrap());
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn concordance_is_one_for_perfect_predictions(
        times in prop::collection::btree_set(1u32..10_000, 3..30),
        censor_mask in prop::collection::vec(any::<bool>(), 30),
    ) {
        let records: Vec<PredictionRecord> = times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let t = t as f64 / 10.0;
                // The first record always returns so some pair is comparable.
                let censored = i > 0 && censor_mask[i];
                record(i, t, (!censored).then_some(t), if censored { t } else { t + 1.0 })
            })
            .collect();
        prop_assert_eq!(concordance_index(&records).unwrap(), 1.0);
    }

    #[test]
    fn recall_never_drops_when_predictions_grow(
        rows in prop::collection::vec((0.0f64..100.0, 1.0f64..80.0, any::<bool>()), 1..40),
        shift in 0.0f64..50.0,
    ) {
        let mut rows = rows;
        rows[0].2 = true;
        let make = |d: f64| -> Vec<PredictionRecord> {
            rows.iter()
                .enumerate()
                .map(|(i, &(p, h, censored))| record(i, p + d, (!censored).then_some(h * 0.5), h))
                .collect()
        };
        prop_assert!(nonreturning_recall(&make(shift)).unwrap() >= nonreturning_recall(&make(0.0)).unwrap());
    }

    #[test]
    fn survival_is_monotone_and_density_positive(
        o in -5.0f64..3.0,
        w in 0.01f64..3.0,
        g1 in 0.0f64..5.0,
        dg in 0.0f64..5.0,
    ) {
        let a = log_survival(o, w, g1).unwrap();
        let b = log_survival(o, w, g1 + dg).unwrap();
        prop_assert!(a <= 0.0);
        prop_assert!(b <= a);
        if g1 > 0.0 {
            prop_assert!(log_density_return(o, w, g1).unwrap().is_finite());
        }
    }

    #[test]
    fn higher_intensity_means_earlier_return(o in -3.0f64..2.0, w in 0.05f64..2.0, d in 0.1f64..2.0) {
        let slow = expected_return_time(o, w).unwrap();
        let fast = expected_return_time(o + d, w).unwrap();
        prop_assert!(fast < slow);
    }

    #[test]
    fn conditioning_on_absence_never_predicts_the_past(
        o in -4.0f64..3.0,
        w in 0.01f64..2.0,
        t_s in 0.0f64..300.0,
    ) {
        prop_assert!(absence_conditioned_expectation(o, w, t_s).unwrap() >= t_s);
    }

    #[test]
    fn partial_likelihood_is_non_positive_and_order_invariant(
        rows in prop::collection::vec((-2.0f64..2.0, 0.1f64..20.0, any::<bool>()), 3..25),
        beta in -1.5f64..1.5,
        scale in 0.1f64..10.0,
    ) {
        let mut rows = rows;
        rows[0].2 = true;
        let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0]).collect();
        let t: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let e: Vec<bool> = rows.iter().map(|r| r.2).collect();
        let base = efron_partial_log_likelihood(&[beta], &x, &t, &e).unwrap().value;
        prop_assert!(base <= 1e-12);
        // Only the ordering of times matters.
        let scaled: Vec<f64> = t.iter().map(|v| v * scale).collect();
        let other = efron_partial_log_likelihood(&[beta], &x, &scaled, &e).unwrap().value;
        prop_assert!((base - other).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn windows_validate_iff_ordered(a in -5.0f64..20.0, p in -5.0f64..20.0, n in -5.0f64..20.0) {
        prop_assert_eq!(WindowConfig::new(a, p, n).is_ok(), 0.0 < a && a < p && p < n);
    }
}
