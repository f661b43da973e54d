use std::collections::BTreeMap;

use cbx_core::cbm::{intervene, CbmModel, ConceptPrediction};
use cbx_core::evalkit::{
    class_relevance, concept_contributions, contribution_report, contribution_report_at,
    most_salient_point, pointing_distance, pointing_game_with, shortest_fraction_mean,
    sign_pattern_summary, PartKeypoint, SignPattern,
};
use cbx_core::nn::{Layer, Linear, Network};
use cbx_core::synth::Rng;
use cbx_core::{Error, Tensor};
use proptest::prelude::*;

fn brute_argmax(values: &[f64], width: usize) -> (usize, usize) {
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for r in 0..values.len() / width {
        for c in 0..width {
            let v = values[r * width + c];
            if v > best.0 {
                best = (v, r, c);
            }
        }
    }
    (best.1, best.2)
}

fn kp(part_id: usize, x: usize, y: usize) -> PartKeypoint {
    PartKeypoint {
        part_id,
        x,
        y,
        visible: true,
    }
}

fn peak_grid(h: usize, w: usize, row: usize, col: usize) -> Tensor {
    let mut g = Tensor::zeros(&[h, w]);
    g.data_mut()[row * w + col] = 1.0;
    g
}

fn linear_model(k: usize, n_classes: usize, weight: Vec<f64>, bias: Vec<f64>) -> CbmModel {
    let g = Network::new(
        vec![1],
        vec![Layer::Linear(
            Linear::new(Tensor::zeros(&[k, 1]), Tensor::zeros(&[k])).unwrap(),
        )],
    )
    .unwrap();
    let f = Network::new(
        vec![k],
        vec![Layer::Linear(
            Linear::new(
                Tensor::new(vec![n_classes, k], weight).unwrap(),
                Tensor::vector(bias),
            )
            .unwrap(),
        )],
    )
    .unwrap();
    CbmModel::new(
        g,
        f,
        true,
        (0..k).map(|i| format!("concept_{i}")).collect(),
        (0..n_classes).map(|i| format!("class_{i}")).collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn salient_point_matches_exhaustive_scan(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        // small integer levels make ties common
        let values: Vec<f64> = (0..256).map(|_| rng.below(6) as f64).collect();
        let grid = Tensor::new(vec![16, 16], values.clone()).unwrap();
        let (r, c) = brute_argmax(&values, 16);
        prop_assert_eq!(most_salient_point(&grid).unwrap(), (r, c));
        let (x, y) = (rng.below(16), rng.below(16));
        let d = pointing_distance(&grid, &kp(0, x, y)).unwrap();
        let (dr, dc) = (r as f64 - y as f64, c as f64 - x as f64);
        prop_assert_eq!(d, (dr * dr + dc * dc).sqrt());
    }

    #[test]
    fn pointing_distance_is_symmetric(a in (0usize..12, 0usize..9), b in (0usize..12, 0usize..9)) {
        let ab = pointing_distance(&peak_grid(12, 9, a.0, a.1), &kp(0, b.1, b.0)).unwrap();
        let ba = pointing_distance(&peak_grid(12, 9, b.0, b.1), &kp(0, a.1, a.0)).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(ab == 0.0, a == b);
    }

    #[test]
    fn shortest_fraction_is_monotone(d in prop::collection::vec(0.0f64..100.0, 1..40), f1 in 0.01f64..1.0, f2 in 0.01f64..1.0) {
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        prop_assert!(shortest_fraction_mean(&d, lo).unwrap() <= shortest_fraction_mean(&d, hi).unwrap() + 1e-12);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        prop_assert!((shortest_fraction_mean(&d, 1.0).unwrap() - mean).abs() <= 1e-12 * mean.max(1.0));
    }

    #[test]
    fn contributions_are_a_scale_free_percentage(r in prop::collection::vec(-10.0f64..10.0, 1..30), scale in 1e-3f64..1e3) {
        let c = concept_contributions(&r).unwrap();
        prop_assume!(!c.all_zero);
        prop_assert!((c.percent.iter().sum::<f64>() - 100.0).abs() <= 1e-9);
        prop_assert!(c.percent.iter().all(|&p| p >= 0.0));
        let scaled: Vec<f64> = r.iter().map(|v| v * scale).collect();
        let cs = concept_contributions(&scaled).unwrap();
        for (a, b) in c.percent.iter().zip(&cs.percent) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn class_relevance_matches_closed_form(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (k, n) = (2 + rng.below(8), 2 + rng.below(4));
        let w: Vec<f64> = (0..k * n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let c: Vec<f64> = (0..k).map(|_| if rng.bernoulli(0.3) { 0.0 } else { rng.uniform() }).collect();
        let t = rng.below(n);
        let model = linear_model(k, n, w.clone(), b.clone());
        let r = class_relevance(&model, &c, t).unwrap();
        let z: f64 = (0..k).map(|j| c[j] * w[t * k + j]).sum::<f64>() + b[t];
        for i in 0..k {
            let expected = c[i] * w[t * k + i] / z * z;
            prop_assert!((r[i] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            if c[i] == 0.0 {
                prop_assert_eq!(r[i], 0.0);
            }
        }
        let presence: Vec<bool> = c.iter().map(|&v| v >= 0.5).collect();
        let zeros = c.iter().filter(|&&v| v == 0.0).count();
        prop_assert!(sign_pattern_summary(&r, &presence).unwrap().zero >= zeros);
    }

    #[test]
    fn intervention_is_idempotent(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let k = 5;
        let model = linear_model(k, 3, (0..15).map(|_| rng.uniform_range(-1.0, 1.0)).collect(), vec![0.1, -0.2, 0.0]);
        let c: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
        let overrides = BTreeMap::from([(rng.below(k), 1.0), (rng.below(k), 0.0)]);
        let once = intervene(&model, &c, &overrides).unwrap();
        let twice = intervene(&model, &once.values, &overrides).unwrap();
        prop_assert_eq!(&twice.values, &once.values);
        prop_assert_eq!(&twice.new_probs, &once.new_probs);
        prop_assert!((once.new_probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn documented_pointing_cases() {
    assert_eq!(most_salient_point(&peak_grid(8, 10, 3, 7)).unwrap(), (3, 7));
    assert_eq!(
        most_salient_point(&Tensor::full(&[4, 4], 2.0)).unwrap(),
        (0, 0)
    );
    assert_eq!(
        pointing_distance(&peak_grid(16, 16, 10, 10), &kp(0, 14, 13)).unwrap(),
        5.0
    );
    let d: Vec<f64> = (1..=15).map(f64::from).collect();
    assert_eq!(shortest_fraction_mean(&d, 0.1).unwrap(), 1.5);
    let d: Vec<f64> = (1..=10).map(f64::from).collect();
    assert_eq!(shortest_fraction_mean(&d, 0.1).unwrap(), 1.0);
    assert_eq!(shortest_fraction_mean(&d, 1.0).unwrap(), 5.5);
    assert!(matches!(
        shortest_fraction_mean(&[], 0.1),
        Err(Error::Empty(_))
    ));
}

#[test]
fn pointing_game_against_hand_computed_fixtures() {
    // five samples, two parts on a 10×10 grid; peaks placed by hand
    let keypoints = vec![
        vec![kp(0, 2, 2), kp(1, 7, 7)],
        vec![kp(0, 1, 1), kp(1, 5, 5)],
        vec![
            kp(0, 0, 0),
            PartKeypoint {
                visible: false,
                ..kp(1, 0, 0)
            },
        ],
        vec![kp(0, 4, 4), kp(1, 9, 9)],
        vec![kp(0, 3, 3), kp(1, 6, 6)],
    ];
    // (row, col) peaks for concept 0 (part 0) and concept 1 (part 1)
    let peaks = [
        [(2, 2), (7, 4)],
        [(4, 5), (5, 5)],
        [(0, 6), (0, 0)],
        [(4, 4), (9, 1)],
        [(3, 3), (0, 0)],
    ];
    let names = vec!["head".to_string(), "body".to_string()];
    let map = BTreeMap::from([(0, 0), (1, 1)]);
    let result = pointing_game_with(&keypoints, &map, &names, "fixture", |s, c| {
        let (r, col) = peaks[s][c];
        Ok(peak_grid(10, 10, r, col))
    })
    .unwrap();
    // part 0 distances: 0, 5, 6, 0, 0 → mean 2.2; shortest 10% of 5 = 1 value → 0
    let head = &result.parts[0];
    assert_eq!(head.distances, vec![0.0, 5.0, 6.0, 0.0, 0.0]);
    assert_eq!(head.mean_distance, Some(2.2));
    assert_eq!(head.shortest10_mean, Some(0.0));
    // part 1: 3, 0, skipped, 8, sqrt(72) → mean (11 + sqrt 72) / 4
    let body = &result.parts[1];
    assert_eq!(body.n_samples, 4);
    assert_eq!(body.n_skipped, 1);
    let expected = (3.0 + 0.0 + 8.0 + 72f64.sqrt()) / 4.0;
    assert!((body.mean_distance.unwrap() - expected).abs() < 1e-12);
    assert_eq!(body.shortest10_mean, Some(0.0));

    let single = pointing_game_with(
        &keypoints[..1],
        &BTreeMap::from([(0, 0)]),
        &names,
        "one",
        |_, _| Ok(peak_grid(10, 10, 2, 2)),
    )
    .unwrap();
    assert_eq!(single.parts[0].mean_distance, Some(0.0));
}

#[test]
fn documented_contribution_cases() {
    assert_eq!(
        concept_contributions(&[2.0, -1.0, 1.0, 0.0])
            .unwrap()
            .percent,
        vec![50.0, 25.0, 25.0, 0.0]
    );
    assert_eq!(concept_contributions(&[5.0]).unwrap().percent, vec![100.0]);
    assert_eq!(
        concept_contributions(&[0.0, 3.0, 0.0]).unwrap().percent,
        vec![0.0, 100.0, 0.0]
    );
    let z = concept_contributions(&[0.0, 0.0]).unwrap();
    assert!(z.all_zero && z.percent == vec![0.0, 0.0]);
}

#[test]
fn identity_report_and_ordering() {
    let model = linear_model(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
    let report = contribution_report_at(&model, &[1.0, 0.0], 0).unwrap();
    let rows: Vec<_> = report
        .rows
        .iter()
        .map(|r| {
            (
                r.concept_id,
                r.concept_value,
                r.relevance,
                r.contribution_percent,
            )
        })
        .collect();
    assert_eq!(rows, vec![(0, 1.0, 1.0, 100.0), (1, 0.0, 0.0, 0.0)]);

    // equal contributions keep concept order, and repeated calls agree
    let model = linear_model(4, 1, vec![1.0, -1.0, 1.0, 0.5], vec![0.0]);
    let a = contribution_report_at(&model, &[1.0, 1.0, 1.0, 1.0], 0).unwrap();
    let ids: Vec<usize> = a.rows.iter().map(|r| r.concept_id).collect();
    assert_eq!(ids, vec![0, 1, 2, 3]);
    assert_eq!(
        a,
        contribution_report_at(&model, &[1.0, 1.0, 1.0, 1.0], 0).unwrap()
    );
    assert!(contribution_report_at(&model, &[1.0; 4], 1).is_err());
    assert_eq!(
        a.top_summary(3),
        "concept_0 at 28.57%, concept_1 at 28.57%, concept_2 at 28.57%"
    );
}

#[test]
fn report_from_prediction_uses_the_bottleneck() {
    let model = linear_model(2, 2, vec![1.0, 2.0, -1.0, 0.5], vec![0.0, 0.0]);
    let pred = ConceptPrediction::from_logits(vec![0.0, 0.0]);
    let report = contribution_report(&model, &pred, 0).unwrap();
    assert!(report.rows.iter().all(|r| r.concept_value == 0.5));
    assert_eq!(report.rows[0].concept_id, 1);
}

#[test]
fn documented_sign_patterns() {
    let s = sign_pattern_summary(&[1.0, -1.0], &[true, false]).unwrap();
    assert_eq!(
        s,
        SignPattern {
            present_pos: 1,
            absent_neg: 1,
            ..SignPattern::default()
        }
    );
    assert_eq!(sign_pattern_summary(&[0.0; 4], &[true; 4]).unwrap().zero, 4);
    assert!(matches!(
        sign_pattern_summary(&[1.0], &[]),
        Err(Error::LengthMismatch { .. })
    ));
}
