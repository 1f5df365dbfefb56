use proptest::prelude::*;
use spillkit_core::classes::ClassId;
use spillkit_core::geometry::{iou, BBox, Detection, GroundTruth};
use spillkit_core::metrics::{
    default_matching_rules, map50, mean_hit_rate, sweep, tally, uplift, ImageEval,
};

const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Boxes on a coarse grid so that overlaps (and IoU ties) are common.
fn grid_box() -> impl Strategy<Value = BBox> {
    (0u8..6, 0u8..6, 1u8..5, 1u8..5).prop_map(|(x, y, w, h)| {
        BBox::from_xywh(x as f64 * 8.0, y as f64 * 8.0, w as f64 * 8.0, h as f64 * 8.0).unwrap()
    })
}

fn class() -> impl Strategy<Value = ClassId> {
    (1u32..3).prop_map(ClassId)
}

fn image(max_dets: usize, max_gts: usize) -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruth>)> {
    let score = prop_oneof![Just(0.5), Just(0.9), 0.0..=1.0f64];
    (
        prop::collection::vec((grid_box(), class(), score), 0..=max_dets),
        prop::collection::vec((grid_box(), class()), 0..=max_gts),
    )
        .prop_map(|(d, g)| {
            (
                d.into_iter().map(|(b, c, s)| Detection::new(b, c, s).unwrap()).collect(),
                g.into_iter().map(|(b, c)| GroundTruth::new(b, c)).collect(),
            )
        })
}

fn images(n: std::ops::RangeInclusive<usize>, dets: usize, gts: usize) -> impl Strategy<Value = Vec<ImageEval>> {
    prop::collection::vec(image(dets, gts), n).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (predictions, ground_truths))| ImageEval {
                image_id: i as u64 + 1,
                predictions,
                ground_truths,
            })
            .collect()
    })
}

/// Brute-force mAP@0.5: rank, greedily match, then for each recall level m
/// take the best precision among ranks that already reach m true positives.
fn oracle_map(images: &[ImageEval]) -> Option<f64> {
    let mut classes: Vec<ClassId> = images
        .iter()
        .flat_map(|im| im.ground_truths.iter().map(|g| g.class_id))
        .collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &c in &classes {
        let mut ranked = Vec::new();
        for (ii, im) in images.iter().enumerate() {
            for (di, d) in im.predictions.iter().enumerate() {
                if d.class_id == c {
                    ranked.push((d.score, ii, di));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.ground_truths.len()]).collect();
        let mut cum = Vec::new();
        let mut tp = 0usize;
        for &(_, ii, di) in &ranked {
            let d = &images[ii].predictions[di];
            let mut pick = None;
            let mut best = -1.0;
            for (gi, g) in images[ii].ground_truths.iter().enumerate() {
                if g.class_id != c || used[ii][gi] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= 0.5 && v > best {
                    best = v;
                    pick = Some(gi);
                }
            }
            if let Some(gi) = pick {
                used[ii][gi] = true;
                tp += 1;
            }
            cum.push(tp);
        }
        let n_gt = images
            .iter()
            .map(|im| im.ground_truths.iter().filter(|g| g.class_id == c).count())
            .sum::<usize>();
        let mut ap = 0.0;
        for m in 1..=n_gt {
            let best = cum
                .iter()
                .enumerate()
                .filter(|(_, t)| **t >= m)
                .map(|(k, t)| *t as f64 / (k + 1) as f64)
                .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))));
            if let Some(p) = best {
                ap += p;
            }
        }
        total += ap / n_gt as f64;
    }
    Some(total / classes.len() as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn map50_matches_brute_force(ims in images(1..=2, 5, 3)) {
        match (map50(&ims), oracle_map(&ims)) {
            (Ok(r), Some(want)) => {
                prop_assert_eq!(r.map, want);
                prop_assert!((0.0..=1.0).contains(&r.map));
            }
            (Err(_), None) => {}
            (got, want) => prop_assert!(false, "{got:?} vs {want:?}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sweep_is_non_increasing(ims in images(1..=6, 4, 3)) {
        prop_assume!(ims.iter().any(|im| !im.ground_truths.is_empty()));
        let curve = sweep(&ims, &THRESHOLDS).unwrap();
        prop_assert!(curve.is_monotone());
        let rates: Vec<f64> = THRESHOLDS.iter().map(|t| mean_hit_rate(&ims, *t).unwrap()).collect();
        prop_assert!(rates.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rates_bounded_and_rules_ordered(ims in images(1..=6, 4, 3), tau in 0.05..=1.0f64) {
        prop_assume!(ims.iter().any(|im| !im.ground_truths.is_empty()));
        let rules = default_matching_rules();
        let best = tally(rules.get("best-score").unwrap().as_ref(), &ims, tau).unwrap();
        let greedy = tally(rules.get("greedy-all").unwrap().as_ref(), &ims, tau).unwrap();
        for t in [&best, &greedy] {
            prop_assert!((0.0..=1.0).contains(&t.pooled_rate().unwrap()));
            prop_assert!((0.0..=1.0).contains(&t.class_mean_rate().unwrap()));
        }
        let n_gt: usize = ims.iter().map(|im| im.ground_truths.len()).sum();
        let n_pairs: usize = ims
            .iter()
            .map(|im| {
                let mut c: Vec<_> = im.ground_truths.iter().map(|g| g.class_id).collect();
                c.sort();
                c.dedup();
                c.len()
            })
            .sum();
        prop_assert_eq!(greedy.total(), n_gt as u64);
        prop_assert_eq!(best.total(), n_pairs as u64);
    }

    #[test]
    fn uplift_scale_invariant(hr in 0.0..=1.0f64, base in 0.01..=1.0f64, k in 0.1..10.0f64) {
        let a = uplift(hr, base).unwrap();
        let b = uplift(hr * k, base * k).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}

#[test]
fn uplift_of_reported_rows() {
    let u = uplift(0.71, 0.42).unwrap();
    assert!((u - 69.05).abs() < 0.01, "{u}");
    assert!(uplift(0.5, 0.0).is_err());
}
