use proptest::prelude::*;
use spillkit_core::geometry::BBox;
use spillkit_core::mask::{default_mask_ramps, render_feathered_mask, render_mask_with, MaskSpec};

const N: u32 = 96;

fn spec() -> impl Strategy<Value = MaskSpec> {
    (10u32..60, 10u32..60, 1u32..30, 1u32..30, 0u32..25, 1u32..=100).prop_map(|(x, y, w, h, f, o)| {
        let bbox = BBox::from_xywh(x as f64, y as f64, w as f64, h as f64).unwrap();
        MaskSpec::new(bbox, f as f64, o as f64 / 100.0).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn feathered_mask_invariants(s in spec()) {
        let m = render_feathered_mask(&s, N, N).unwrap();
        let peak = (s.opacity * 255.0).round() as u8;
        for y in 0..N {
            for x in 0..N {
                let v = m.get(x, y);
                let d = s.distance(x, y);
                prop_assert!(v <= peak);
                if d == 0.0 {
                    prop_assert_eq!(v, peak);
                }
                if d > 0.0 && d >= s.feather_px {
                    prop_assert_eq!(v, 0);
                }
                // Expected value from the ramp definition.
                let want = if s.feather_px == 0.0 {
                    if d == 0.0 { peak } else { 0 }
                } else {
                    (s.opacity * 255.0 * (1.0 - (d / s.feather_px).min(1.0))).round() as u8
                };
                prop_assert_eq!(v, want);
                // Never brighter than a pixel closer to the box.
                if x + 1 < N && s.distance(x + 1, y) >= d {
                    prop_assert!(m.get(x + 1, y) <= v);
                }
                if y + 1 < N && s.distance(x, y + 1) >= d {
                    prop_assert!(m.get(x, y + 1) <= v);
                }
            }
        }
    }

    #[test]
    fn centred_box_mask_is_symmetric(half in 2u32..20, f in 0u32..20, ramp in prop::sample::select(vec!["linear", "gaussian"])) {
        let c = N / 2;
        let bbox = BBox::new((c - half) as f64, (c - half) as f64, (c + half) as f64, (c + half) as f64).unwrap();
        let s = MaskSpec::new(bbox, f as f64, 0.75).unwrap();
        let r = default_mask_ramps().get(ramp).unwrap();
        let m = render_mask_with(r.as_ref(), &s, N, N).unwrap();
        for y in 0..N {
            for x in 0..N {
                let v = m.get(x, y);
                prop_assert_eq!(v, m.get(N - 1 - x, y));
                prop_assert_eq!(v, m.get(x, N - 1 - y));
                prop_assert_eq!(v, m.get(y, x));
            }
        }
    }
}

#[test]
fn default_mask_has_plateau_and_band() {
    let bbox = BBox::from_xywh(256.0, 411.0, 142.0, 95.0).unwrap();
    let s = MaskSpec::with_defaults(bbox);
    let m = render_feathered_mask(&s, 1024, 1024).unwrap();
    assert_eq!(m.get(300, 450), 191);
    assert_eq!(m.get(256 - 25, 450), 96);
    assert_eq!(m.get(256 - 50, 450), 0);
    assert!(render_feathered_mask(&s, 100, 100).is_err());
}
