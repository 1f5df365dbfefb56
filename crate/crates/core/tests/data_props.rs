use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma};
use proptest::prelude::*;
use spillkit_core::dataset::{dedup_images, make_splits, SplitProfile};
use spillkit_core::generation::{
    build_inpaint_job, build_scene_job, GenerationProfile, ImageRef, InpaintProfile, MaskRef,
    DENOISE_BAND, LORA_STRENGTH_BAND,
};
use spillkit_core::classes::OIL_SPILL;
use spillkit_core::geometry::BBox;
use spillkit_core::mask::MaskSpec;
use spillkit_core::prompts::PromptBank;

fn png(seed: u8, shift: u8) -> Vec<u8> {
    let img = GrayImage::from_fn(32, 32, |x, y| {
        let v = (x as u8).wrapping_mul(seed | 1).wrapping_add((y as u8).wrapping_mul(7)) ^ seed;
        Luma([v.saturating_add(shift)])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).unwrap();
    buf.into_inner()
}

fn corpus() -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    for s in 0..6u8 {
        v.push((format!("img_{s}.png"), png(s * 37, 0)));
        if s % 2 == 0 {
            v.push((format!("img_{s}_copy.png"), png(s * 37, 0)));
        }
    }
    v.push(("broken.png".into(), b"not an image".to_vec()));
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn splits_are_disjoint(seed in any::<u64>(), n in 620usize..800) {
        let ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
        let m = make_splits(&ids, &SplitProfile::public_default(), seed).unwrap();
        prop_assert!(m.is_disjoint());
        prop_assert_eq!(m.splits["eval"].len(), 520);
        prop_assert_eq!(&m, &make_splits(&ids, &SplitProfile::public_default(), seed).unwrap());
        let mut rev = ids.clone();
        rev.reverse();
        prop_assert_eq!(&m, &make_splits(&rev, &SplitProfile::public_default(), seed).unwrap());
    }

    #[test]
    fn job_parameters_stay_in_band(seed in any::<u64>()) {
        let bank = PromptBank::default();
        let scene = build_scene_job(&GenerationProfile::default(), &bank, "style.png", seed).unwrap();
        prop_assert!(scene.lora_strength >= LORA_STRENGTH_BAND.0 && scene.lora_strength <= LORA_STRENGTH_BAND.1);
        let sref = ImageRef { path: "scene.png".into(), width: 1024, height: 1024 };
        let spec = MaskSpec::with_defaults(BBox::from_xywh(256.0, 411.0, 142.0, 95.0).unwrap());
        let mref = MaskRef { path: "mask.png".into(), spec, width: 1024, height: 1024 };
        let job = build_inpaint_job(&sref, &mref, OIL_SPILL, "oil-spill", &bank, &InpaintProfile::default(), seed).unwrap();
        prop_assert!(job.denoise_strength >= DENOISE_BAND.0 && job.denoise_strength <= DENOISE_BAND.1);
        let again = build_inpaint_job(&sref, &mref, OIL_SPILL, "oil-spill", &bank, &InpaintProfile::default(), seed).unwrap();
        prop_assert_eq!(job, again);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dedup_ignores_input_order(perm in Just(corpus()).prop_shuffle()) {
        let a = dedup_images(&corpus(), 4);
        let b = dedup_images(&perm, 4);
        prop_assert_eq!(&a.clusters, &b.clusters);
        prop_assert_eq!(&a.hashes, &b.hashes);
        prop_assert_eq!(a.warnings.len(), 1);
    }
}

#[test]
fn exact_copies_cluster() {
    let r = dedup_images(&corpus(), 0);
    let multi: Vec<_> = r.clusters.iter().filter(|c| c.members.len() > 1).collect();
    assert_eq!(multi.len(), 3);
    assert_eq!(multi[0].representative, "img_0.png");
}

#[test]
fn denoise_band_over_many_seeds() {
    let bank = PromptBank::default();
    let sref = ImageRef { path: "s.png".into(), width: 512, height: 512 };
    let spec = MaskSpec::with_defaults(BBox::from_xywh(10.0, 10.0, 50.0, 50.0).unwrap());
    let mref = MaskRef { path: "m.png".into(), spec, width: 512, height: 512 };
    let mut seen = Vec::new();
    for seed in 0..1000u64 {
        let j = build_inpaint_job(&sref, &mref, OIL_SPILL, "oil-spill", &bank, &InpaintProfile::default(), seed).unwrap();
        assert!((0.5..=0.6).contains(&j.denoise_strength));
        seen.push(j.denoise_strength);
    }
    seen.sort_by(f64::total_cmp);
    assert!(seen[999] - seen[0] > 0.09, "draws should spread over the band");
}
