use proptest::prelude::*;
use spillkit_core::annotation::{next_status, SceneStatus, SceneTask, SceneVerb};
use spillkit_core::generation::ImageRef;

const EDGES: [(SceneStatus, SceneStatus); 5] = [
    (SceneStatus::Pending, SceneStatus::Annotated),
    (SceneStatus::Annotated, SceneStatus::Inpainted),
    (SceneStatus::Inpainted, SceneStatus::Accepted),
    (SceneStatus::Inpainted, SceneStatus::Rejected),
    (SceneStatus::Rejected, SceneStatus::Annotated),
];

fn verb() -> impl Strategy<Value = SceneVerb> {
    prop::sample::select(vec![
        SceneVerb::Submit,
        SceneVerb::InpaintDone,
        SceneVerb::Accept,
        SceneVerb::Reject,
        SceneVerb::Requeue,
    ])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn state_machine_never_skips(verbs in prop::collection::vec(verb(), 0..40)) {
        let img = ImageRef { path: "s.png".into(), width: 64, height: 64 };
        let mut t = SceneTask::new("s", img, 1, 7);
        let mut version = 0;
        for v in verbs {
            let before = t.status;
            let predicted = next_status(before, v);
            match t.apply(v) {
                Ok(after) => {
                    prop_assert_eq!(Some(after), predicted);
                    prop_assert!(EDGES.contains(&(before, after)), "{before:?} -> {after:?}");
                    version += 1;
                }
                Err(_) => {
                    prop_assert_eq!(predicted, None);
                    prop_assert_eq!(t.status, before);
                }
            }
            prop_assert_eq!(t.version, version);
        }
    }
}
