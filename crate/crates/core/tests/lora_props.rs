use std::collections::BTreeMap;

use nalgebra::DMatrix;
use proptest::prelude::*;
use spillkit_core::lora::{
    merge, merge_store, read_store, write_store, LoraAdapter, Matrix, Pathway, PathwayFilter,
    TensorStore,
};

const D: usize = 32;
const R: usize = 8;

fn values(n: usize, lim: f32) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-lim..lim, n)
}

fn mat(rows: usize, cols: usize, lim: f32) -> impl Strategy<Value = Matrix> {
    values(rows * cols, lim).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn delta(merged: &Matrix, base: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(base.rows, base.cols, |i, j| merged.at(i, j) as f64 - base.at(i, j) as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn update_has_rank_at_most_r(
        w in mat(D, D, 0.5), b in mat(D, R, 1.0), a in mat(R, D, 1.0),
    ) {
        let adapter = LoraAdapter::new(b, a, 1.0 / R as f64).unwrap();
        let merged = merge(&w, &adapter).unwrap();
        let sv = delta(&merged, &w).singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|x, y| y.total_cmp(x));
        prop_assume!(sv[0] > 0.0);
        for s in &sv[R..] {
            prop_assert!(s / sv[0] < 1e-6, "{:?}", sv);
        }
    }

    #[test]
    fn merge_is_linear_in_alpha(
        w in mat(16, 12, 1.0), b in mat(16, 4, 1.0), a in mat(4, 12, 1.0),
        a1 in 0.0..2.0f64, a2 in 0.0..2.0f64,
    ) {
        let once = merge(&w, &LoraAdapter::new(b.clone(), a.clone(), a1 + a2).unwrap()).unwrap();
        let step = merge(&w, &LoraAdapter::new(b.clone(), a.clone(), a1).unwrap()).unwrap();
        let twice = merge(&step, &LoraAdapter::new(b, a, a2).unwrap()).unwrap();
        for (x, y) in once.data.iter().zip(&twice.data) {
            let scale = x.abs().max(y.abs()).max(1.0) as f64;
            prop_assert!(((x - y) as f64).abs() <= 1e-6 * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn zero_adapter_keeps_bits(w in mat(8, 8, 10.0)) {
        let z = LoraAdapter::new(Matrix::zeros(8, 2), Matrix::zeros(2, 8), 0.5).unwrap();
        let m = merge(&w, &z).unwrap();
        prop_assert!(m.data.iter().zip(&w.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn store_round_trips(v in values(24, 100.0), u in values(6, 1.0)) {
        let store = TensorStore::from_tensors(
            vec![("visual.proj.weight".into(), vec![4, 6], v), ("lm_head.bias".into(), vec![6], u)],
            Some(BTreeMap::from([("format".into(), "pt".into())])),
        )
        .unwrap();
        let bytes = write_store(&store);
        let back = read_store(&bytes).unwrap();
        prop_assert_eq!(write_store(&back), bytes);
    }
}

#[test]
fn pathway_filter_leaves_other_tensors_byte_identical() {
    let base = TensorStore::from_tensors(
        vec![
            ("visual.blocks.0.attn.weight".into(), vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            ("model.layers.0.q_proj.weight".into(), vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]),
        ],
        None,
    )
    .unwrap();
    let ad = || LoraAdapter::new(Matrix::new(2, 1, vec![1.0, 1.0]).unwrap(), Matrix::new(1, 2, vec![1.0, 0.0]).unwrap(), 1.0).unwrap();
    let adapters = BTreeMap::from([
        ("visual.blocks.0.attn.weight".to_string(), ad()),
        ("model.layers.0.q_proj.weight".to_string(), ad()),
    ]);
    let (out, summary) = merge_store(&base, &adapters, Pathway::Vision, &PathwayFilter::default()).unwrap();
    assert_eq!(summary.merged, vec!["visual.blocks.0.attn.weight"]);
    assert_eq!(out.values("visual.blocks.0.attn.weight").unwrap(), vec![2.0, 2.0, 4.0, 4.0]);
    assert_eq!(
        out.raw_bytes("model.layers.0.q_proj.weight").unwrap(),
        base.raw_bytes("model.layers.0.q_proj.weight").unwrap()
    );
    let (both, s) = merge_store(&base, &adapters, Pathway::Both, &PathwayFilter::default()).unwrap();
    assert_eq!(s.merged.len(), 2);
    assert_eq!(both.values("model.layers.0.q_proj.weight").unwrap(), vec![6.0, 6.0, 8.0, 8.0]);
}
