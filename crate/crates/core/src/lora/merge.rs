use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{LoraError, TensorStore};

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, LoraError> {
        if data.len() != rows * cols {
            return Err(LoraError::InvalidAdapter(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Low-rank update: `left` is `d_out x r`, `right` is `r x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    left: Matrix,
    right: Matrix,
    alpha: f64,
}

impl LoraAdapter {
    pub fn new(left: Matrix, right: Matrix, alpha: f64) -> Result<Self, LoraError> {
        if left.cols != right.rows {
            return Err(LoraError::InvalidAdapter(format!(
                "inner dimensions disagree: {:?} x {:?}",
                left.shape(),
                right.shape()
            )));
        }
        if left.cols == 0 {
            return Err(LoraError::InvalidAdapter("rank must be >= 1".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LoraError::InvalidAdapter(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(Self { left, right, alpha })
    }

    /// Scale defaults to `1 / r`.
    pub fn with_default_alpha(left: Matrix, right: Matrix) -> Result<Self, LoraError> {
        let r = left.cols.max(1) as f64;
        Self::new(left, right, 1.0 / r)
    }

    pub fn rank(&self) -> usize {
        self.left.cols
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn left(&self) -> &Matrix {
        &self.left
    }
    pub fn right(&self) -> &Matrix {
        &self.right
    }
    /// `(d_out, d_in)` of the weight this adapter applies to.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.left.rows, self.right.cols)
    }
}

/// `W + alpha * left * right`, accumulated in f64 and stored as f32.
/// Entries whose update is exactly zero keep their original bits.
pub fn merge(weight: &Matrix, adapter: &LoraAdapter) -> Result<Matrix, LoraError> {
    if weight.shape() != adapter.target_shape() {
        return Err(LoraError::Dimension {
            weight: weight.shape(),
            adapter: adapter.target_shape(),
        });
    }
    let (d_out, d_in, r) = (weight.rows, weight.cols, adapter.rank());
    let mut out = weight.clone();
    for i in 0..d_out {
        for j in 0..d_in {
            let mut acc = 0.0f64;
            for k in 0..r {
                acc += adapter.left.at(i, k) as f64 * adapter.right.at(k, j) as f64;
            }
            let delta = adapter.alpha * acc;
            if delta != 0.0 {
                out.data[i * d_in + j] = (weight.at(i, j) as f64 + delta) as f32;
            }
        }
    }
    Ok(out)
}

/// Which model pathway(s) receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pathway {
    #[serde(rename = "L")]
    Language,
    #[serde(rename = "V")]
    Vision,
    #[serde(rename = "V+L")]
    Both,
}

impl FromStr for Pathway {
    type Err = LoraError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L" => Ok(Pathway::Language),
            "V" => Ok(Pathway::Vision),
            "V+L" | "VL" | "L+V" => Ok(Pathway::Both),
            _ => Err(LoraError::UnknownVariant(s.to_string())),
        }
    }
}

impl fmt::Display for Pathway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pathway::Language => "L",
            Pathway::Vision => "V",
            Pathway::Both => "V+L",
        })
    }
}

/// Tensor-name prefixes identifying the vision and language pathways.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathwayFilter {
    pub vision_prefixes: Vec<String>,
    pub language_prefixes: Vec<String>,
}

impl Default for PathwayFilter {
    fn default() -> Self {
        Self {
            vision_prefixes: vec!["visual.".into(), "vision_tower.".into(), "model.visual.".into()],
            language_prefixes: vec![
                "model.layers.".into(),
                "language_model.".into(),
                "model.language_model.".into(),
                "lm_head".into(),
            ],
        }
    }
}

impl PathwayFilter {
    pub fn selects(&self, name: &str, pathway: Pathway) -> bool {
        let hit = |ps: &[String]| ps.iter().any(|p| name.starts_with(p.as_str()));
        match pathway {
            Pathway::Vision => hit(&self.vision_prefixes),
            Pathway::Language => hit(&self.language_prefixes),
            Pathway::Both => hit(&self.vision_prefixes) || hit(&self.language_prefixes),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeSummary {
    pub merged: Vec<String>,
    pub filtered_out: Vec<String>,
}

/// Applies every adapter whose target passes the pathway filter. All other
/// tensors, and the container header, are left byte-identical.
pub fn merge_store(
    base: &TensorStore,
    adapters: &BTreeMap<String, LoraAdapter>,
    pathway: Pathway,
    filter: &PathwayFilter,
) -> Result<(TensorStore, MergeSummary), LoraError> {
    if let Some(missing) = adapters.keys().find(|t| !base.contains(t)) {
        return Err(LoraError::UnknownTarget(missing.clone()));
    }
    let mut out = base.clone();
    let mut summary = MergeSummary::default();
    for (target, adapter) in adapters {
        if !filter.selects(target, pathway) {
            summary.filtered_out.push(target.clone());
            continue;
        }
        let info = base.info(target).expect("checked above");
        let (rows, cols) = match info.shape.as_slice() {
            [r, c] => (*r, *c),
            other => {
                return Err(LoraError::Dimension {
                    weight: (other.iter().product(), 1),
                    adapter: adapter.target_shape(),
                })
            }
        };
        let w = Matrix::new(rows, cols, base.values(target)?)?;
        let merged = merge(&w, adapter)?;
        out.set_values(target, &merged.data)?;
        summary.merged.push(target.clone());
    }
    Ok((out, summary))
}

const LEFT_SUFFIX: &str = ".lora_B.weight";
const RIGHT_SUFFIX: &str = ".lora_A.weight";

/// Reads adapters from a container in the common PEFT layout:
/// `<module>.lora_A.weight` is `r x d_in` and `<module>.lora_B.weight` is
/// `d_out x r`, targeting `<module>.weight`. The scale comes from
/// `alpha_override`, else the `alpha` metadata entry, else `1 / r`.
pub fn load_adapters(
    store: &TensorStore,
    alpha_override: Option<f64>,
) -> Result<BTreeMap<String, LoraAdapter>, LoraError> {
    let meta_alpha = store
        .metadata()
        .and_then(|m| m.get("alpha"))
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| LoraError::InvalidAdapter(format!("bad alpha metadata '{s}'")))
        })
        .transpose()?;
    let mut out = BTreeMap::new();
    for t in store.tensors() {
        let Some(module) = t.name.strip_suffix(RIGHT_SUFFIX) else {
            continue;
        };
        let left_name = format!("{module}{LEFT_SUFFIX}");
        let left_info = store
            .info(&left_name)
            .ok_or_else(|| LoraError::InvalidAdapter(format!("missing {left_name}")))?;
        let as_matrix = |info: &super::TensorInfo| -> Result<Matrix, LoraError> {
            match info.shape.as_slice() {
                [r, c] => Matrix::new(*r, *c, store.values(&info.name)?),
                s => Err(LoraError::InvalidAdapter(format!(
                    "{} must be 2-D, got {s:?}",
                    info.name
                ))),
            }
        };
        let right = as_matrix(t)?;
        let left = as_matrix(left_info)?;
        let rank = left.cols.max(1) as f64;
        let alpha = alpha_override.or(meta_alpha).unwrap_or(1.0 / rank);
        out.insert(format!("{module}.weight"), LoraAdapter::new(left, right, alpha)?);
    }
    Ok(out)
}

/// Inverse of [`load_adapters`] for a shared alpha.
pub fn adapters_to_store(
    adapters: &BTreeMap<String, LoraAdapter>,
    alpha: Option<f64>,
) -> Result<TensorStore, LoraError> {
    let mut tensors = Vec::new();
    for (target, a) in adapters {
        let module = target.strip_suffix(".weight").unwrap_or(target);
        tensors.push((
            format!("{module}{RIGHT_SUFFIX}"),
            vec![a.right.rows, a.right.cols],
            a.right.data.clone(),
        ));
        tensors.push((
            format!("{module}{LEFT_SUFFIX}"),
            vec![a.left.rows, a.left.cols],
            a.left.data.clone(),
        ));
    }
    let metadata = alpha.map(|a| BTreeMap::from([("alpha".to_string(), a.to_string())]));
    TensorStore::from_tensors(tensors, metadata)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain triple-loop product, written independently of `merge`.
    fn dense_oracle(w: &[Vec<f64>], a: &[Vec<f64>], b: &[Vec<f64>], alpha: f64) -> Vec<Vec<f64>> {
        let mut out = w.to_vec();
        for i in 0..a.len() {
            for j in 0..b[0].len() {
                let s: f64 = (0..b.len()).map(|k| a[i][k] * b[k][j]).sum();
                out[i][j] += alpha * s;
            }
        }
        out
    }

    #[test]
    fn worked_two_by_two() {
        let w = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Matrix::new(2, 1, vec![1.0, 0.0]).unwrap();
        let b = Matrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        let adapter = LoraAdapter::with_default_alpha(a, b).unwrap();
        assert_eq!(adapter.alpha(), 1.0);
        let got = merge(&w, &adapter).unwrap();
        let oracle = dense_oracle(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![1.0], vec![0.0]],
            &[vec![0.0, 1.0]],
            1.0,
        );
        assert_eq!(oracle, vec![vec![1.0, 1.0], vec![0.0, 1.0]]);
        assert_eq!(got.data, vec![1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_adapter_identity_keeps_bits() {
        let w = Matrix::new(2, 2, vec![-0.0, 1.5, f32::NAN, 3.0]).unwrap();
        let adapter =
            LoraAdapter::with_default_alpha(Matrix::zeros(2, 1), Matrix::new(1, 2, vec![1.0, 2.0]).unwrap())
                .unwrap();
        let got = merge(&w, &adapter).unwrap();
        for (a, b) in got.data.iter().zip(&w.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rank_eight_default_scale() {
        let a = Matrix::new(64, 8, (0..512).map(|i| (i % 7) as f32 * 0.01).collect()).unwrap();
        let b = Matrix::new(8, 64, (0..512).map(|i| (i % 5) as f32 * 0.02).collect()).unwrap();
        let adapter = LoraAdapter::with_default_alpha(a, b).unwrap();
        assert_eq!(adapter.alpha(), 1.0 / 8.0);
        let out = merge(&Matrix::zeros(64, 64), &adapter).unwrap();
        assert_eq!(out.shape(), (64, 64));
    }

    #[test]
    fn shape_mismatch_names_both() {
        let adapter =
            LoraAdapter::with_default_alpha(Matrix::zeros(3, 1), Matrix::zeros(1, 2)).unwrap();
        let err = merge(&Matrix::zeros(2, 2), &adapter).unwrap_err();
        assert_eq!(
            err,
            LoraError::Dimension {
                weight: (2, 2),
                adapter: (3, 2)
            }
        );
        assert!(LoraAdapter::new(Matrix::zeros(2, 2), Matrix::zeros(3, 2), 1.0).is_err());
        assert!(LoraAdapter::new(Matrix::zeros(2, 1), Matrix::zeros(1, 2), 0.0).is_err());
    }

    fn toy_store() -> TensorStore {
        TensorStore::from_tensors(
            vec![
                ("visual.blocks.0.attn.qkv.weight".into(), vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]),
                ("model.layers.0.self_attn.q_proj.weight".into(), vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]),
                ("model.embed_tokens.weight".into(), vec![2, 2], vec![9.0, 9.0, 9.0, 9.0]),
            ],
            None,
        )
        .unwrap()
    }

    fn unit_adapter() -> LoraAdapter {
        LoraAdapter::new(
            Matrix::new(2, 1, vec![1.0, 1.0]).unwrap(),
            Matrix::new(1, 2, vec![1.0, 1.0]).unwrap(),
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn pathway_filtering() {
        let base = toy_store();
        let filter = PathwayFilter::default();
        let vision_only: BTreeMap<_, _> =
            [("visual.blocks.0.attn.qkv.weight".to_string(), unit_adapter())].into();
        let (out, s) = merge_store(&base, &vision_only, Pathway::Language, &filter).unwrap();
        assert_eq!(super::super::write_store(&out), super::super::write_store(&base));
        assert!(s.merged.is_empty());

        let both: BTreeMap<_, _> = [
            ("visual.blocks.0.attn.qkv.weight".to_string(), unit_adapter()),
            ("model.layers.0.self_attn.q_proj.weight".to_string(), unit_adapter()),
        ]
        .into();
        let (out, s) = merge_store(&base, &both, Pathway::Both, &filter).unwrap();
        assert_eq!(s.merged.len(), 2);
        let changed: Vec<&str> = base
            .tensors()
            .iter()
            .filter(|t| out.raw_bytes(&t.name).unwrap() != base.raw_bytes(&t.name).unwrap())
            .map(|t| t.name.as_str())
            .collect();
        assert_eq!(changed.len(), 2);
        assert_eq!(
            out.values("visual.blocks.0.attn.qkv.weight").unwrap(),
            vec![1.5, 2.5, 3.5, 4.5]
        );

        let missing: BTreeMap<_, _> = [("missing.weight".to_string(), unit_adapter())].into();
        assert_eq!(
            merge_store(&base, &missing, Pathway::Both, &filter).unwrap_err(),
            LoraError::UnknownTarget("missing.weight".into())
        );
    }

    #[test]
    fn adapter_file_round_trip() {
        let adapters: BTreeMap<_, _> =
            [("model.layers.0.self_attn.q_proj.weight".to_string(), unit_adapter())].into();
        let store = adapters_to_store(&adapters, Some(0.5)).unwrap();
        let back = load_adapters(&store, None).unwrap();
        assert_eq!(back, adapters);
        let overridden = load_adapters(&store, Some(2.0)).unwrap();
        assert_eq!(overridden.values().next().unwrap().alpha(), 2.0);
        let no_alpha = adapters_to_store(&adapters, None).unwrap();
        assert_eq!(load_adapters(&no_alpha, None).unwrap().values().next().unwrap().alpha(), 1.0);
    }

    #[test]
    fn pathway_parsing() {
        assert_eq!("V+L".parse::<Pathway>().unwrap(), Pathway::Both);
        assert_eq!("l".parse::<Pathway>().unwrap(), Pathway::Language);
        assert!("X".parse::<Pathway>().is_err());
        assert_eq!(Pathway::Both.to_string(), "V+L");
    }
}
