//! LoRA adapter ingestion and delta composition.
//!
//! An adapter stores, per targeted module, a pair of low-rank factors: A is
//! `r x in` and B is `out x r`. The product B A has the shape of the base
//! projection matrix and is what the fingerprint pipelines consume.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::checkpoint::{CheckpointIndex, TensorMatrix};
use crate::error::{Error, Result};
use crate::taxonomy::{ArchPreset, LoraHalf, ModelLayout, ProjectionKind};

/// The optional adapter_config.json next to an adapter file.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct LoraConfig {
    pub r: Option<usize>,
    pub lora_alpha: Option<f64>,
}

impl LoraConfig {
    pub fn from_json_str(json: &str) -> Result<LoraConfig> {
        serde_json::from_str(json).map_err(|e| Error::Preset(format!("adapter config: {e}")))
    }

    pub fn from_json_file(path: &Path) -> Result<LoraConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json_str(&text)
    }
}

/// One targeted module's A/B factors.
#[derive(Debug, Clone)]
pub struct LoraAdapterPair {
    pub layer: usize,
    pub kind: ProjectionKind,
    pub a: TensorMatrix,
    pub b: TensorMatrix,
    pub r: usize,
    pub alpha: Option<f64>,
}

impl LoraAdapterPair {
    pub fn out_dim(&self) -> usize {
        self.b.rows
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols
    }

    /// When a base layout is available, the composed shape must match the
    /// base projection for this cell.
    pub fn check_against_layout(&self, layout: &ModelLayout) -> Result<()> {
        let group = layout.group(self.kind);
        let meta = group.get(self.layer).ok_or(Error::MissingCell {
            layer: self.layer,
            kind: self.kind.name().to_string(),
        })?;
        if meta.shape != [self.out_dim(), self.in_dim()] {
            return Err(Error::ComposeShape {
                layer: self.layer,
                kind: self.kind.name().to_string(),
                detail: format!(
                    "composed {}x{} but base {} is {:?}",
                    self.out_dim(),
                    self.in_dim(),
                    meta.name,
                    meta.shape
                ),
            });
        }
        Ok(())
    }
}

/// Collect every complete (A, B) pair from the adapter index. Kinds the
/// adapter does not target are simply absent; a lone half is an error, as is
/// a rank disagreement inside a pair. Pairs come back in layer-major order
/// with kinds in canonical order.
pub fn collect_lora_pairs(
    index: &CheckpointIndex,
    preset: &ArchPreset,
    config: Option<&LoraConfig>,
) -> Result<Vec<LoraAdapterPair>> {
    let mut halves: BTreeMap<(usize, usize), (Option<String>, Option<String>)> = BTreeMap::new();
    for meta in index.metas() {
        if let Some((layer, kind, half)) = preset.classify_lora(&meta.name)? {
            let entry = halves.entry((layer, kind.index())).or_default();
            let slot = match half {
                LoraHalf::A => &mut entry.0,
                LoraHalf::B => &mut entry.1,
            };
            if let Some(first) = slot {
                return Err(Error::DuplicateTensor {
                    name: meta.name.clone(),
                    first: first.clone(),
                    second: meta.name.clone(),
                });
            }
            *slot = Some(meta.name.clone());
        }
    }

    let mut pairs = Vec::new();
    for ((layer, kind_idx), (a_name, b_name)) in halves {
        let kind = ProjectionKind::ALL[kind_idx];
        let (a_name, b_name) = match (a_name, b_name) {
            (Some(a), Some(b)) => (a, b),
            (Some(a), None) => {
                return Err(Error::UnpairedAdapter {
                    layer,
                    kind: kind.name().to_string(),
                    present: a,
                    missing: "lora_B".to_string(),
                })
            }
            (None, Some(b)) => {
                return Err(Error::UnpairedAdapter {
                    layer,
                    kind: kind.name().to_string(),
                    present: b,
                    missing: "lora_A".to_string(),
                })
            }
            (None, None) => unreachable!("entry created on first match"),
        };
        let a = index.load_matrix(&a_name)?;
        let b = index.load_matrix(&b_name)?;
        if a.rows != b.cols {
            return Err(Error::AdapterRankMismatch {
                layer,
                kind: kind.name().to_string(),
                a_rank: a.rows,
                b_rank: b.cols,
            });
        }
        let r = a.rows;
        pairs.push(LoraAdapterPair {
            layer,
            kind,
            a,
            b,
            r,
            alpha: config.and_then(|c| c.lora_alpha),
        });
    }
    // BTreeMap keys are (layer, kind index), already the canonical order
    Ok(pairs)
}

/// delta = B A, optionally scaled by alpha / r when the adapter carries an
/// alpha. Row-major product with the accumulation running over the shared
/// rank dimension.
pub fn compose_delta(pair: &LoraAdapterPair, apply_scaling: bool) -> Result<TensorMatrix> {
    let (out, r, inn) = (pair.b.rows, pair.r, pair.a.cols);
    if pair.b.cols != pair.a.rows {
        return Err(Error::ComposeShape {
            layer: pair.layer,
            kind: pair.kind.name().to_string(),
            detail: format!("B is {}x{} but A is {}x{}", pair.b.rows, pair.b.cols, pair.a.rows, pair.a.cols),
        });
    }
    let scale = match (apply_scaling, pair.alpha) {
        (true, Some(alpha)) => alpha / r as f64,
        _ => 1.0,
    };
    let mut values = vec![0.0; out * inn];
    for i in 0..out {
        for k in 0..r {
            let b_ik = pair.b.values[i * r + k];
            if b_ik == 0.0 {
                continue;
            }
            let a_row = &pair.a.values[k * inn..(k + 1) * inn];
            let out_row = &mut values[i * inn..(i + 1) * inn];
            for (o, a) in out_row.iter_mut().zip(a_row) {
                *o += b_ik * a;
            }
        }
    }
    if scale != 1.0 {
        for v in &mut values {
            *v *= scale;
        }
    }
    Ok(TensorMatrix {
        rows: out,
        cols: inn,
        values,
        name: format!("layers.{}.{}.delta", pair.layer, pair.kind.name().to_lowercase()),
        source_dtype: crate::checkpoint::Dtype::F64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{open_checkpoint, write_safetensors, Dtype, TensorSpec};
    use crate::fixtures::write_lora_adapter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn pair_from(a: TensorMatrix, b: TensorMatrix, alpha: Option<f64>) -> LoraAdapterPair {
        let r = a.rows;
        LoraAdapterPair {
            layer: 0,
            kind: ProjectionKind::Q,
            a,
            b,
            r,
            alpha,
        }
    }

    #[test]
    fn collect_pairs_from_fixture() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("adapter_model.safetensors");
        write_lora_adapter(
            &path,
            2,
            &[ProjectionKind::Q, ProjectionKind::V],
            4,
            8,
            8,
            7,
        )
        .unwrap();
        let index = open_checkpoint(&[path]).unwrap();
        let pairs = collect_lora_pairs(&index, &ArchPreset::llama(), None).unwrap();
        assert_eq!(pairs.len(), 4);
        for p in &pairs {
            assert_eq!(p.r, 4);
            assert!(p.alpha.is_none());
        }
        // layer-major, canonical kinds inside a layer
        let order: Vec<(usize, ProjectionKind)> = pairs.iter().map(|p| (p.layer, p.kind)).collect();
        assert_eq!(
            order,
            vec![
                (0, ProjectionKind::Q),
                (0, ProjectionKind::V),
                (1, ProjectionKind::Q),
                (1, ProjectionKind::V),
            ]
        );
    }

    #[test]
    fn missing_half_is_unpaired() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("adapter.safetensors");
        let a = TensorSpec::from_f64(
            "base_model.model.model.layers.0.self_attn.q_proj.lora_A.weight",
            Dtype::F32,
            vec![2, 4],
            &[0.1; 8],
        );
        write_safetensors(&path, &[a]).unwrap();
        let index = open_checkpoint(&[path]).unwrap();
        let err = collect_lora_pairs(&index, &ArchPreset::llama(), None).unwrap_err();
        match err {
            Error::UnpairedAdapter {
                layer,
                kind,
                missing,
                ..
            } => {
                assert_eq!(layer, 0);
                assert_eq!(kind, "Q");
                assert_eq!(missing, "lora_B");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rank_mismatch_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("adapter.safetensors");
        let a = TensorSpec::from_f64(
            "model.layers.0.self_attn.q_proj.lora_A.weight",
            Dtype::F32,
            vec![2, 4],
            &[0.1; 8],
        );
        let b = TensorSpec::from_f64(
            "model.layers.0.self_attn.q_proj.lora_B.weight",
            Dtype::F32,
            vec![4, 3],
            &[0.1; 12],
        );
        write_safetensors(&path, &[a, b]).unwrap();
        let index = open_checkpoint(&[path]).unwrap();
        let err = collect_lora_pairs(&index, &ArchPreset::llama(), None).unwrap_err();
        assert!(matches!(
            err,
            Error::AdapterRankMismatch {
                a_rank: 2,
                b_rank: 3,
                ..
            }
        ));
    }

    #[test]
    fn config_alpha_is_attached() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("adapter.safetensors");
        write_lora_adapter(&path, 1, &[ProjectionKind::Q], 8, 16, 16, 3).unwrap();
        let index = open_checkpoint(&[path]).unwrap();
        let config = LoraConfig::from_json_str(r#"{"r": 8, "lora_alpha": 16}"#).unwrap();
        let pairs = collect_lora_pairs(&index, &ArchPreset::llama(), Some(&config)).unwrap();
        assert_eq!(pairs[0].alpha, Some(16.0));
        assert_eq!(pairs[0].r, 8);
    }

    #[test]
    fn identity_composition() {
        let a = TensorMatrix::new("a", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = TensorMatrix::new("b", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let delta = compose_delta(&pair_from(a, b, None), false).unwrap();
        assert_eq!(delta.values, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let a = TensorMatrix::new("a", 2, 3, vec![1.0; 6]);
        let b = TensorMatrix::new("b", 4, 2, vec![0.0; 8]);
        let delta = compose_delta(&pair_from(a, b, None), false).unwrap();
        assert!(delta.values.iter().all(|v| *v == 0.0));
        assert_eq!(delta.rows, 4);
        assert_eq!(delta.cols, 3);
    }

    /// Independent oracle: per-cell dot products rather than row
    /// accumulation.
    fn naive_product(b: &TensorMatrix, a: &TensorMatrix) -> Vec<f64> {
        let mut out = vec![0.0; b.rows * a.cols];
        for i in 0..b.rows {
            for j in 0..a.cols {
                let mut acc = 0.0;
                for k in 0..a.rows {
                    acc += b.values[i * b.cols + k] * a.values[k * a.cols + j];
                }
                out[i * a.cols + j] = acc;
            }
        }
        out
    }

    #[test]
    fn composition_matches_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a_vals: Vec<f64> = (0..24).map(|_| rng.gen::<f64>() - 0.5).collect();
        let b_vals: Vec<f64> = (0..20).map(|_| rng.gen::<f64>() - 0.5).collect();
        let a = TensorMatrix::new("a", 4, 6, a_vals);
        let b = TensorMatrix::new("b", 5, 4, b_vals);
        let want = naive_product(&b, &a);
        let delta = compose_delta(&pair_from(a, b, None), false).unwrap();
        for (g, w) in delta.values.iter().zip(&want) {
            let denom = w.abs().max(1e-30);
            assert!((g - w).abs() / denom <= 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn scaling_flag_applies_alpha_over_r() {
        let a = TensorMatrix::new("a", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = TensorMatrix::new("b", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let pair = pair_from(a, b, Some(16.0));
        let unscaled = compose_delta(&pair, false).unwrap();
        let scaled = compose_delta(&pair, true).unwrap();
        for (u, s) in unscaled.values.iter().zip(&scaled.values) {
            assert_eq!(*s, u * 8.0);
        }
        // flag without alpha is a no-op
        let a = TensorMatrix::new("a", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = TensorMatrix::new("b", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let plain = compose_delta(&pair_from(a, b, None), true).unwrap();
        assert_eq!(plain.values, unscaled.values);
    }

    #[test]
    fn bilinearity_in_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a_vals: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
        let b_vals: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
        let c = 2.75;
        let a = TensorMatrix::new("a", 3, 4, a_vals.clone());
        let b = TensorMatrix::new("b", 4, 3, b_vals.clone());
        let base = compose_delta(&pair_from(a, b, None), false).unwrap();
        let a_scaled = TensorMatrix::new("a", 3, 4, a_vals.iter().map(|v| v * c).collect());
        let b2 = TensorMatrix::new("b", 4, 3, b_vals);
        let scaled = compose_delta(&pair_from(a_scaled, b2, None), false).unwrap();
        for (s, v) in scaled.values.iter().zip(&base.values) {
            let denom = (c * v).abs().max(1e-30);
            assert!((s - c * v).abs() / denom <= 1e-12);
        }
    }

    #[test]
    fn check_against_layout_validates_shape() {
        use crate::taxonomy::collect_layout;
        let dir = tempdir().unwrap();
        let mut tensors = Vec::new();
        for layer in 0..1 {
            for kind in ProjectionKind::ALL {
                tensors.push(TensorSpec::from_f64(
                    crate::fixtures::llama_tensor_name(layer, kind),
                    Dtype::F32,
                    vec![4, 4],
                    &[0.5; 16],
                ));
            }
        }
        let path = dir.path().join("base.safetensors");
        write_safetensors(&path, &tensors).unwrap();
        let index = open_checkpoint(&[path]).unwrap();
        let layout = collect_layout(&index, &ArchPreset::llama()).unwrap();

        let a = TensorMatrix::new("a", 2, 4, vec![0.1; 8]);
        let b = TensorMatrix::new("b", 4, 2, vec![0.1; 8]);
        assert!(pair_from(a, b, None).check_against_layout(&layout).is_ok());

        let a = TensorMatrix::new("a", 2, 3, vec![0.1; 6]);
        let b = TensorMatrix::new("b", 4, 2, vec![0.1; 8]);
        assert!(matches!(
            pair_from(a, b, None).check_against_layout(&layout).unwrap_err(),
            Error::ComposeShape { .. }
        ));
    }
}
