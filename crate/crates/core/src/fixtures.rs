//! Synthetic checkpoint and adapter generation, plus a reference Jacobi
//! eigensolver. Everything here exists to back tests and demos with inputs
//! whose ground truth is known by construction.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{write_safetensors, Dtype, TensorSpec};
use crate::error::Result;
use crate::taxonomy::ProjectionKind;

/// Cyclic Jacobi eigensolver, kept deliberately separate from the
/// Householder/QL solver in `linalg` so the two can check each other.
/// Returns eigenvalues in descending order.
pub fn jacobi_eigenvalues(matrix: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = f64::EPSILON * f64::EPSILON * norm * norm;
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[p * n + k] = a[k * n + p];
                    a[k * n + q] = s * akp + c * akq;
                    a[q * n + k] = a[k * n + q];
                }
            }
        }
    }
    let mut values: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    values.sort_by(|x, y| y.total_cmp(x));
    values
}

/// Standard normal draws via the polar method.
pub fn gaussian_values(count: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (u, v, s) = loop {
            let u = rng.gen::<f64>() * 2.0 - 1.0;
            let v = rng.gen::<f64>() * 2.0 - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                break (u, v, s);
            }
        };
        let factor = (-2.0 * s.ln() / s).sqrt();
        out.push(u * factor * std);
        if out.len() < count {
            out.push(v * factor * std);
        }
    }
    out
}

/// Random orthogonal matrix from QR of a Gaussian matrix, via twice-applied
/// modified Gram-Schmidt on the columns.
pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut m = gaussian_values(n * n, 1.0, rng);
    for j in 0..n {
        for _pass in 0..2 {
            for prev in 0..j {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += m[i * n + j] * m[i * n + prev];
                }
                for i in 0..n {
                    m[i * n + j] -= dot * m[i * n + prev];
                }
            }
        }
        let norm: f64 = (0..n).map(|i| m[i * n + j] * m[i * n + j]).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "degenerate column in random orthogonal draw");
        for i in 0..n {
            m[i * n + j] /= norm;
        }
    }
    m
}

/// rows x cols matrix with the prescribed singular values, embedded in
/// random orthogonal bases: U diag(spectrum) Vt.
pub fn embed_spectrum(
    rows: usize,
    cols: usize,
    spectrum: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let k = rows.min(cols);
    assert!(spectrum.len() == k, "spectrum must have min(rows, cols) entries");
    let u = random_orthogonal(rows, rng);
    let v = random_orthogonal(cols, rng);
    let mut w = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for (idx, sigma) in spectrum.iter().enumerate() {
                acc += u[i * rows + idx] * sigma * v[j * cols + idx];
            }
            w[i * cols + j] = acc;
        }
    }
    w
}

pub fn llama_tensor_name(layer: usize, kind: ProjectionKind) -> String {
    let (block, proj) = match kind {
        ProjectionKind::Q => ("self_attn", "q_proj"),
        ProjectionKind::K => ("self_attn", "k_proj"),
        ProjectionKind::V => ("self_attn", "v_proj"),
        ProjectionKind::O => ("self_attn", "o_proj"),
        ProjectionKind::Gate => ("mlp", "gate_proj"),
        ProjectionKind::Up => ("mlp", "up_proj"),
        ProjectionKind::Down => ("mlp", "down_proj"),
    };
    format!("model.layers.{layer}.{block}.{proj}.weight")
}

fn tensor_rng(seed: u64, layer: usize, kind: ProjectionKind) -> ChaCha8Rng {
    let stream = (layer as u64) * 7 + kind.index() as u64 + 1;
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream))
}

/// Checkpoint with Gaussian weights; group of `kind` is drawn with
/// `stds[kind.index()]`. All tensors are `rows x cols` and stored as F64.
pub fn write_gaussian_checkpoint(
    path: &Path,
    layers: usize,
    rows: usize,
    cols: usize,
    stds: [f64; 7],
    seed: u64,
) -> Result<()> {
    let mut tensors = Vec::new();
    for layer in 0..layers {
        for kind in ProjectionKind::ALL {
            let mut rng = tensor_rng(seed, layer, kind);
            let values = gaussian_values(rows * cols, stds[kind.index()], &mut rng);
            tensors.push(TensorSpec::from_f64(
                llama_tensor_name(layer, kind),
                Dtype::F64,
                vec![rows, cols],
                &values,
            ));
        }
    }
    write_safetensors(path, &tensors)
}

/// Shapes used by the spectrum fixture: attention kinds are square `dim x
/// dim`, Gate/Up are `(dim + 8) x dim` and Down is `dim x (dim + 8)`, so both
/// Gram branches get exercised.
pub fn spectrum_fixture_shape(kind: ProjectionKind, dim: usize) -> (usize, usize) {
    match kind {
        ProjectionKind::Gate | ProjectionKind::Up => (dim + 8, dim),
        ProjectionKind::Down => (dim, dim + 8),
        _ => (dim, dim),
    }
}

/// Checkpoint engineered so the kinds in `geometric` carry the spectrum
/// 2^0, 2^-1, 2^-2, ... and every other kind a flat all-ones spectrum.
/// After per-profile normalization the two families sit in two well
/// separated clusters. `scale` multiplies every weight.
pub fn write_spectrum_checkpoint(
    path: &Path,
    layers: usize,
    dim: usize,
    geometric: &[ProjectionKind],
    scale: f64,
    seed: u64,
) -> Result<()> {
    let mut tensors = Vec::new();
    for layer in 0..layers {
        for kind in ProjectionKind::ALL {
            let (rows, cols) = spectrum_fixture_shape(kind, dim);
            let k = rows.min(cols);
            let spectrum: Vec<f64> = if geometric.contains(&kind) {
                (0..k).map(|j| 2f64.powi(-(j as i32))).collect()
            } else {
                vec![1.0; k]
            };
            let mut rng = tensor_rng(seed, layer, kind);
            let mut values = embed_spectrum(rows, cols, &spectrum, &mut rng);
            if scale != 1.0 {
                for v in &mut values {
                    *v *= scale;
                }
            }
            tensors.push(TensorSpec::from_f64(
                llama_tensor_name(layer, kind),
                Dtype::F64,
                vec![rows, cols],
                &values,
            ));
        }
    }
    write_safetensors(path, &tensors)
}

/// Adapter file targeting `kinds` on every layer, PEFT-style names with the
/// usual `base_model.model.` prefix. A is `r x in_dim`, B is `out_dim x r`,
/// both Gaussian.
pub fn write_lora_adapter(
    path: &Path,
    layers: usize,
    kinds: &[ProjectionKind],
    r: usize,
    out_dim: usize,
    in_dim: usize,
    seed: u64,
) -> Result<()> {
    let mut tensors = Vec::new();
    for layer in 0..layers {
        for &kind in kinds {
            let stem = llama_tensor_name(layer, kind);
            let stem = stem.strip_suffix(".weight").unwrap();
            let mut rng = tensor_rng(seed, layer, kind);
            let a = gaussian_values(r * in_dim, 0.02, &mut rng);
            let b = gaussian_values(out_dim * r, 0.02, &mut rng);
            tensors.push(TensorSpec::from_f64(
                format!("base_model.model.{stem}.lora_A.weight"),
                Dtype::F64,
                vec![r, in_dim],
                &a,
            ));
            tensors.push(TensorSpec::from_f64(
                format!("base_model.model.{stem}.lora_B.weight"),
                Dtype::F64,
                vec![out_dim, r],
                &b,
            ));
        }
    }
    write_safetensors(path, &tensors)
}
