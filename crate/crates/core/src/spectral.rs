//! Top-rank singular values per projection matrix, normalized into
//! comparable profiles.
//!
//! Singular values come from the symmetric eigendecomposition of the smaller
//! Gram matrix; eigenvalues are clamped at zero and square-rooted. Only the
//! leading values are kept, so the squared conditioning of the Gram route is
//! immaterial at the tolerances used here.

use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorMatrix;
use crate::error::{Error, Result};
use crate::linalg::{small_gram, sym_eigen};
use crate::taxonomy::{ModelLayout, ProjectionKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileNormalization {
    /// Divide by the leading singular value; the first entry becomes 1.
    NormalizeByTop,
    /// Divide by the Euclidean norm of the retained values.
    UnitL2,
}

impl ProfileNormalization {
    pub fn name(self) -> &'static str {
        match self {
            ProfileNormalization::NormalizeByTop => "NormalizeByTop",
            ProfileNormalization::UnitL2 => "UnitL2",
        }
    }
}

/// The retained singular values of one projection matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularProfile {
    pub layer: usize,
    pub kind: ProjectionKind,
    pub values: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// All profiles of a model, layer-major with kinds in canonical order.
#[derive(Debug, Clone)]
pub struct ProfileSet {
    pub profiles: Vec<SingularProfile>,
    pub rank: usize,
    pub model_id: String,
}

/// The `rank` largest singular values of `m`, descending.
pub fn top_singular_values(m: &TensorMatrix, rank: usize) -> Result<Vec<f64>> {
    let min_dim = m.rows.min(m.cols);
    if rank == 0 || rank > min_dim {
        return Err(Error::RankOutOfRange {
            rank,
            name: m.name.clone(),
            rows: m.rows,
            cols: m.cols,
        });
    }
    for (i, v) in m.values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                name: m.name.clone(),
                index: i,
            });
        }
    }
    let (gram, n) = small_gram(m);
    let eig = sym_eigen(&gram, n, false);
    Ok(eig.values[..rank].iter().map(|&l| l.max(0.0).sqrt()).collect())
}

/// Normalize a descending nonnegative singular-value vector.
pub fn normalize_profile(values: &[f64], scheme: ProfileNormalization) -> Result<Vec<f64>> {
    let top = values.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(Error::DegenerateProfile {
            name: String::new(),
        });
    }
    match scheme {
        ProfileNormalization::NormalizeByTop => Ok(values.iter().map(|v| v / top).collect()),
        ProfileNormalization::UnitL2 => {
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok(values.iter().map(|v| v / norm).collect())
        }
    }
}

/// Decompose every matrix of the layout. Matrices are loaded and decomposed
/// independently (in parallel); the result order is fixed by (layer, kind)
/// regardless of scheduling.
pub fn build_profile_set(
    index: &crate::checkpoint::CheckpointIndex,
    layout: &ModelLayout,
    rank: usize,
    scheme: ProfileNormalization,
    model_id: &str,
) -> Result<ProfileSet> {
    use rayon::prelude::*;

    let cells: Vec<(usize, ProjectionKind, String)> = layout
        .cells()
        .map(|(layer, kind, meta)| (layer, kind, meta.name.clone()))
        .collect();

    // check the rank precondition up front so the error names the matrix
    for (layer, kind, meta) in layout.cells() {
        let min_dim = meta.shape[0].min(meta.shape[1]);
        if rank == 0 || rank > min_dim {
            return Err(Error::RankOutOfRange {
                rank,
                name: meta.name.clone(),
                rows: meta.shape[0],
                cols: meta.shape[1],
            }
            .with_context(format!("profile ({layer}, {kind})")));
        }
    }

    let profiles: Vec<SingularProfile> = cells
        .par_iter()
        .map(|(layer, kind, name)| {
            let matrix = index.load_matrix(name)?;
            profile_of(&matrix, *layer, *kind, rank, scheme)
        })
        .collect::<Result<_>>()?;

    Ok(ProfileSet {
        profiles,
        rank,
        model_id: model_id.to_string(),
    })
}

/// Profile of one already-loaded matrix.
pub fn profile_of(
    matrix: &TensorMatrix,
    layer: usize,
    kind: ProjectionKind,
    rank: usize,
    scheme: ProfileNormalization,
) -> Result<SingularProfile> {
    let values = top_singular_values(matrix, rank)
        .map_err(|e| e.with_context(format!("profile ({layer}, {kind})")))?;
    let normalized = normalize_profile(&values, scheme).map_err(|_| {
        Error::DegenerateProfile {
            name: matrix.name.clone(),
        }
        .with_context(format!("profile ({layer}, {kind})"))
    })?;
    Ok(SingularProfile {
        layer,
        kind,
        values,
        normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{embed_spectrum, jacobi_eigenvalues, random_orthogonal};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        if b == 0.0 {
            a.abs()
        } else {
            ((a - b) / b).abs()
        }
    }

    #[test]
    fn identity_singular_values() {
        let mut values = vec![0.0; 9];
        for i in 0..3 {
            values[i * 3 + i] = 1.0;
        }
        let m = TensorMatrix::new("i", 3, 3, values);
        let got = top_singular_values(&m, 2).unwrap();
        assert!((got[0] - 1.0).abs() < 1e-12);
        assert!((got[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_singular_values() {
        let mut values = vec![0.0; 9];
        values[0] = 3.0;
        values[4] = 2.0;
        values[8] = 1.0;
        let m = TensorMatrix::new("d", 3, 3, values);
        let got = top_singular_values(&m, 3).unwrap();
        for (g, w) in got.iter().zip([3.0, 2.0, 1.0]) {
            assert!(rel(*g, w) < 1e-12);
        }
    }

    #[test]
    fn random_matrix_matches_gram_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let values: Vec<f64> = (0..35).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let m = TensorMatrix::new("r", 5, 7, values.clone());
        let got = top_singular_values(&m, 4).unwrap();

        // oracle: 5x5 Gram matrix, independent Jacobi eigensolver
        let mut gram = vec![0.0; 25];
        for i in 0..5 {
            for j in 0..5 {
                gram[i * 5 + j] = (0..7).map(|k| values[i * 7 + k] * values[j * 7 + k]).sum();
            }
        }
        let eig = jacobi_eigenvalues(&gram, 5);
        for (g, l) in got.iter().zip(&eig) {
            assert!(rel(*g, l.max(0.0).sqrt()) <= 1e-8, "{g} vs {}", l.sqrt());
        }
    }

    #[test]
    fn rank_out_of_range() {
        let m = TensorMatrix::new("t", 2, 3, vec![1.0; 6]);
        assert!(matches!(
            top_singular_values(&m, 3).unwrap_err(),
            Error::RankOutOfRange { rank: 3, .. }
        ));
        assert!(matches!(
            top_singular_values(&m, 0).unwrap_err(),
            Error::RankOutOfRange { rank: 0, .. }
        ));
        assert!(top_singular_values(&m, 2).is_ok());
    }

    #[test]
    fn normalize_by_top() {
        let got = normalize_profile(&[3.0, 2.0, 1.0], ProfileNormalization::NormalizeByTop).unwrap();
        assert_eq!(got[0], 1.0);
        assert!(rel(got[1], 2.0 / 3.0) < 1e-15);
        assert!(rel(got[2], 1.0 / 3.0) < 1e-15);
        let flat = normalize_profile(&[1.0, 1.0], ProfileNormalization::NormalizeByTop).unwrap();
        assert_eq!(flat, vec![1.0, 1.0]);
    }

    #[test]
    fn normalize_unit_l2() {
        let got = normalize_profile(&[4.0, 3.0], ProfileNormalization::UnitL2).unwrap();
        assert!(rel(got[0], 0.8) < 1e-15);
        assert!(rel(got[1], 0.6) < 1e-15);
    }

    #[test]
    fn zero_profile_is_degenerate() {
        assert!(matches!(
            normalize_profile(&[0.0, 0.0], ProfileNormalization::NormalizeByTop).unwrap_err(),
            Error::DegenerateProfile { .. }
        ));
    }

    #[test]
    fn singular_values_scale_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..48).map(|_| rng.gen::<f64>() - 0.5).collect();
        let m = TensorMatrix::new("m", 6, 8, values.clone());
        let scaled = TensorMatrix::new("m", 6, 8, values.iter().map(|v| v * 2.5).collect());
        let a = top_singular_values(&m, 6).unwrap();
        let b = top_singular_values(&scaled, 6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(rel(*y, 2.5 * x) <= 1e-12);
        }
        let na = normalize_profile(&a, ProfileNormalization::NormalizeByTop).unwrap();
        let nb = normalize_profile(&b, ProfileNormalization::NormalizeByTop).unwrap();
        for (x, y) in na.iter().zip(&nb) {
            assert!(rel(*y, *x) <= 1e-12);
        }
    }

    #[test]
    fn transpose_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..40).map(|_| rng.gen::<f64>() - 0.5).collect();
        let m = TensorMatrix::new("m", 5, 8, values.clone());
        let mut tvals = vec![0.0; 40];
        for i in 0..5 {
            for j in 0..8 {
                tvals[j * 5 + i] = values[i * 8 + j];
            }
        }
        let t = TensorMatrix::new("mt", 8, 5, tvals);
        let a = top_singular_values(&m, 5).unwrap();
        let b = top_singular_values(&t, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(rel(*x, *y) <= 1e-10);
        }
    }

    #[test]
    fn orthogonal_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 10;
        let values: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let m = TensorMatrix::new("m", n, n, values.clone());
        let q = random_orthogonal(n, &mut rng);
        let mut rotated = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                rotated[i * n + j] = (0..n).map(|k| q[i * n + k] * values[k * n + j]).sum();
            }
        }
        let r = TensorMatrix::new("qm", n, n, rotated);
        let a = top_singular_values(&m, n).unwrap();
        let b = top_singular_values(&r, n).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(rel(*x, *y) <= 1e-8);
        }
    }

    #[test]
    fn embedded_spectrum_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let spectrum: Vec<f64> = (0..12).map(|j| 2f64.powi(-(j as i32))).collect();
        let w = embed_spectrum(12, 16, &spectrum, &mut rng);
        let m = TensorMatrix::new("w", 12, 16, w);
        let got = top_singular_values(&m, 8).unwrap();
        for (g, s) in got.iter().zip(&spectrum) {
            assert!(rel(*g, *s) <= 1e-9, "{g} vs {s}");
        }
    }
}
