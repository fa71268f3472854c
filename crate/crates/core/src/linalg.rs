//! Dense symmetric eigendecomposition.
//!
//! Householder tridiagonalization followed by implicit-shift QL, the classic
//! EISPACK route. Eigenvector accumulation is optional; the spectral path
//! only needs values, the 2-D projection needs vectors of a small covariance
//! matrix.

use crate::checkpoint::TensorMatrix;

/// Eigenvalues in descending order; `vectors[j]` is the unit eigenvector for
/// `values[j]` when requested.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Option<Vec<Vec<f64>>>,
}

/// Decompose a symmetric n x n matrix given in row-major order.
/// Only the lower triangle is read.
pub fn sym_eigen(matrix: &[f64], n: usize, want_vectors: bool) -> SymEigen {
    assert_eq!(matrix.len(), n * n);
    if n == 0 {
        return SymEigen {
            values: Vec::new(),
            vectors: want_vectors.then(Vec::new),
        };
    }
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| matrix[i * n..(i + 1) * n].to_vec())
        .collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut a, &mut d, &mut e, want_vectors);
    ql_implicit(&mut d, &mut e, want_vectors.then_some(&mut a));

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
    let values: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let vectors = want_vectors.then(|| {
        order
            .iter()
            .map(|&j| (0..n).map(|k| a[k][j]).collect())
            .collect()
    });
    SymEigen { values, vectors }
}

/// Householder reduction to tridiagonal form. On return `d` holds the
/// diagonal and `e[1..]` the subdiagonal. With `accumulate`, `a` is replaced
/// by the orthogonal transformation matrix.
fn tridiagonalize(a: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64], accumulate: bool) {
    let n = d.len();
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| a[i][k].abs()).sum();
            if scale == 0.0 {
                e[i] = a[i][l];
            } else {
                for k in 0..=l {
                    a[i][k] /= scale;
                    h += a[i][k] * a[i][k];
                }
                let f = a[i][l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i][l] = f - g;
                let mut f_acc = 0.0;
                for j in 0..=l {
                    if accumulate {
                        a[j][i] = a[i][j] / h;
                    }
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[j][k] * a[i][k];
                    }
                    for k in j + 1..=l {
                        g += a[k][j] * a[i][k];
                    }
                    e[j] = g / h;
                    f_acc += e[j] * a[i][j];
                }
                let hh = f_acc / (h + h);
                for j in 0..=l {
                    let f = a[i][j];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[j][k] -= f * e[k] + g * a[i][k];
                    }
                }
            }
        } else {
            e[i] = a[i][l];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for i in 0..n {
        if accumulate {
            if d[i] != 0.0 {
                for j in 0..i {
                    let mut g = 0.0;
                    for k in 0..i {
                        g += a[i][k] * a[k][j];
                    }
                    for k in 0..i {
                        a[k][j] -= g * a[k][i];
                    }
                }
            }
            d[i] = a[i][i];
            a[i][i] = 1.0;
            for j in 0..i {
                a[j][i] = 0.0;
                a[i][j] = 0.0;
            }
        } else {
            d[i] = a[i][i];
        }
    }
}

/// Implicit-shift QL on a tridiagonal matrix. Rotations are applied to the
/// columns of `z` when eigenvectors are being accumulated.
fn ql_implicit(d: &mut [f64], e: &mut [f64], mut z: Option<&mut [Vec<f64>]>) {
    let n = d.len();
    if n <= 1 {
        return;
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            // 60 shifted QL steps always suffice for f64 tridiagonals
            assert!(iter <= 60, "eigensolver failed to converge");

            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                if let Some(z) = z.as_deref_mut() {
                    for row in z.iter_mut() {
                        f = row[i + 1];
                        row[i + 1] = s * row[i] + c * f;
                        row[i] = c * row[i] - s * f;
                    }
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}

/// Gram matrix over the smaller side: M Mt when rows <= cols, Mt M otherwise.
/// Its eigenvalues are the squared singular values of M. Summation always
/// runs over the long dimension, so a matrix and its transpose produce the
/// identical Gram matrix when the sides differ.
pub fn small_gram(m: &TensorMatrix) -> (Vec<f64>, usize) {
    let (rows, cols) = (m.rows, m.cols);
    if rows <= cols {
        let n = rows;
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            let ri = &m.values[i * cols..(i + 1) * cols];
            for j in 0..=i {
                let rj = &m.values[j * cols..(j + 1) * cols];
                let mut acc = 0.0;
                for k in 0..cols {
                    acc += ri[k] * rj[k];
                }
                g[i * n + j] = acc;
                g[j * n + i] = acc;
            }
        }
        (g, n)
    } else {
        let n = cols;
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut acc = 0.0;
                for k in 0..rows {
                    acc += m.values[k * cols + i] * m.values[k * cols + j];
                }
                g[i * n + j] = acc;
                g[j * n + i] = acc;
            }
        }
        (g, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::jacobi_eigenvalues;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gen::<f64>() * 2.0 - 1.0;
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        m
    }

    #[test]
    fn diagonal_matrix_eigenvalues() {
        let m = vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        let eig = sym_eigen(&m, 3, false);
        assert!((eig.values[0] - 3.0).abs() < 1e-14);
        assert!((eig.values[1] - 2.0).abs() < 1e-14);
        assert!((eig.values[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn identity_eigenvalues() {
        let mut m = vec![0.0; 16];
        for i in 0..4 {
            m[i * 4 + i] = 1.0;
        }
        let eig = sym_eigen(&m, 4, false);
        for v in eig.values {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn known_2x2() {
        // eigenvalues of [[2,1],[1,2]] are 3 and 1
        let eig = sym_eigen(&[2.0, 1.0, 1.0, 2.0], 2, true);
        assert!((eig.values[0] - 3.0).abs() < 1e-14);
        assert!((eig.values[1] - 1.0).abs() < 1e-14);
        let v = &eig.vectors.unwrap()[0];
        let r = (v[0] / v[1] - 1.0).abs();
        assert!(r < 1e-12, "leading eigenvector should be along (1,1)");
    }

    #[test]
    fn matches_jacobi_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [1, 2, 3, 5, 8, 13, 21, 34] {
            let m = random_symmetric(n, &mut rng);
            let eig = sym_eigen(&m, n, false);
            let oracle = jacobi_eigenvalues(&m, n);
            let scale = oracle[0].abs().max(oracle[n - 1].abs()).max(1e-30);
            for (a, b) in eig.values.iter().zip(&oracle) {
                assert!(
                    (a - b).abs() <= 1e-11 * scale,
                    "n={n}: {a} vs oracle {b}"
                );
            }
        }
    }

    #[test]
    fn eigenvectors_satisfy_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for n in [2, 4, 7, 12] {
            let m = random_symmetric(n, &mut rng);
            let eig = sym_eigen(&m, n, true);
            let vectors = eig.vectors.unwrap();
            for (lambda, v) in eig.values.iter().zip(&vectors) {
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-10);
                for i in 0..n {
                    let mv: f64 = (0..n).map(|j| m[i * n + j] * v[j]).sum();
                    assert!(
                        (mv - lambda * v[i]).abs() < 1e-9,
                        "n={n} residual {}",
                        mv - lambda * v[i]
                    );
                }
            }
        }
    }

    #[test]
    fn gram_uses_smaller_side() {
        let m = TensorMatrix::new("t", 2, 5, (0..10).map(|i| i as f64).collect());
        let (_, n) = small_gram(&m);
        assert_eq!(n, 2);
        let t = TensorMatrix::new(
            "t",
            5,
            2,
            (0..5).flat_map(|i| [i as f64, (i + 5) as f64]).collect(),
        );
        let (_, n) = small_gram(&t);
        assert_eq!(n, 2);
    }

    #[test]
    fn gram_of_transpose_is_bit_identical_for_rectangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let values: Vec<f64> = (0..3 * 7).map(|_| rng.gen::<f64>() - 0.5).collect();
        let m = TensorMatrix::new("m", 3, 7, values.clone());
        let mut tvals = vec![0.0; 21];
        for i in 0..3 {
            for j in 0..7 {
                tvals[j * 3 + i] = values[i * 7 + j];
            }
        }
        let t = TensorMatrix::new("mt", 7, 3, tvals);
        assert_eq!(small_gram(&m).0, small_gram(&t).0);
    }
}
