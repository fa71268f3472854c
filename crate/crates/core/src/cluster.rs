//! K-Means over normalized singular-value profiles, query-anchored label
//! alignment, per-kind label means, and 2-D projection of the profiles for
//! scatter plots.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::spectral::ProfileSet;
use crate::taxonomy::ProjectionKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: 2,
            seed: 0,
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Outcome of the winning restart.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    pub seed: u64,
    pub restarts: usize,
    pub iterations_run: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Nearest centroid per point; ties go to the lower centroid index.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<u8>, f64) {
    let mut labels = Vec::with_capacity(points.len());
    let mut inertia = 0.0;
    for p in points {
        let mut best = 0usize;
        let mut best_d = dist2(p, &centroids[0]);
        for (c, centroid) in centroids.iter().enumerate().skip(1) {
            let d = dist2(p, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels.push(best as u8);
        inertia += best_d;
    }
    (labels, inertia)
}

fn kmeanspp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    centroids.push(points[first].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // all remaining mass is zero (duplicate points); any pick works
            rng.gen_range(0..n)
        };
        centroids.push(points[idx].clone());
        let c = centroids.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

struct SingleRun {
    centroids: Vec<Vec<f64>>,
    labels: Vec<u8>,
    inertia: f64,
    iterations: usize,
    /// Inertia after each assignment; the monotonicity tests read it.
    #[cfg_attr(not(test), allow(dead_code))]
    history: Vec<f64>,
}

fn lloyd_single(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> SingleRun {
    let dim = points[0].len();
    // rounding floor for the monotonicity check below; with well separated
    // clusters the true inertia can sit at pure noise level
    let scale: f64 = points.iter().flat_map(|p| p.iter().map(|v| v * v)).sum();
    let slack = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_init(points, k, &mut rng);
    let (mut labels, mut inertia) = assign(points, &centroids);
    let mut history = vec![inertia];
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;

        // update step: centroid = mean of assigned points
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l as usize] += 1;
            for (s, v) in sums[l as usize].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            }
        }
        // empty-cluster repair: seed the cluster with the point farthest
        // from its current centroid (lowest index on ties)
        for c in 0..k {
            if counts[c] == 0 {
                let mut far = 0usize;
                let mut far_d = f64::NEG_INFINITY;
                for (i, p) in points.iter().enumerate() {
                    if taken[i] {
                        continue;
                    }
                    let d = dist2(p, &centroids[labels[i] as usize]);
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                taken[far] = true;
                centroids[c] = points[far].clone();
            }
        }

        let (new_labels, new_inertia) = assign(points, &centroids);
        debug_assert!(
            new_inertia <= inertia + slack,
            "inertia increased: {inertia} -> {new_inertia}"
        );
        history.push(new_inertia);
        let stable = new_labels == labels;
        let prev = inertia;
        labels = new_labels;
        inertia = new_inertia;
        if stable {
            break;
        }
        if prev > 0.0 && (prev - inertia) / prev < tol {
            break;
        }
    }

    SingleRun {
        centroids,
        labels,
        inertia,
        iterations,
        history,
    }
}

/// Lloyd's algorithm with k-means++ seeding. Restart `r` runs with seed
/// `seed + r`; the lowest inertia wins, ties broken by restart index, so the
/// result does not depend on scheduling.
pub fn kmeans_fit(points: &[Vec<f64>], params: &KMeansParams) -> Result<(ClusterModel, Vec<u8>)> {
    if points.is_empty() {
        return Err(Error::EmptyProfiles);
    }
    if params.k == 0 || params.k > points.len() {
        return Err(Error::KTooLarge {
            k: params.k,
            n: points.len(),
        });
    }
    let restarts = params.restarts.max(1);
    let runs: Vec<SingleRun> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            lloyd_single(
                points,
                params.k,
                params.seed.wrapping_add(r as u64),
                params.max_iter,
                params.tol,
            )
        })
        .collect();
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.inertia < runs[best].inertia {
            best = i;
        }
    }
    let winner = &runs[best];
    Ok((
        ClusterModel {
            k: params.k,
            centroids: winner.centroids.clone(),
            inertia: winner.inertia,
            seed: params.seed,
            restarts,
            iterations_run: winner.iterations,
        },
        winner.labels.clone(),
    ))
}

pub fn kmeans_fit_profiles(
    set: &ProfileSet,
    params: &KMeansParams,
) -> Result<(ClusterModel, Vec<u8>)> {
    let points: Vec<Vec<f64>> = set.profiles.iter().map(|p| p.normalized.clone()).collect();
    kmeans_fit(&points, params)
}

/// Binary labels arranged layers x kinds. Cells are None where the model (a
/// partial adapter, say) has no profile for that kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGrid {
    /// `cells[layer][kind.index()]`
    pub cells: Vec<[Option<u8>; 7]>,
    pub aligned: bool,
}

impl LabelGrid {
    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    /// Layer-major flattening of the present cells, the order profiles were
    /// clustered in.
    pub fn flat_labels(&self) -> Vec<u8> {
        self.cells
            .iter()
            .flat_map(|row| row.iter().filter_map(|c| *c))
            .collect()
    }

    pub fn column(&self, kind: ProjectionKind) -> Vec<u8> {
        self.cells
            .iter()
            .filter_map(|row| row[kind.index()])
            .collect()
    }
}

/// Relabel the two clusters so the anchor kind's majority label is 1. The
/// anchor is the query column when present, otherwise the first kind (in
/// canonical order) that has any labels. An exact split is broken by forcing
/// the anchor's lowest-layer cell to 1.
pub fn align_labels(
    raw: &[u8],
    items: &[(usize, ProjectionKind)],
    layers: usize,
    k: usize,
) -> Result<LabelGrid> {
    if k != 2 {
        return Err(Error::AlignmentRequiresTwoClusters { k });
    }
    debug_assert_eq!(raw.len(), items.len());
    debug_assert!(raw.iter().all(|&l| l <= 1));

    let mut cells = vec![[None; 7]; layers];
    for (&label, &(layer, kind)) in raw.iter().zip(items) {
        cells[layer][kind.index()] = Some(label);
    }

    let anchor = ProjectionKind::ALL
        .into_iter()
        .find(|kind| cells.iter().any(|row| row[kind.index()].is_some()))
        .ok_or(Error::EmptyProfiles)?;

    let column: Vec<u8> = cells
        .iter()
        .filter_map(|row| row[anchor.index()])
        .collect();
    let ones = column.iter().filter(|&&l| l == 1).count();
    let zeros = column.len() - ones;
    let flip = match ones.cmp(&zeros) {
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Equal => column[0] == 0,
    };

    if flip {
        for row in &mut cells {
            for cell in row.iter_mut() {
                if let Some(l) = cell {
                    *l = 1 - *l;
                }
            }
        }
    }
    Ok(LabelGrid {
        cells,
        aligned: true,
    })
}

/// Per-kind means of the aligned labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringVector {
    /// Canonical kind order; None where the kind has no labels.
    pub means: [Option<f64>; 7],
    pub rank: usize,
    pub k: usize,
}

pub fn clustering_vector(grid: &LabelGrid, rank: usize, k: usize) -> ClusteringVector {
    debug_assert!(grid.aligned);
    let mut means = [None; 7];
    for kind in ProjectionKind::ALL {
        let column = grid.column(kind);
        if !column.is_empty() {
            let sum: u32 = column.iter().map(|&l| l as u32).sum();
            means[kind.index()] = Some(sum as f64 / column.len() as f64);
        }
    }
    ClusteringVector { means, rank, k }
}

/// Profiles projected onto their top two principal directions.
#[derive(Debug, Clone)]
pub struct ScatterProjection {
    pub points: Vec<[f64; 2]>,
    /// Variance captured by each axis (covariance eigenvalues).
    pub explained: [f64; 2],
    /// Set when the profiles carry no variance at all; points are zeroed.
    pub degenerate: bool,
}

/// Mean-center the point matrix and project onto the top-2 eigenvectors of
/// its covariance. Each axis is flipped so its largest-magnitude loading is
/// positive.
pub fn pca_project(points: &[Vec<f64>]) -> Result<ScatterProjection> {
    let n = points.len();
    let dim = points.first().map_or(0, |p| p.len());
    if n < 3 || dim < 2 {
        return Err(Error::ProjectionTooSmall {
            need: 3,
            got: n,
            dim,
        });
    }

    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let mut cov = vec![0.0; dim * dim];
    for row in &centered {
        for i in 0..dim {
            for j in 0..=i {
                cov[i * dim + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..=i {
            cov[i * dim + j] /= n as f64;
            cov[j * dim + i] = cov[i * dim + j];
        }
    }

    let total_var: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    let raw_scale: f64 = points
        .iter()
        .flat_map(|p| p.iter().map(|v| v * v))
        .sum::<f64>()
        / n as f64;
    if total_var <= raw_scale * 1e-24 {
        return Ok(ScatterProjection {
            points: vec![[0.0, 0.0]; n],
            explained: [0.0, 0.0],
            degenerate: true,
        });
    }

    let eig = sym_eigen(&cov, dim, true);
    let vectors = eig.vectors.expect("vectors requested");
    let mut axes = [vectors[0].clone(), vectors[1].clone()];
    for axis in &mut axes {
        let mut max_i = 0;
        for (i, v) in axis.iter().enumerate() {
            if v.abs() > axis[max_i].abs() {
                max_i = i;
            }
        }
        if axis[max_i] < 0.0 {
            for v in axis.iter_mut() {
                *v = -*v;
            }
        }
    }

    let projected: Vec<[f64; 2]> = centered
        .iter()
        .map(|row| {
            [
                row.iter().zip(&axes[0]).map(|(a, b)| a * b).sum(),
                row.iter().zip(&axes[1]).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();

    Ok(ScatterProjection {
        points: projected,
        explained: [eig.values[0].max(0.0), eig.values[1].max(0.0)],
        degenerate: false,
    })
}
