//! CSV emitters for plotting: distribution samples, std and clustering
//! vectors, label heatmaps, singular-value profiles, and the 2-D scatter of
//! profiles.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a file
//! regenerated from the same inputs is byte-identical.

use std::fmt::Write as _;

use crate::checkpoint::CheckpointIndex;
use crate::cluster::{pca_project, LabelGrid, ScatterProjection};
use crate::error::Result;
use crate::report::Fingerprint;
use crate::spectral::normalize_profile;
use crate::stats::sample_indices;
use crate::taxonomy::{ModelLayout, ProjectionKind};

fn push_cell(out: &mut String, value: Option<f64>) {
    match value {
        Some(v) => {
            let _ = write!(out, "{v}");
        }
        None => {}
    }
}

/// (kind, raw, normalized) rows for the standard-deviation vector.
pub fn std_vector_csv(fp: &Fingerprint) -> String {
    let mut out = String::from("kind,raw,normalized\n");
    for kind in ProjectionKind::ALL {
        let _ = write!(out, "{},", kind.name());
        push_cell(&mut out, fp.std_vector.raw[kind.index()]);
        out.push(',');
        push_cell(&mut out, fp.std_vector.normalized[kind.index()]);
        out.push('\n');
    }
    out
}

/// (kind, mean) rows for the clustering vector.
pub fn clustering_vector_csv(fp: &Fingerprint) -> String {
    let mut out = String::from("kind,mean\n");
    for kind in ProjectionKind::ALL {
        let _ = write!(out, "{},", kind.name());
        push_cell(&mut out, fp.clustering_vector.means[kind.index()]);
        out.push('\n');
    }
    out
}

/// One row per layer, one labeled column per kind, labels 0 or 1.
pub fn heatmap_csv(grid: &LabelGrid) -> String {
    let mut out = String::from("Q,K,V,O,Gate,Up,Down\n");
    for row in &grid.cells {
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            if let Some(l) = cell {
                let _ = write!(out, "{l}");
            }
        }
        out.push('\n');
    }
    out
}

/// (layer, kind, index, sigma, sigma_normalized) rows for every profile in
/// the report.
pub fn profiles_csv(fp: &Fingerprint) -> Result<String> {
    let scheme = fp.parameters.profile_normalization;
    let mut out = String::from("layer,kind,index,sigma,sigma_normalized\n");
    for digest in &fp.profiles {
        let normalized = match normalize_profile(&digest.sigma, scheme) {
            Ok(n) => n,
            // zero deltas keep their raw zeros in the digest
            Err(_) => vec![0.0; digest.sigma.len()],
        };
        for (i, (s, n)) in digest.sigma.iter().zip(&normalized).enumerate() {
            let _ = writeln!(out, "{},{},{i},{s},{n}", digest.layer, digest.kind.name());
        }
    }
    Ok(out)
}

/// Recompute the 2-D projection from the report's profile digest and pair it
/// with the aligned labels: (layer, kind, x, y, label) rows.
pub fn scatter_csv(fp: &Fingerprint) -> Result<String> {
    let scheme = fp.parameters.profile_normalization;
    let grid = fp.label_grid_struct();
    let mut points = Vec::new();
    let mut rows = Vec::new();
    for digest in &fp.profiles {
        if let Ok(normalized) = normalize_profile(&digest.sigma, scheme) {
            let label = grid.cells[digest.layer][digest.kind.index()];
            points.push(normalized);
            rows.push((digest.layer, digest.kind, label));
        }
    }
    let projection: ScatterProjection = pca_project(&points)?;
    let mut out = String::from("layer,kind,x,y,label\n");
    for ((layer, kind, label), point) in rows.iter().zip(&projection.points) {
        let _ = write!(out, "{layer},{},{},{},", kind.name(), point[0], point[1]);
        if let Some(l) = label {
            let _ = write!(out, "{l}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Seeded per-kind samples of raw weight values: (kind, value) rows with the
/// sampling parameters on a leading comment line. Matrices stream through
/// one at a time.
pub fn distribution_csv(
    index: &CheckpointIndex,
    layout: &ModelLayout,
    n: usize,
    seed: u64,
) -> Result<String> {
    let mut out = format!("# seed={seed} n={n}\nkind,value\n");
    for kind in ProjectionKind::ALL {
        let group = layout.group(kind);
        let total: usize = group.iter().map(|m| m.element_count()).sum();
        let indices = sample_indices(total, n, seed)?;
        let mut it = indices.iter().peekable();
        let mut base = 0usize;
        for meta in group {
            let end = base + meta.element_count();
            if it.peek().map_or(true, |&&i| i >= end) {
                base = end;
                continue;
            }
            let matrix = index.load_matrix(&meta.name)?;
            while let Some(&&i) = it.peek() {
                if i >= end {
                    break;
                }
                let _ = writeln!(out, "{},{}", kind.name(), matrix.values[i - base]);
                it.next();
            }
            base = end;
        }
    }
    Ok(out)
}
