//! Fingerprint assembly, comparison, and report serialization.
//!
//! A fingerprint bundles the per-kind distribution statistics, the
//! normalized standard-deviation vector, the clustering vector with its
//! aligned label grid, and a digest of every profile's singular values,
//! together with every parameter needed to reproduce the run.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointIndex;
use crate::cluster::{align_labels, clustering_vector, kmeans_fit, ClusteringVector, KMeansParams, LabelGrid};
use crate::error::{Error, Result};
use crate::lora::{compose_delta, LoraAdapterPair};
use crate::spectral::{profile_of, ProfileNormalization, SingularProfile};
use crate::stats::{normalize_stds, GroupStats, RunningStats, StdNormalization};
use crate::taxonomy::{ModelLayout, ProjectionKind};

pub const SCHEMA_VERSION: u64 = 1;

/// Everything a run needs beyond its input files. All of it is echoed into
/// the report so no default stays silent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunParameters {
    pub rank: usize,
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub std_normalization: StdNormalization,
    pub profile_normalization: ProfileNormalization,
    pub lora_scaling: bool,
    pub preset: String,
}

impl Default for RunParameters {
    fn default() -> Self {
        let km = KMeansParams::default();
        RunParameters {
            rank: 16,
            k: km.k,
            seed: km.seed,
            restarts: km.restarts,
            max_iter: km.max_iter,
            tol: km.tol,
            std_normalization: StdNormalization::MaxOne,
            profile_normalization: ProfileNormalization::NormalizeByTop,
            lora_scaling: false,
            preset: "llama".to_string(),
        }
    }
}

impl RunParameters {
    pub fn kmeans(&self) -> KMeansParams {
        KMeansParams {
            k: self.k,
            seed: self.seed,
            restarts: self.restarts,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

/// Per-kind slots in canonical order; None marks a kind the run did not
/// cover (partial adapters) or could not normalize (zero variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdVectorReport {
    pub raw: [Option<f64>; 7],
    pub normalized: [Option<f64>; 7],
    pub normalization: StdNormalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDigest {
    pub layer: usize,
    pub kind: ProjectionKind,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub schema_version: u64,
    pub model_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base_model_id: Option<String>,
    pub layer_count: usize,
    pub parameters: RunParameters,
    /// Canonical kind order; None for kinds absent from the run.
    pub groups: [Option<GroupStats>; 7],
    pub std_vector: StdVectorReport,
    pub clustering_vector: ClusteringVector,
    /// `label_grid[layer][kind]`, aligned so the query majority is 1.
    pub label_grid: Vec<[Option<u8>; 7]>,
    pub profiles: Vec<ProfileDigest>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base_comparison: Option<BaseComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseComparison {
    pub base_model_id: String,
    pub result: ComparisonResult,
}

impl Fingerprint {
    /// Kinds that have a normalized std entry.
    pub fn covered_kinds(&self) -> Vec<ProjectionKind> {
        ProjectionKind::ALL
            .into_iter()
            .filter(|k| self.std_vector.normalized[k.index()].is_some())
            .collect()
    }

    pub fn label_grid_struct(&self) -> LabelGrid {
        LabelGrid {
            cells: self.label_grid.clone(),
            aligned: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareMetric {
    Cosine,
    L2,
    MaxAbsDiff,
}

impl CompareMetric {
    pub fn name(self) -> &'static str {
        match self {
            CompareMetric::Cosine => "Cosine",
            CompareMetric::L2 => "L2",
            CompareMetric::MaxAbsDiff => "MaxAbsDiff",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub metric: CompareMetric,
    pub std_vector_score: f64,
    pub clustering_vector_score: f64,
    pub std_per_kind_diff: [Option<f64>; 7],
    pub cv_per_kind_diff: [Option<f64>; 7],
}

fn metric_score(metric: CompareMetric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        CompareMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            }
        }
        CompareMetric::L2 => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        CompareMetric::MaxAbsDiff => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max),
    }
}

fn kind_set(slots: &[Option<f64>; 7]) -> String {
    ProjectionKind::ALL
        .into_iter()
        .filter(|k| slots[k.index()].is_some())
        .map(|k| k.name())
        .collect::<Vec<_>>()
        .join(",")
}

fn check_schemes(a: &Fingerprint, b: &Fingerprint) -> Result<()> {
    if a.std_vector.normalization != b.std_vector.normalization {
        return Err(Error::SchemeMismatch {
            a: a.std_vector.normalization.name().to_string(),
            b: b.std_vector.normalization.name().to_string(),
        });
    }
    if a.parameters.profile_normalization != b.parameters.profile_normalization {
        return Err(Error::SchemeMismatch {
            a: a.parameters.profile_normalization.name().to_string(),
            b: b.parameters.profile_normalization.name().to_string(),
        });
    }
    Ok(())
}

fn compare_slots(
    metric: CompareMetric,
    a: &[Option<f64>; 7],
    b: &[Option<f64>; 7],
    kinds: &[ProjectionKind],
) -> (f64, [Option<f64>; 7]) {
    let va: Vec<f64> = kinds.iter().map(|k| a[k.index()].unwrap()).collect();
    let vb: Vec<f64> = kinds.iter().map(|k| b[k.index()].unwrap()).collect();
    let mut diffs = [None; 7];
    for k in kinds {
        diffs[k.index()] = Some((a[k.index()].unwrap() - b[k.index()].unwrap()).abs());
    }
    (metric_score(metric, &va, &vb), diffs)
}

/// Compare two fingerprints over the normalized seven-element vectors. Both
/// must use the same normalization schemes and cover the same kinds.
pub fn compare_fingerprints(
    a: &Fingerprint,
    b: &Fingerprint,
    metric: CompareMetric,
) -> Result<ComparisonResult> {
    check_schemes(a, b)?;
    if kind_set(&a.std_vector.normalized) != kind_set(&b.std_vector.normalized)
        || kind_set(&a.clustering_vector.means) != kind_set(&b.clustering_vector.means)
    {
        return Err(Error::KindCoverageMismatch {
            a: format!(
                "std {} / cv {}",
                kind_set(&a.std_vector.normalized),
                kind_set(&a.clustering_vector.means)
            ),
            b: format!(
                "std {} / cv {}",
                kind_set(&b.std_vector.normalized),
                kind_set(&b.clustering_vector.means)
            ),
        });
    }
    compare_over_shared(a, b, metric)
}

/// Like [`compare_fingerprints`] but restricted to the kinds both sides
/// cover. Used for the embedded base-vs-adapter section, where a partial
/// adapter legitimately covers fewer kinds than its base model.
pub fn compare_fingerprints_shared(
    a: &Fingerprint,
    b: &Fingerprint,
    metric: CompareMetric,
) -> Result<ComparisonResult> {
    check_schemes(a, b)?;
    compare_over_shared(a, b, metric)
}

fn compare_over_shared(
    a: &Fingerprint,
    b: &Fingerprint,
    metric: CompareMetric,
) -> Result<ComparisonResult> {
    let std_kinds: Vec<ProjectionKind> = ProjectionKind::ALL
        .into_iter()
        .filter(|k| {
            a.std_vector.normalized[k.index()].is_some()
                && b.std_vector.normalized[k.index()].is_some()
        })
        .collect();
    let cv_kinds: Vec<ProjectionKind> = ProjectionKind::ALL
        .into_iter()
        .filter(|k| {
            a.clustering_vector.means[k.index()].is_some()
                && b.clustering_vector.means[k.index()].is_some()
        })
        .collect();
    if std_kinds.is_empty() || cv_kinds.is_empty() {
        return Err(Error::KindCoverageMismatch {
            a: kind_set(&a.std_vector.normalized),
            b: kind_set(&b.std_vector.normalized),
        });
    }
    let (std_score, std_diffs) = compare_slots(
        metric,
        &a.std_vector.normalized,
        &b.std_vector.normalized,
        &std_kinds,
    );
    let (cv_score, cv_diffs) = compare_slots(
        metric,
        &a.clustering_vector.means,
        &b.clustering_vector.means,
        &cv_kinds,
    );
    Ok(ComparisonResult {
        metric,
        std_vector_score: std_score,
        clustering_vector_score: cv_score,
        std_per_kind_diff: std_diffs,
        cv_per_kind_diff: cv_diffs,
    })
}

fn context(layer: usize, kind: ProjectionKind) -> String {
    format!("({layer}, {kind})")
}

/// Run the full pipeline over a base checkpoint.
pub fn fingerprint_checkpoint(
    index: &CheckpointIndex,
    layout: &ModelLayout,
    params: &RunParameters,
    model_id: &str,
) -> Result<Fingerprint> {
    if params.k != 2 {
        return Err(Error::AlignmentRequiresTwoClusters { k: params.k });
    }
    for (layer, kind, meta) in layout.cells() {
        let min_dim = meta.shape[0].min(meta.shape[1]);
        if params.rank == 0 || params.rank > min_dim {
            return Err(Error::RankOutOfRange {
                rank: params.rank,
                name: meta.name.clone(),
                rows: meta.shape[0],
                cols: meta.shape[1],
            }
            .with_context(context(layer, kind)));
        }
    }

    let cells: Vec<(usize, ProjectionKind, String)> = layout
        .cells()
        .map(|(layer, kind, meta)| (layer, kind, meta.name.clone()))
        .collect();

    // one load per matrix feeds both the stats accumulator and the profile
    let per_cell: Vec<(RunningStats, SingularProfile)> = cells
        .par_iter()
        .map(|&(layer, kind, ref name)| {
            let matrix = index
                .load_matrix(name)
                .map_err(|e| e.with_context(context(layer, kind)))?;
            let mut acc = RunningStats::new();
            acc.update_slice(&matrix.values);
            let profile = profile_of(&matrix, layer, kind, params.rank, params.profile_normalization)?;
            Ok((acc, profile))
        })
        .collect::<Result<_>>()?;

    let mut accs = [RunningStats::new(); 7];
    for ((_, kind, _), (acc, _)) in cells.iter().zip(&per_cell) {
        accs[kind.index()].merge(acc);
    }
    let mut groups: [Option<GroupStats>; 7] = Default::default();
    let mut raw_stds = [0.0; 7];
    for kind in ProjectionKind::ALL {
        let stats = accs[kind.index()].finalize(kind)?;
        raw_stds[kind.index()] = stats.std;
        groups[kind.index()] = Some(stats);
    }
    let labels: Vec<&str> = ProjectionKind::ALL.iter().map(|k| k.name()).collect();
    let normalized = normalize_stds(&raw_stds, &labels, params.std_normalization)?;
    let std_vector = StdVectorReport {
        raw: raw_stds.map(Some),
        normalized: {
            let mut out = [None; 7];
            for (slot, v) in out.iter_mut().zip(&normalized) {
                *slot = Some(*v);
            }
            out
        },
        normalization: params.std_normalization,
    };

    let profiles: Vec<SingularProfile> = per_cell.into_iter().map(|(_, p)| p).collect();
    let points: Vec<Vec<f64>> = profiles.iter().map(|p| p.normalized.clone()).collect();
    let (_, raw_labels) = kmeans_fit(&points, &params.kmeans())?;
    let items: Vec<(usize, ProjectionKind)> = profiles.iter().map(|p| (p.layer, p.kind)).collect();
    let grid = align_labels(&raw_labels, &items, layout.layers, params.k)?;
    let cv = clustering_vector(&grid, params.rank, params.k);

    let digest = profiles
        .iter()
        .map(|p| ProfileDigest {
            layer: p.layer,
            kind: p.kind,
            sigma: p.values.clone(),
        })
        .collect();

    Ok(Fingerprint {
        schema_version: SCHEMA_VERSION,
        model_id: model_id.to_string(),
        base_model_id: None,
        layer_count: layout.layers,
        parameters: params.clone(),
        groups,
        std_vector,
        clustering_vector: cv,
        label_grid: grid.cells,
        profiles: digest,
        warnings: Vec::new(),
        base_comparison: None,
    })
}

/// Run the pipelines over composed adapter deltas. Kinds the adapter does
/// not target stay None throughout; zero-variance groups and zero deltas are
/// reported as warnings instead of aborting the run.
pub fn fingerprint_lora(
    pairs: &[LoraAdapterPair],
    params: &RunParameters,
    model_id: &str,
    base_model_id: Option<&str>,
) -> Result<Fingerprint> {
    if params.k != 2 {
        return Err(Error::AlignmentRequiresTwoClusters { k: params.k });
    }
    if pairs.is_empty() {
        return Err(Error::NoLayers);
    }
    let layer_count = pairs.iter().map(|p| p.layer).max().unwrap() + 1;

    // the composed product has rank at most r, so values past r are exact
    // zeros and are excluded rather than clustered
    let min_r = pairs.iter().map(|p| p.r).min().unwrap();
    let min_dim = pairs
        .iter()
        .map(|p| p.out_dim().min(p.in_dim()))
        .min()
        .unwrap();
    let effective_rank = params.rank.min(min_r).min(min_dim);
    if effective_rank == 0 {
        return Err(Error::RankOutOfRange {
            rank: params.rank,
            name: "adapter deltas".to_string(),
            rows: min_dim,
            cols: min_r,
        });
    }

    let mut warnings = Vec::new();

    let deltas: Vec<crate::checkpoint::TensorMatrix> = pairs
        .par_iter()
        .map(|pair| {
            compose_delta(pair, params.lora_scaling)
                .map_err(|e| e.with_context(context(pair.layer, pair.kind)))
        })
        .collect::<Result<_>>()?;

    let mut accs: [Option<RunningStats>; 7] = Default::default();
    for (pair, delta) in pairs.iter().zip(&deltas) {
        let mut part = RunningStats::new();
        part.update_slice(&delta.values);
        accs[pair.kind.index()]
            .get_or_insert_with(RunningStats::new)
            .merge(&part);
    }
    let mut groups: [Option<GroupStats>; 7] = Default::default();
    for kind in ProjectionKind::ALL {
        if let Some(acc) = &accs[kind.index()] {
            groups[kind.index()] = Some(acc.finalize(kind)?);
        }
    }

    // normalize over the kinds that have usable (nonzero) stds
    let mut raw: [Option<f64>; 7] = Default::default();
    let mut usable: Vec<(ProjectionKind, f64)> = Vec::new();
    for kind in ProjectionKind::ALL {
        if let Some(stats) = &groups[kind.index()] {
            raw[kind.index()] = Some(stats.std);
            if stats.std > 0.0 {
                usable.push((kind, stats.std));
            } else {
                warnings.push(format!(
                    "group {} has zero standard deviation; left out of the normalized vector",
                    kind.name()
                ));
            }
        }
    }
    if usable.is_empty() {
        return Err(Error::DegenerateGroup {
            kind: "all".to_string(),
        });
    }
    let values: Vec<f64> = usable.iter().map(|(_, s)| *s).collect();
    let names: Vec<&str> = usable.iter().map(|(k, _)| k.name()).collect();
    let normalized_values = normalize_stds(&values, &names, params.std_normalization)?;
    let mut normalized: [Option<f64>; 7] = Default::default();
    for ((kind, _), v) in usable.iter().zip(&normalized_values) {
        normalized[kind.index()] = Some(*v);
    }
    let std_vector = StdVectorReport {
        raw,
        normalized,
        normalization: params.std_normalization,
    };

    // profiles; zero deltas cannot be normalized and are skipped with a note
    let mut profiles = Vec::new();
    let mut digest = Vec::new();
    for (pair, delta) in pairs.iter().zip(&deltas) {
        match profile_of(delta, pair.layer, pair.kind, effective_rank, params.profile_normalization) {
            Ok(profile) => {
                digest.push(ProfileDigest {
                    layer: profile.layer,
                    kind: profile.kind,
                    sigma: profile.values.clone(),
                });
                profiles.push(profile);
            }
            Err(e) if matches!(flatten(&e), Error::DegenerateProfile { .. }) => {
                warnings.push(format!(
                    "delta ({}, {}) is all zeros; left out of clustering",
                    pair.layer,
                    pair.kind.name()
                ));
                digest.push(ProfileDigest {
                    layer: pair.layer,
                    kind: pair.kind,
                    sigma: vec![0.0; effective_rank],
                });
            }
            Err(e) => return Err(e),
        }
    }
    if profiles.is_empty() {
        return Err(Error::EmptyProfiles);
    }

    let points: Vec<Vec<f64>> = profiles.iter().map(|p| p.normalized.clone()).collect();
    let (_, raw_labels) = kmeans_fit(&points, &params.kmeans())?;
    let items: Vec<(usize, ProjectionKind)> = profiles.iter().map(|p| (p.layer, p.kind)).collect();
    let grid = align_labels(&raw_labels, &items, layer_count, params.k)?;
    let cv = clustering_vector(&grid, effective_rank, params.k);

    Ok(Fingerprint {
        schema_version: SCHEMA_VERSION,
        model_id: model_id.to_string(),
        base_model_id: base_model_id.map(str::to_string),
        layer_count,
        parameters: params.clone(),
        groups,
        std_vector,
        clustering_vector: cv,
        label_grid: grid.cells,
        profiles: digest,
        warnings,
        base_comparison: None,
    })
}

fn flatten(e: &Error) -> &Error {
    match e {
        Error::Context { source, .. } => flatten(source),
        other => other,
    }
}

/// Pretty JSON with a trailing newline. serde_json prints floats with
/// round-trip-exact precision, so parse(serialize(f)) == f bit for bit.
pub fn to_json_string(f: &Fingerprint) -> String {
    let mut s = serde_json::to_string_pretty(f).expect("fingerprint serialization cannot fail");
    s.push('\n');
    s
}

pub fn comparison_to_json_string(r: &ComparisonResult) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("comparison serialization cannot fail");
    s.push('\n');
    s
}

pub fn from_json_str(text: &str) -> Result<Fingerprint> {
    let f: Fingerprint = serde_json::from_str(text).map_err(|e| {
        let offset = byte_offset(text, e.line(), e.column());
        Error::ReportParse {
            offset,
            detail: e.to_string(),
        }
    })?;
    if f.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: f.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    if f.label_grid.len() != f.layer_count {
        return Err(Error::ReportParse {
            offset: 0,
            detail: format!(
                "label_grid has {} rows but layer_count is {}",
                f.label_grid.len(),
                f.layer_count
            ),
        });
    }
    Ok(f)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

pub fn write_to_file(f: &Fingerprint, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, to_json_string(f)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_from_file(path: &std::path::Path) -> Result<Fingerprint> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_json_str(&text)
}
