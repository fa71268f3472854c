//! Mapping tensor names to (layer, projection kind) and assembling the seven
//! per-kind projection groups in layer order.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointIndex, TensorMeta};
use crate::error::{Error, Result};

/// The seven projection kinds, in the canonical order used everywhere a
/// per-kind vector is serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProjectionKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 7] = [
        ProjectionKind::Q,
        ProjectionKind::K,
        ProjectionKind::V,
        ProjectionKind::O,
        ProjectionKind::Gate,
        ProjectionKind::Up,
        ProjectionKind::Down,
    ];

    pub fn index(self) -> usize {
        match self {
            ProjectionKind::Q => 0,
            ProjectionKind::K => 1,
            ProjectionKind::V => 2,
            ProjectionKind::O => 3,
            ProjectionKind::Gate => 4,
            ProjectionKind::Up => 5,
            ProjectionKind::Down => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProjectionKind::Q => "Q",
            ProjectionKind::K => "K",
            ProjectionKind::V => "V",
            ProjectionKind::O => "O",
            ProjectionKind::Gate => "Gate",
            ProjectionKind::Up => "Up",
            ProjectionKind::Down => "Down",
        }
    }

    pub fn parse(s: &str) -> Option<ProjectionKind> {
        ProjectionKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Deserialize)]
struct PresetFile {
    name: String,
    patterns: BTreeMap<String, String>,
}

/// Name-matching rules for one model architecture. Each pattern is a literal
/// tensor name with a `{layer}` placeholder that captures the layer index.
#[derive(Debug, Clone)]
pub struct ArchPreset {
    pub name: String,
    regexes: Vec<(ProjectionKind, Regex)>,
    lora_regexes: Vec<(ProjectionKind, Regex)>,
}

fn pattern_to_regex(pattern: &str) -> Result<Regex> {
    let count = pattern.matches("{layer}").count();
    if count != 1 {
        return Err(Error::Preset(format!(
            "pattern {pattern:?} must contain exactly one {{layer}} placeholder (found {count})"
        )));
    }
    let mut body = String::new();
    for (i, piece) in pattern.split("{layer}").enumerate() {
        if i > 0 {
            body.push_str(r"(\d+)");
        }
        body.push_str(&regex::escape(piece));
    }
    Regex::new(&format!("^{body}$")).map_err(|e| Error::Preset(e.to_string()))
}

/// Adapter tensors carry the base module path with an arbitrary dotted prefix
/// and a `lora_A` / `lora_B` suffix, optionally with a `.default.` infix.
fn pattern_to_lora_regex(pattern: &str) -> Result<Regex> {
    let stem = pattern.strip_suffix(".weight").ok_or_else(|| {
        Error::Preset(format!("pattern {pattern:?} must end with .weight"))
    })?;
    let mut body = String::new();
    for (i, piece) in stem.split("{layer}").enumerate() {
        if i > 0 {
            body.push_str(r"(\d+)");
        }
        body.push_str(&regex::escape(piece));
    }
    Regex::new(&format!(
        r"^(?:.+\.)?{body}\.lora_(A|B)(?:\.default)?\.weight$"
    ))
    .map_err(|e| Error::Preset(e.to_string()))
}

impl ArchPreset {
    pub fn new(name: impl Into<String>, patterns: &[(ProjectionKind, &str)]) -> Result<ArchPreset> {
        let mut regexes = Vec::new();
        let mut lora_regexes = Vec::new();
        for (kind, pattern) in patterns {
            regexes.push((*kind, pattern_to_regex(pattern)?));
            lora_regexes.push((*kind, pattern_to_lora_regex(pattern)?));
        }
        Ok(ArchPreset {
            name: name.into(),
            regexes,
            lora_regexes,
        })
    }

    /// LLaMA-style naming; also fits SmolLM2.
    pub fn llama() -> ArchPreset {
        Self::new(
            "llama",
            &[
                (ProjectionKind::Q, "model.layers.{layer}.self_attn.q_proj.weight"),
                (ProjectionKind::K, "model.layers.{layer}.self_attn.k_proj.weight"),
                (ProjectionKind::V, "model.layers.{layer}.self_attn.v_proj.weight"),
                (ProjectionKind::O, "model.layers.{layer}.self_attn.o_proj.weight"),
                (ProjectionKind::Gate, "model.layers.{layer}.mlp.gate_proj.weight"),
                (ProjectionKind::Up, "model.layers.{layer}.mlp.up_proj.weight"),
                (ProjectionKind::Down, "model.layers.{layer}.mlp.down_proj.weight"),
            ],
        )
        .expect("built-in preset is valid")
    }

    /// Qwen2 uses the same projection names; its attention bias tensors never
    /// match because patterns require the .weight suffix.
    pub fn qwen2() -> ArchPreset {
        let mut preset = Self::llama();
        preset.name = "qwen2".to_string();
        preset
    }

    pub fn by_name(name: &str) -> Result<ArchPreset> {
        match name {
            "llama" => Ok(Self::llama()),
            "qwen2" => Ok(Self::qwen2()),
            other => Err(Error::Preset(format!(
                "unknown preset {other:?} (built-ins: llama, qwen2)"
            ))),
        }
    }

    pub fn from_json_str(json: &str) -> Result<ArchPreset> {
        let file: PresetFile =
            serde_json::from_str(json).map_err(|e| Error::Preset(e.to_string()))?;
        let mut patterns = Vec::new();
        for (key, pattern) in &file.patterns {
            let kind = ProjectionKind::parse(key).ok_or_else(|| {
                Error::Preset(format!("unknown projection kind {key:?} in preset"))
            })?;
            patterns.push((kind, pattern.as_str()));
        }
        if patterns.len() != 7 {
            return Err(Error::Preset(format!(
                "preset must define all 7 kinds, found {}",
                patterns.len()
            )));
        }
        Self::new(file.name, &patterns)
    }

    pub fn from_json_file(path: &Path) -> Result<ArchPreset> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json_str(&text)
    }

    /// Match a base-model tensor name. Bias tensors never match since every
    /// pattern requires the weight suffix.
    pub fn classify(&self, name: &str) -> Result<Option<(usize, ProjectionKind)>> {
        let mut found = None;
        let mut kinds = Vec::new();
        for (kind, re) in &self.regexes {
            if let Some(caps) = re.captures(name) {
                let layer: usize = caps[1]
                    .parse()
                    .map_err(|_| Error::Preset(format!("layer index overflow in {name:?}")))?;
                kinds.push(kind.name());
                found = Some((layer, *kind));
            }
        }
        if kinds.len() > 1 {
            return Err(Error::AmbiguousKind {
                name: name.to_string(),
                kinds: kinds.join(", "),
            });
        }
        Ok(found)
    }

    /// Match an adapter tensor name, additionally extracting which half of
    /// the low-rank pair it is.
    pub fn classify_lora(&self, name: &str) -> Result<Option<(usize, ProjectionKind, LoraHalf)>> {
        let mut found = None;
        let mut kinds = Vec::new();
        for (kind, re) in &self.lora_regexes {
            if let Some(caps) = re.captures(name) {
                let layer: usize = caps[1].parse().map_err(|_| {
                    Error::Preset(format!("layer index overflow in {name:?}"))
                })?;
                let half = if &caps[2] == "A" {
                    LoraHalf::A
                } else {
                    LoraHalf::B
                };
                kinds.push(kind.name());
                found = Some((layer, *kind, half));
            }
        }
        if kinds.len() > 1 {
            return Err(Error::AmbiguousKind {
                name: name.to_string(),
                kinds: kinds.join(", "),
            });
        }
        Ok(found)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoraHalf {
    A,
    B,
}

/// The seven projection groups of a model, one matrix per layer per kind.
#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub layers: usize,
    /// `groups[kind.index()][layer]` is the matrix metadata for that cell.
    pub groups: [Vec<TensorMeta>; 7],
}

impl ModelLayout {
    pub fn group(&self, kind: ProjectionKind) -> &[TensorMeta] {
        &self.groups[kind.index()]
    }

    /// Cells in layer-major order with kinds in canonical order inside each
    /// layer. This is the order profiles and labels are emitted in.
    pub fn cells(&self) -> impl Iterator<Item = (usize, ProjectionKind, &TensorMeta)> {
        (0..self.layers).flat_map(move |layer| {
            ProjectionKind::ALL
                .into_iter()
                .map(move |kind| (layer, kind, &self.groups[kind.index()][layer]))
        })
    }
}

/// Scan the index and assemble the full per-kind, per-layer layout.
/// The layer count is one past the highest captured layer index; every
/// (layer, kind) cell must be present exactly once.
pub fn collect_layout(index: &CheckpointIndex, preset: &ArchPreset) -> Result<ModelLayout> {
    let mut cells: BTreeMap<(usize, usize), TensorMeta> = BTreeMap::new();
    let mut max_layer = None;

    for meta in index.metas() {
        if let Some((layer, kind)) = preset.classify(&meta.name)? {
            let key = (kind.index(), layer);
            if let Some(prev) = cells.get(&key) {
                return Err(Error::DuplicateCell {
                    layer,
                    kind: kind.name().to_string(),
                    first: prev.name.clone(),
                    second: meta.name.clone(),
                });
            }
            cells.insert(key, meta.clone());
            max_layer = Some(max_layer.map_or(layer, |m: usize| m.max(layer)));
        }
    }

    let layers = match max_layer {
        Some(m) => m + 1,
        None => return Err(Error::NoLayers),
    };

    let mut groups: [Vec<TensorMeta>; 7] = Default::default();
    for kind in ProjectionKind::ALL {
        let group = &mut groups[kind.index()];
        for layer in 0..layers {
            let meta = cells.remove(&(kind.index(), layer)).ok_or(Error::MissingCell {
                layer,
                kind: kind.name().to_string(),
            })?;
            if !meta.is_matrix() {
                return Err(Error::NotAMatrix {
                    name: meta.name.clone(),
                    shape: meta.shape.clone(),
                });
            }
            if let Some(first) = group.first() {
                if first.shape != meta.shape {
                    return Err(Error::ShapeMismatch {
                        kind: kind.name().to_string(),
                        a: first.name.clone(),
                        a_shape: first.shape.clone(),
                        b: meta.name.clone(),
                        b_shape: meta.shape.clone(),
                    });
                }
            }
            group.push(meta);
        }
    }

    Ok(ModelLayout { layers, groups })
}
