//! Domain types shared by every stage: cases, assets, analysis entries and
//! embedding vectors, plus the invariant checker used by ingestion and
//! `--check`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Component, Path};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Numeric case identifier. Stable across sessions and never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CaseId(pub u64);

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u64> for CaseId {
    fn from(v: u64) -> Self {
        CaseId(v)
    }
}

/// Critique dimension. The first seven mirror the critic prompt's aspect list;
/// `OriginalText` tags chunks of the source description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    Form,
    Style,
    MaterialUsage,
    SenseOfFeeling,
    ContextRelations,
    PassiveDesign,
    GeneralHighlights,
    OriginalText,
}

impl Aspect {
    /// The seven critique aspects in prompt order.
    pub const CRITIQUE: [Aspect; 7] = [
        Aspect::Form,
        Aspect::Style,
        Aspect::MaterialUsage,
        Aspect::SenseOfFeeling,
        Aspect::ContextRelations,
        Aspect::PassiveDesign,
        Aspect::GeneralHighlights,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Aspect::Form => "form",
            Aspect::Style => "style",
            Aspect::MaterialUsage => "material_usage",
            Aspect::SenseOfFeeling => "sense_of_feeling",
            Aspect::ContextRelations => "context_relations",
            Aspect::PassiveDesign => "passive_design",
            Aspect::GeneralHighlights => "general_highlights",
            Aspect::OriginalText => "original_text",
        }
    }

    /// Wording used for this aspect inside the critic prompt and its JSON reply.
    pub fn prompt_label(self) -> Option<&'static str> {
        match self {
            Aspect::Form => Some("form"),
            Aspect::Style => Some("style"),
            Aspect::MaterialUsage => Some("material usage"),
            Aspect::SenseOfFeeling => Some("sense of feeling"),
            Aspect::ContextRelations => Some("relations to the surrounding context"),
            Aspect::PassiveDesign => Some("passive design techniques"),
            Aspect::GeneralHighlights => Some("general design highlights"),
            Aspect::OriginalText => None,
        }
    }

    /// Accepts a snake_case key or a prompt label, case-insensitively.
    pub fn parse(s: &str) -> Option<Aspect> {
        let norm: String = s
            .trim()
            .to_lowercase()
            .chars()
            .map(|c| if c == '_' || c == '-' { ' ' } else { c })
            .collect();
        let norm = norm.split_whitespace().collect::<Vec<_>>().join(" ");
        Self::CRITIQUE
            .iter()
            .chain(std::iter::once(&Aspect::OriginalText))
            .copied()
            .find(|a| a.key().replace('_', " ") == norm || a.prompt_label() == Some(norm.as_str()))
    }

    pub fn is_critique(self) -> bool {
        self != Aspect::OriginalText
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Text,
    Crossmodal,
}

impl Space {
    pub fn key(self) -> &'static str {
        match self {
            Space::Text => "text",
            Space::Crossmodal => "crossmodal",
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// A vector in one embedding space. On disk the components are stored as
/// base64 of little-endian `f32`, so a round trip is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub space: Space,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(space: Space, values: Vec<f32>) -> Self {
        EmbeddingVector {
            space,
            dim: values.len(),
            values,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Problems with this vector, each phrased without a subject.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.dim == 0 {
            out.push("dim is zero".to_string());
        }
        if self.values.len() != self.dim {
            out.push(format!(
                "dim mismatch (declared {}, found {} values)",
                self.dim,
                self.values.len()
            ));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            out.push("non-finite component".to_string());
        } else if !self.values.is_empty() && self.norm() == 0.0 {
            out.push("zero norm".to_string());
        }
        out
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct EncodedVector {
    space: Space,
    dim: usize,
    f32le: String,
}

impl Serialize for EmbeddingVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        EncodedVector {
            space: self.space,
            dim: self.dim,
            f32le: B64.encode(self.to_le_bytes()),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let enc = EncodedVector::deserialize(deserializer)?;
        let bytes = B64.decode(enc.f32le.as_bytes()).map_err(D::Error::custom)?;
        if bytes.len() % 4 != 0 {
            return Err(D::Error::custom(format!(
                "embedding payload of {} bytes is not a whole number of f32",
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(EmbeddingVector {
            space: enc.space,
            dim: enc.dim,
            values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaAsset {
    pub asset_id: String,
    pub kind: MediaKind,
    /// Path relative to the case folder, `/`-separated.
    pub source_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_hint: Option<String>,
}

/// Origin marker for entries chunked from the case's own description.
pub const DESCRIPTION_ORIGIN: &str = "description";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisEntry {
    pub entry_id: String,
    pub case_id: CaseId,
    pub aspect: Aspect,
    pub text: String,
    /// Asset id the entry was derived from, or [`DESCRIPTION_ORIGIN`].
    pub origin: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedding: Option<EmbeddingVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crossmodal_embedding: Option<EmbeddingVector>,
}

impl AnalysisEntry {
    pub fn embedding(&self, space: Space) -> Option<&EmbeddingVector> {
        match space {
            Space::Text => self.text_embedding.as_ref(),
            Space::Crossmodal => self.crossmodal_embedding.as_ref(),
        }
    }

    /// True for VLM critique sentences, false for description chunks.
    pub fn is_augmented(&self) -> bool {
        self.aspect.is_critique()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignCase {
    pub case_id: CaseId,
    pub title: String,
    pub description: String,
    pub assets: Vec<MediaAsset>,
    pub entries: Vec<AnalysisEntry>,
    /// Cross-modal embeddings of image assets, keyed by asset id.
    #[serde(default)]
    pub image_embeddings: BTreeMap<String, EmbeddingVector>,
}

impl DesignCase {
    pub fn asset(&self, asset_id: &str) -> Option<&MediaAsset> {
        self.assets.iter().find(|a| a.asset_id == asset_id)
    }

    pub fn entry(&self, entry_id: &str) -> Option<&AnalysisEntry> {
        self.entries.iter().find(|e| e.entry_id == entry_id)
    }
}

/// `true` when `path` is relative and cannot climb out of its base directory.
pub fn path_stays_inside(path: &str) -> bool {
    let p = Path::new(path);
    !path.is_empty()
        && p.components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

fn check_vector(
    out: &mut Vec<String>,
    subject: &str,
    field: &str,
    v: &EmbeddingVector,
    expected: Space,
) {
    if v.space != expected {
        out.push(format!(
            "{subject}: {field} is in {} space, expected {expected}",
            v.space
        ));
    }
    for p in v.problems() {
        if p.starts_with("dim mismatch") {
            // keep "<subject>: dim mismatch" as the stable prefix
            out.push(format!("{subject}: {p} in {field}"));
        } else {
            out.push(format!("{subject}: {field} {p}"));
        }
    }
}

/// Lists every broken invariant of `case`. An empty list means the case is
/// consistent. Pure; calling it twice yields the same list.
pub fn validate_case(case: &DesignCase) -> Vec<String> {
    let mut out = Vec::new();
    let cid = case.case_id;

    let mut asset_ids = BTreeSet::new();
    for a in &case.assets {
        if a.asset_id.is_empty() {
            out.push(format!("case {cid}: asset with empty asset_id"));
        } else if a.asset_id == DESCRIPTION_ORIGIN {
            out.push(format!(
                "asset {}: asset_id collides with the reserved description origin",
                a.asset_id
            ));
        }
        if !asset_ids.insert(a.asset_id.as_str()) {
            out.push(format!("asset {}: duplicate asset_id", a.asset_id));
        }
        if !path_stays_inside(&a.source_path) {
            out.push(format!(
                "asset {}: source_path {:?} escapes the case folder",
                a.asset_id, a.source_path
            ));
        }
    }

    if case.entries.is_empty() {
        out.push(format!("case {cid}: entries empty"));
    }
    let mut entry_ids = BTreeSet::new();
    for e in &case.entries {
        let subject = format!("entry {}", e.entry_id);
        if !entry_ids.insert(e.entry_id.as_str()) {
            out.push(format!("{subject}: duplicate entry_id"));
        }
        if e.case_id != cid {
            out.push(format!(
                "{subject}: case_id {} does not match case {cid}",
                e.case_id
            ));
        }
        if e.text.trim().is_empty() {
            out.push(format!("{subject}: text empty"));
        }
        if e.origin != DESCRIPTION_ORIGIN && !asset_ids.contains(e.origin.as_str()) {
            out.push(format!("{subject}: origin {:?} is not an asset", e.origin));
        }
        if let Some(v) = &e.text_embedding {
            check_vector(&mut out, &subject, "text_embedding", v, Space::Text);
        }
        if let Some(v) = &e.crossmodal_embedding {
            check_vector(
                &mut out,
                &subject,
                "crossmodal_embedding",
                v,
                Space::Crossmodal,
            );
        }
    }

    for (asset_id, v) in &case.image_embeddings {
        let subject = format!("image {asset_id}");
        match case.asset(asset_id) {
            None => out.push(format!("{subject}: embedding for unknown asset")),
            Some(a) if a.kind != MediaKind::Image => out.push(format!(
                "{subject}: embedding attached to a non-image asset"
            )),
            Some(_) => {}
        }
        check_vector(&mut out, &subject, "embedding", v, Space::Crossmodal);
    }
    out
}
