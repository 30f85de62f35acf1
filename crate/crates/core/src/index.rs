//! The searchable case database: ingestion from case folders, on-disk
//! persistence and exact cosine scans.
//!
//! A database is a directory holding `manifest.json` and `cases.jsonl`
//! (one [`DesignCase`] per line, ascending case id). The manifest pins the
//! format version, both embedding providers, the chunking parameters and the
//! SHA-256 of `cases.jsonl`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{self, critique_media, CritiquePrompt, MediaPayload, VisionModel};
use crate::embedding::{EmbeddingGateway, ImageInput, MediaType, ProviderInfo};
use crate::error::{Error, Result};
use crate::model::{
    path_stays_inside, validate_case, AnalysisEntry, CaseId, DesignCase, EmbeddingVector,
    MediaAsset, MediaKind, Space, DESCRIPTION_ORIGIN,
};

pub const FORMAT_VERSION: &str = "archseek-db/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CASES_FILE: &str = "cases.jsonl";
pub const CASE_FILE: &str = "case.json";
pub const CAPTION_SUFFIX: &str = ".caption.txt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingParams {
    pub max_chars: usize,
    pub critique_text_files: bool,
}

impl Default for ChunkingParams {
    fn default() -> Self {
        ChunkingParams {
            max_chars: augment::CHUNK_MAX_CHARS,
            critique_text_files: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub text: ProviderInfo,
    pub crossmodal: ProviderInfo,
    pub chunking: ChunkingParams,
    pub case_count: usize,
    pub entry_count: usize,
    pub image_count: usize,
    pub cases_sha256: String,
}

impl Manifest {
    pub fn provider(&self, space: Space) -> &ProviderInfo {
        match space {
            Space::Text => &self.text,
            Space::Crossmodal => &self.crossmodal,
        }
    }

    /// Errors when `other` was built with different providers or chunking.
    pub fn ensure_compatible(&self, other: &Manifest) -> Result<()> {
        if self.format_version != other.format_version {
            return Err(Error::Format(format!(
                "format version {} does not match {}",
                other.format_version, self.format_version
            )));
        }
        for space in [Space::Text, Space::Crossmodal] {
            if self.provider(space) != other.provider(space) {
                return Err(Error::Config(format!(
                    "{space} provider {:?} does not match existing {:?}",
                    other.provider(space),
                    self.provider(space)
                )));
            }
        }
        if self.chunking != other.chunking {
            return Err(Error::Config(format!(
                "chunking {:?} does not match existing {:?}",
                other.chunking, self.chunking
            )));
        }
        Ok(())
    }

    /// Errors unless the gateway's providers are the ones the database was built with.
    pub fn ensure_gateway(&self, gateway: &EmbeddingGateway) -> Result<()> {
        for space in [Space::Text, Space::Crossmodal] {
            let have = gateway.info(space);
            if &have != self.provider(space) {
                return Err(Error::Config(format!(
                    "database {space} space was built with {:?}, configured provider is {:?}",
                    self.provider(space),
                    have
                )));
            }
        }
        Ok(())
    }
}

/// Which text entries take part in a text-space scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryFilter {
    #[default]
    All,
    /// Description chunks only (no critique sentences).
    OriginalOnly,
    AugmentedOnly,
}

impl EntryFilter {
    fn admits(self, augmented: bool) -> bool {
        match self {
            EntryFilter::All => true,
            EntryFilter::OriginalOnly => !augmented,
            EntryFilter::AugmentedOnly => augmented,
        }
    }
}

/// One case's best match in a scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanHit {
    pub case_id: CaseId,
    /// Entry id (text space) or asset id (image space) of the best match.
    pub best_id: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, Copy)]
struct RowRef {
    case_idx: usize,
    item_idx: usize,
    augmented: bool,
}

/// Row-major `f32` storage with precomputed `f64` norms.
#[derive(Debug, Clone, Default)]
struct Matrix {
    dim: usize,
    data: Vec<f32>,
    norms: Vec<f64>,
    refs: Vec<RowRef>,
}

impl Matrix {
    fn new(dim: usize) -> Self {
        Matrix {
            dim,
            ..Default::default()
        }
    }

    fn push(&mut self, v: &EmbeddingVector, r: RowRef) {
        debug_assert_eq!(v.values.len(), self.dim);
        self.data.extend_from_slice(&v.values);
        self.norms.push(v.norm());
        self.refs.push(r);
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn len(&self) -> usize {
        self.refs.len()
    }
}

#[derive(Debug, Clone)]
pub struct CaseDatabase {
    manifest: Manifest,
    cases: Vec<DesignCase>,
    by_id: BTreeMap<CaseId, usize>,
    text_rows: Matrix,
    image_rows: Matrix,
}

/// Sort scan hits by descending score, ascending case id on ties.
pub fn sort_hits(hits: &mut [ScanHit]) {
    hits.sort_by(|a, b| {
        b.cosine
            .total_cmp(&a.cosine)
            .then_with(|| a.case_id.cmp(&b.case_id))
    });
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn encode_cases(cases: &[DesignCase]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for c in cases {
        serde_json::to_writer(&mut out, c)?;
        out.push(b'\n');
    }
    Ok(out)
}

impl CaseDatabase {
    /// Assembles a database from finished cases. Cases are reordered by id;
    /// duplicate ids and dimension mismatches are rejected.
    pub fn new(
        text: ProviderInfo,
        crossmodal: ProviderInfo,
        chunking: ChunkingParams,
        mut cases: Vec<DesignCase>,
    ) -> Result<Self> {
        cases.sort_by_key(|c| c.case_id);
        let encoded = encode_cases(&cases)?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION.to_string(),
            case_count: cases.len(),
            entry_count: cases.iter().map(|c| c.entries.len()).sum(),
            image_count: cases.iter().map(|c| c.image_embeddings.len()).sum(),
            text,
            crossmodal,
            chunking,
            cases_sha256: sha256_hex(&encoded),
        };
        Self::from_manifest(manifest, cases)
    }

    fn from_manifest(manifest: Manifest, cases: Vec<DesignCase>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        let mut text_rows = Matrix::new(manifest.text.dim);
        let mut image_rows = Matrix::new(manifest.crossmodal.dim);
        for (case_idx, case) in cases.iter().enumerate() {
            if by_id.insert(case.case_id, case_idx).is_some() {
                return Err(Error::Format(format!("duplicate case id {}", case.case_id)));
            }
            if case_idx > 0 && cases[case_idx - 1].case_id > case.case_id {
                return Err(Error::Format("cases are not in ascending id order".into()));
            }
            for (item_idx, e) in case.entries.iter().enumerate() {
                if let Some(v) = &e.text_embedding {
                    check_dim(v, Space::Text, manifest.text.dim, &e.entry_id)?;
                    text_rows.push(
                        v,
                        RowRef {
                            case_idx,
                            item_idx,
                            augmented: e.is_augmented(),
                        },
                    );
                }
                if let Some(v) = &e.crossmodal_embedding {
                    check_dim(v, Space::Crossmodal, manifest.crossmodal.dim, &e.entry_id)?;
                }
            }
            for (item_idx, (asset_id, v)) in case.image_embeddings.iter().enumerate() {
                check_dim(v, Space::Crossmodal, manifest.crossmodal.dim, asset_id)?;
                image_rows.push(
                    v,
                    RowRef {
                        case_idx,
                        item_idx,
                        augmented: false,
                    },
                );
            }
        }
        Ok(CaseDatabase {
            manifest,
            cases,
            by_id,
            text_rows,
            image_rows,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn cases(&self) -> &[DesignCase] {
        &self.cases
    }

    pub fn case_ids(&self) -> Vec<CaseId> {
        self.cases.iter().map(|c| c.case_id).collect()
    }

    pub fn case(&self, id: CaseId) -> Option<&DesignCase> {
        self.by_id.get(&id).map(|&i| &self.cases[i])
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Copy holding only the entries `filter` admits. Cases left without
    /// entries are kept (they simply never match a text scan).
    pub fn restricted(&self, filter: EntryFilter) -> Result<CaseDatabase> {
        let cases = self
            .cases
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.entries.retain(|e| filter.admits(e.is_augmented()));
                c
            })
            .collect();
        CaseDatabase::new(
            self.manifest.text.clone(),
            self.manifest.crossmodal.clone(),
            self.manifest.chunking.clone(),
            cases,
        )
    }

    /// Text-analysis relevance: per case, the max cosine over its entries.
    /// One hit per case with at least one embedded entry.
    pub fn scan_text_space(&self, query: &EmbeddingVector) -> Result<Vec<ScanHit>> {
        self.scan_text_filtered(query, EntryFilter::All)
    }

    pub fn scan_text_filtered(
        &self,
        query: &EmbeddingVector,
        filter: EntryFilter,
    ) -> Result<Vec<ScanHit>> {
        check_query(query, Space::Text, self.manifest.text.dim)?;
        Ok(self.scan(
            &self.text_rows,
            query,
            |r| filter.admits(r.augmented),
            |c, i| c.entries[i].entry_id.clone(),
        ))
    }

    /// Image-understanding relevance: per case, the max cosine over its image
    /// embeddings. Cases without images are omitted.
    pub fn scan_image_space(&self, query: &EmbeddingVector) -> Result<Vec<ScanHit>> {
        check_query(query, Space::Crossmodal, self.manifest.crossmodal.dim)?;
        Ok(self.scan(
            &self.image_rows,
            query,
            |_| true,
            |c, i| {
                c.image_embeddings
                    .keys()
                    .nth(i)
                    .cloned()
                    .unwrap_or_default()
            },
        ))
    }

    fn scan(
        &self,
        m: &Matrix,
        query: &EmbeddingVector,
        admit: impl Fn(&RowRef) -> bool,
        label: impl Fn(&DesignCase, usize) -> String,
    ) -> Vec<ScanHit> {
        let qnorm = query.norm();
        // best (cosine, row) per case, maintained during the single pass
        let mut best: Vec<Option<(f64, usize)>> = vec![None; self.cases.len()];
        for i in 0..m.len() {
            let r = &m.refs[i];
            if !admit(r) || m.norms[i] == 0.0 {
                continue;
            }
            let dot: f64 = m
                .row(i)
                .iter()
                .zip(&query.values)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            let cos = (dot / (m.norms[i] * qnorm)).clamp(-1.0, 1.0);
            let slot = &mut best[r.case_idx];
            if slot.is_none_or(|(s, _)| cos > s) {
                *slot = Some((cos, i));
            }
        }
        let mut hits: Vec<ScanHit> = best
            .into_iter()
            .enumerate()
            .filter_map(|(case_idx, b)| {
                b.map(|(cosine, row)| {
                    let case = &self.cases[case_idx];
                    ScanHit {
                        case_id: case.case_id,
                        best_id: label(case, m.refs[row].item_idx),
                        cosine,
                    }
                })
            })
            .collect();
        sort_hits(&mut hits);
        hits
    }

    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let cases = encode_cases(&self.cases)?;
        let mut manifest = serde_json::to_vec_pretty(&self.manifest)?;
        manifest.push(b'\n');
        Ok((manifest, cases))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, cases) = self.encode()?;
        let cases_path = dir.join(CASES_FILE);
        std::fs::write(&cases_path, cases).map_err(|e| Error::io(&cases_path, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
    }

    /// Loads and fully validates a database directory.
    pub fn load(dir: &Path) -> Result<CaseDatabase> {
        let report = check(dir)?;
        if !report.violations.is_empty() {
            return Err(Error::Format(format!(
                "{} failed validation: {}",
                dir.display(),
                report.violations.join("; ")
            )));
        }
        report
            .database
            .ok_or_else(|| Error::Format(format!("{} could not be assembled", dir.display())))
    }
}

fn check_dim(v: &EmbeddingVector, space: Space, dim: usize, what: &str) -> Result<()> {
    if v.space != space || v.dim != dim || v.values.len() != dim {
        return Err(Error::Format(format!(
            "{what}: {} vector of dim {} ({} values), manifest declares {space} dim {dim}",
            v.space,
            v.dim,
            v.values.len()
        )));
    }
    Ok(())
}

fn check_query(q: &EmbeddingVector, space: Space, dim: usize) -> Result<()> {
    if q.space != space {
        return Err(Error::input(format!(
            "query vector is in {} space, scan needs {space}",
            q.space
        )));
    }
    if q.values.len() != dim || q.dim != dim {
        return Err(Error::input(format!(
            "query vector has dim {}, {space} space has dim {dim}",
            q.values.len()
        )));
    }
    if q.problems()
        .iter()
        .any(|p| p.contains("zero") || p.contains("finite"))
    {
        return Err(Error::input("query vector must be finite and non-zero"));
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("format_version").and_then(|v| v.as_str()) {
        Some(FORMAT_VERSION) => {}
        Some(other) => {
            return Err(Error::Format(format!(
                "unsupported database format {other:?} (this build reads {FORMAT_VERSION})"
            )))
        }
        None => return Err(Error::Format("manifest has no format_version".into())),
    }
    Ok(serde_json::from_value(value)?)
}

#[derive(Debug)]
pub struct CheckReport {
    pub manifest: Manifest,
    pub violations: Vec<String>,
    /// Present when the records could be assembled into a database.
    pub database: Option<CaseDatabase>,
}

/// Re-validates a database directory: format version, checksum, counts,
/// dimensions and every per-case invariant. Violations are collected rather
/// than returned as errors; only unreadable files are errors.
pub fn check(dir: &Path) -> Result<CheckReport> {
    let manifest = read_manifest(dir)?;
    let cases_path = dir.join(CASES_FILE);
    let bytes = std::fs::read(&cases_path).map_err(|e| Error::io(&cases_path, e))?;
    let mut violations = Vec::new();
    let actual = sha256_hex(&bytes);
    if actual != manifest.cases_sha256 {
        violations.push(format!(
            "{CASES_FILE}: checksum {actual} does not match manifest {}",
            manifest.cases_sha256
        ));
    }
    let mut cases = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        match serde_json::from_slice::<DesignCase>(line) {
            Ok(c) => cases.push(c),
            Err(e) => violations.push(format!("{CASES_FILE} line {}: {e}", i + 1)),
        }
    }
    if cases.len() != manifest.case_count {
        violations.push(format!(
            "manifest declares {} cases, found {}",
            manifest.case_count,
            cases.len()
        ));
    }
    let entries: usize = cases.iter().map(|c| c.entries.len()).sum();
    if entries != manifest.entry_count {
        violations.push(format!(
            "manifest declares {} entries, found {entries}",
            manifest.entry_count
        ));
    }
    let images: usize = cases.iter().map(|c| c.image_embeddings.len()).sum();
    if images != manifest.image_count {
        violations.push(format!(
            "manifest declares {} images, found {images}",
            manifest.image_count
        ));
    }
    for c in &cases {
        violations.extend(
            validate_case(c)
                .into_iter()
                .map(|v| format!("case {}: {v}", c.case_id)),
        );
    }
    let database = match CaseDatabase::from_manifest(manifest.clone(), cases) {
        Ok(db) => Some(db),
        Err(e) => {
            violations.push(e.to_string());
            None
        }
    };
    Ok(CheckReport {
        manifest,
        violations,
        database,
    })
}

// ---------------------------------------------------------------- ingestion

/// `case.json` inside each case folder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFolderManifest {
    pub case_id: CaseId,
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub assets: Vec<CaseFolderAsset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFolderAsset {
    pub path: String,
    /// Defaults to `path`.
    #[serde(default)]
    pub asset_id: Option<String>,
    /// Inferred from the file extension when absent.
    #[serde(default)]
    pub kind: Option<MediaKind>,
    #[serde(default)]
    pub category_hint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub jobs: usize,
    pub chunking: ChunkingParams,
    /// Append the case title to the critic prompt.
    pub case_context: bool,
    /// Manifest of a database being rebuilt; providers and chunking must match.
    pub previous: Option<Manifest>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            jobs: 1,
            chunking: ChunkingParams::default(),
            case_context: true,
            previous: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetFailure {
    pub case_id: CaseId,
    pub asset_id: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug)]
pub struct IngestReport {
    pub database: CaseDatabase,
    pub failures: Vec<AssetFailure>,
    pub warnings: Vec<String>,
}

struct CaseFolder {
    dir: PathBuf,
    manifest: CaseFolderManifest,
}

fn infer_kind(path: &str) -> Option<MediaKind> {
    let ext = Path::new(path).extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" | "jpg" | "jpeg" => Some(MediaKind::Image),
        "txt" | "md" | "text" => Some(MediaKind::Text),
        _ => None,
    }
}

fn discover(root: &Path, warnings: &mut Vec<String>) -> Result<Vec<CaseFolder>> {
    let read = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut folders = Vec::new();
    let mut seen = BTreeSet::new();
    for dir in dirs {
        let path = dir.join(CASE_FILE);
        if !path.is_file() {
            warnings.push(format!("{}: no {CASE_FILE}, skipped", dir.display()));
            continue;
        }
        let parsed = std::fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| {
                serde_json::from_str::<CaseFolderManifest>(&t).map_err(|e| e.to_string())
            });
        match parsed {
            Ok(m) if !seen.insert(m.case_id) => {
                return Err(Error::input(format!(
                    "{}: case id {} used by more than one folder",
                    path.display(),
                    m.case_id
                )))
            }
            Ok(m) => folders.push(CaseFolder { dir, manifest: m }),
            Err(e) => warnings.push(format!("{}: {e}, skipped", path.display())),
        }
    }
    folders.sort_by_key(|f| f.manifest.case_id);
    Ok(folders)
}

/// What one asset contributes to its case.
struct AssetOutcome {
    asset: Option<MediaAsset>,
    image_embedding: Option<EmbeddingVector>,
    entries: Vec<AnalysisEntry>,
    failures: Vec<AssetFailure>,
}

struct IngestCtx<'a> {
    gateway: &'a EmbeddingGateway,
    vlm: &'a dyn VisionModel,
    prompt: CritiquePrompt,
    options: &'a IngestOptions,
}

/// Config errors abort the whole ingest; anything else is recorded per asset.
fn soft<T>(
    r: Result<T>,
    failures: &mut Vec<AssetFailure>,
    case_id: CaseId,
    asset_id: &str,
    stage: &str,
) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ Error::Config(_)) => Err(e),
        Err(e) => {
            failures.push(AssetFailure {
                case_id,
                asset_id: asset_id.to_string(),
                stage: stage.to_string(),
                message: e.to_string(),
            });
            Ok(None)
        }
    }
}

impl IngestCtx<'_> {
    fn process_asset(&self, folder: &CaseFolder, decl: &CaseFolderAsset) -> Result<AssetOutcome> {
        let m = &folder.manifest;
        let case_id = m.case_id;
        let asset_id = decl.asset_id.clone().unwrap_or_else(|| decl.path.clone());
        let mut out = AssetOutcome {
            asset: None,
            image_embedding: None,
            entries: Vec::new(),
            failures: Vec::new(),
        };
        let fail = |out: &mut AssetOutcome, stage: &str, msg: String| {
            out.failures.push(AssetFailure {
                case_id,
                asset_id: asset_id.clone(),
                stage: stage.into(),
                message: msg,
            });
        };
        if !path_stays_inside(&decl.path) {
            fail(
                &mut out,
                "path",
                format!("{:?} escapes the case folder", decl.path),
            );
            return Ok(out);
        }
        let Some(kind) = decl.kind.or_else(|| infer_kind(&decl.path)) else {
            fail(
                &mut out,
                "kind",
                format!("cannot infer media kind of {:?}", decl.path),
            );
            return Ok(out);
        };
        let path = folder.dir.join(&decl.path);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                fail(&mut out, "read", format!("{}: {e}", path.display()));
                return Ok(out);
            }
        };
        let context = self
            .options
            .case_context
            .then(|| format!("design case \"{}\"", m.title));
        let asset = MediaAsset {
            asset_id: asset_id.clone(),
            kind,
            source_path: decl.path.clone(),
            category_hint: decl.category_hint.clone(),
        };
        match kind {
            MediaKind::Image => {
                let Some(media_type) = MediaType::sniff(&bytes) else {
                    fail(
                        &mut out,
                        "content",
                        "file is not a PNG or JPEG image".into(),
                    );
                    return Ok(out);
                };
                let caption_path = folder.dir.join(format!("{}{CAPTION_SUFFIX}", decl.path));
                let caption = std::fs::read_to_string(&caption_path).ok();
                let input = ImageInput {
                    bytes: &bytes,
                    media_type,
                    caption: caption.as_deref(),
                    asset_id: Some(&asset_id),
                };
                out.image_embedding = soft(
                    self.gateway.embed_image(&input),
                    &mut out.failures,
                    case_id,
                    &asset_id,
                    "embed_image",
                )?;
                let media = MediaPayload::Image {
                    bytes: &bytes,
                    media_type,
                };
                let critique = critique_media(
                    self.vlm,
                    &self.prompt,
                    &asset_id,
                    &media,
                    context.as_deref(),
                );
                if let Some(p) = soft(critique, &mut out.failures, case_id, &asset_id, "critique")?
                {
                    out.entries = augment::response_to_entries(&p.response, case_id, &asset_id);
                }
            }
            MediaKind::Text => {
                let Ok(text) = String::from_utf8(bytes) else {
                    fail(&mut out, "content", "text asset is not UTF-8".into());
                    return Ok(out);
                };
                if self.options.chunking.critique_text_files && !text.trim().is_empty() {
                    let media = MediaPayload::Text(&text);
                    let critique = critique_media(
                        self.vlm,
                        &self.prompt,
                        &asset_id,
                        &media,
                        context.as_deref(),
                    );
                    if let Some(p) =
                        soft(critique, &mut out.failures, case_id, &asset_id, "critique")?
                    {
                        out.entries = augment::response_to_entries(&p.response, case_id, &asset_id);
                    }
                }
                out.entries.extend(augment::chunk_entries(
                    &text,
                    self.options.chunking.max_chars,
                    case_id,
                    &asset_id,
                ));
            }
        }
        out.asset = Some(asset);
        Ok(out)
    }

    fn embed_entry(&self, mut e: AnalysisEntry) -> (AnalysisEntry, Vec<Result<()>>) {
        let t = self.gateway.embed_text(Space::Text, &e.text).map(|v| {
            e.text_embedding = Some(v);
        });
        let c = self
            .gateway
            .embed_text(Space::Crossmodal, &e.text)
            .map(|v| {
                e.crossmodal_embedding = Some(v);
            });
        (e, vec![t, c])
    }
}

/// Builds a database from a root of case folders. Per-asset failures are
/// recorded in the report; configuration errors and an empty root are fatal.
pub fn ingest(
    root: &Path,
    gateway: &EmbeddingGateway,
    vlm: &dyn VisionModel,
    options: &IngestOptions,
) -> Result<IngestReport> {
    let mut warnings = Vec::new();
    if !root.is_dir() {
        return Err(Error::input(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let folders = discover(root, &mut warnings)?;
    if folders.is_empty() {
        return Err(Error::input(format!(
            "{} contains no valid case folders",
            root.display()
        )));
    }
    let ctx = IngestCtx {
        gateway,
        vlm,
        prompt: CritiquePrompt::default(),
        options,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let tasks: Vec<(usize, &CaseFolderAsset)> = folders
        .iter()
        .enumerate()
        .flat_map(|(i, f)| f.manifest.assets.iter().map(move |a| (i, a)))
        .collect();
    let outcomes: Vec<Result<AssetOutcome>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, a)| ctx.process_asset(&folders[i], a))
            .collect()
    });

    let mut failures = Vec::new();
    let mut drafts: Vec<DesignCase> = folders
        .iter()
        .map(|f| {
            let m = &f.manifest;
            DesignCase {
                case_id: m.case_id,
                title: m.title.clone(),
                description: m.description.clone(),
                assets: Vec::new(),
                entries: Vec::new(),
                image_embeddings: BTreeMap::new(),
            }
        })
        .collect();
    for ((case_idx, _), outcome) in tasks.iter().zip(outcomes) {
        let o = outcome?;
        let case = &mut drafts[*case_idx];
        failures.extend(o.failures);
        if let Some(asset) = o.asset {
            if let Some(v) = o.image_embedding {
                case.image_embeddings.insert(asset.asset_id.clone(), v);
            }
            case.assets.push(asset);
        }
        case.entries.extend(o.entries);
    }
    for case in &mut drafts {
        let mut seen = BTreeSet::new();
        let mut dup = Vec::new();
        for a in &case.assets {
            if !seen.insert(a.asset_id.clone()) {
                dup.push(a.asset_id.clone());
            }
        }
        if !dup.is_empty() {
            return Err(Error::input(format!(
                "case {}: duplicate asset ids {dup:?}",
                case.case_id
            )));
        }
        case.entries.extend(augment::chunk_entries(
            &case.description,
            options.chunking.max_chars,
            case.case_id,
            DESCRIPTION_ORIGIN,
        ));
    }

    // embed every entry in both spaces
    let flat: Vec<(usize, AnalysisEntry)> = drafts
        .iter_mut()
        .enumerate()
        .flat_map(|(i, c)| {
            std::mem::take(&mut c.entries)
                .into_iter()
                .map(move |e| (i, e))
        })
        .collect();
    let embedded: Vec<(usize, AnalysisEntry, Vec<Result<()>>)> = pool.install(|| {
        flat.into_par_iter()
            .map(|(i, e)| {
                let (e, rs) = ctx.embed_entry(e);
                (i, e, rs)
            })
            .collect()
    });
    for (case_idx, entry, results) in embedded {
        let mut ok = true;
        for r in results {
            let origin = entry.origin.clone();
            if soft(r, &mut failures, entry.case_id, &origin, "embed_text")?.is_none() {
                ok = false;
            }
        }
        if ok {
            drafts[case_idx].entries.push(entry);
        }
    }

    let mut cases = Vec::new();
    for case in drafts {
        if case.entries.is_empty() {
            warnings.push(format!(
                "case {}: no entries after ingestion, left out of the database",
                case.case_id
            ));
            continue;
        }
        let violations = validate_case(&case);
        if !violations.is_empty() {
            warnings.push(format!(
                "case {}: {}; left out of the database",
                case.case_id,
                violations.join("; ")
            ));
            continue;
        }
        cases.push(case);
    }
    if cases.is_empty() {
        return Err(Error::input(format!(
            "{}: no case survived ingestion",
            root.display()
        )));
    }
    let database = CaseDatabase::new(
        gateway.info(Space::Text),
        gateway.info(Space::Crossmodal),
        options.chunking.clone(),
        cases,
    )?;
    if let Some(prev) = &options.previous {
        prev.ensure_compatible(database.manifest())?;
    }
    Ok(IngestReport {
        database,
        failures,
        warnings,
    })
}
