//! JSON payloads shared by the HTTP service and `archseek query --json`.

use std::collections::BTreeMap;

use archseek_core::model::{MediaKind, DESCRIPTION_ORIGIN};
use archseek_core::session::Origin;
use archseek_core::{
    Aspect, AspectWeights, CaseDatabase, CaseId, CritiqueResponse, DesignCase, RankedResult,
    RankedRow, Session,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetRef {
    pub asset_id: String,
    pub source_path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Card {
    pub case_id: CaseId,
    pub title: String,
    pub score: f64,
    /// Text of the best-matching entry.
    pub snippet: Option<String>,
    pub best_entry_id: Option<String>,
    pub asset: Option<AssetRef>,
    /// Critique aspects this case has entries for.
    pub aspect_tags: Vec<Aspect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: CaseId,
    pub title: String,
    pub asset: Option<AssetRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Text,
    Image,
    Browse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiResult {
    pub session_id: Option<String>,
    pub mode: Mode,
    pub query: Option<String>,
    pub cards: Vec<Card>,
    pub liked: Vec<CaseSummary>,
    pub weights: Option<AspectWeights>,
    pub analysis: Option<CritiqueResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryView {
    pub entry_id: String,
    pub text: String,
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDetail {
    pub case_id: CaseId,
    pub title: String,
    pub description: String,
    pub assets: Vec<AssetRef>,
    pub entry_groups: BTreeMap<Aspect, Vec<EntryView>>,
    pub entry_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub format_version: String,
    pub case_count: usize,
}

fn asset_ref(case: &DesignCase, asset_id: &str) -> Option<AssetRef> {
    case.asset(asset_id).map(|a| AssetRef {
        asset_id: a.asset_id.clone(),
        source_path: a.source_path.clone(),
        category_hint: a.category_hint.clone(),
    })
}

/// Asset to show for a result: the matched image, else the asset the best
/// entry came from, else the case's first image.
fn display_asset(case: &DesignCase, row: &RankedRow) -> Option<AssetRef> {
    let from_entry = row
        .best_entry_id
        .as_deref()
        .and_then(|id| case.entry(id))
        .filter(|e| e.origin != DESCRIPTION_ORIGIN)
        .map(|e| e.origin.as_str());
    row.best_asset_id
        .as_deref()
        .and_then(|id| asset_ref(case, id))
        .or_else(|| from_entry.and_then(|id| asset_ref(case, id)))
        .or_else(|| first_image(case))
}

fn first_image(case: &DesignCase) -> Option<AssetRef> {
    case.assets
        .iter()
        .find(|a| a.kind == MediaKind::Image)
        .and_then(|a| asset_ref(case, &a.asset_id))
}

fn aspect_tags(case: &DesignCase) -> Vec<Aspect> {
    Aspect::CRITIQUE
        .into_iter()
        .filter(|a| case.entries.iter().any(|e| e.aspect == *a))
        .collect()
}

pub fn card(db: &CaseDatabase, row: &RankedRow) -> Option<Card> {
    let case = db.case(row.case_id)?;
    let entry = row.best_entry_id.as_deref().and_then(|id| case.entry(id));
    Some(Card {
        case_id: case.case_id,
        title: case.title.clone(),
        score: row.score,
        snippet: entry.map(|e| e.text.clone()),
        best_entry_id: entry.map(|e| e.entry_id.clone()),
        asset: display_asset(case, row),
        aspect_tags: aspect_tags(case),
    })
}

pub fn cards(db: &CaseDatabase, result: &RankedResult, top: Option<usize>) -> Vec<Card> {
    let n = top.unwrap_or(usize::MAX);
    result
        .rows
        .iter()
        .take(n)
        .filter_map(|r| card(db, r))
        .collect()
}

pub fn summary(db: &CaseDatabase, id: CaseId) -> Option<CaseSummary> {
    let case = db.case(id)?;
    Some(CaseSummary {
        case_id: id,
        title: case.title.clone(),
        asset: first_image(case),
    })
}

/// Payload for a plain text query outside any session.
pub fn text_result(
    db: &CaseDatabase,
    query: &str,
    result: &RankedResult,
    top: Option<usize>,
) -> ApiResult {
    ApiResult {
        session_id: None,
        mode: Mode::Text,
        query: Some(query.to_string()),
        cards: cards(db, result, top),
        liked: Vec::new(),
        weights: None,
        analysis: None,
    }
}

pub fn session_result(db: &CaseDatabase, session: &Session, top: Option<usize>) -> ApiResult {
    let (mode, query, weights, analysis) = match session.origin() {
        Origin::None => (Mode::Browse, None, None, None),
        Origin::Text { query } => (Mode::Text, Some(query.clone()), None, None),
        Origin::Image { analysis, weights } => (
            Mode::Image,
            None,
            Some(weights.clone()),
            Some(analysis.clone()),
        ),
    };
    ApiResult {
        session_id: Some(session.session_id().to_string()),
        mode,
        query,
        cards: cards(db, session.current(), top),
        liked: session
            .liked()
            .iter()
            .filter_map(|&id| summary(db, id))
            .collect(),
        weights,
        analysis,
    }
}

pub fn case_detail(db: &CaseDatabase, id: CaseId) -> Option<CaseDetail> {
    let case = db.case(id)?;
    let mut entry_groups: BTreeMap<Aspect, Vec<EntryView>> = BTreeMap::new();
    for e in &case.entries {
        entry_groups.entry(e.aspect).or_default().push(EntryView {
            entry_id: e.entry_id.clone(),
            text: e.text.clone(),
            origin: e.origin.clone(),
        });
    }
    Some(CaseDetail {
        case_id: id,
        title: case.title.clone(),
        description: case.description.clone(),
        assets: case
            .assets
            .iter()
            .filter_map(|a| asset_ref(case, &a.asset_id))
            .collect(),
        entry_groups,
        entry_count: case.entries.len(),
    })
}

pub fn health(db: &CaseDatabase) -> Health {
    Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        format_version: db.manifest().format_version.clone(),
        case_count: db.len(),
    }
}
