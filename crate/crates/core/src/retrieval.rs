//! Query-time scoring: max-over-entries relevance, reciprocal rank fusion of
//! the text and image scans, and the aspect-weighted combination used for
//! image queries.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::{critique_media, CritiquePrompt, CritiqueResponse, MediaPayload, VisionModel};
use crate::embedding::{EmbeddingGateway, MediaType};
use crate::error::{Error, Result};
use crate::index::{CaseDatabase, EntryFilter, ScanHit};
use crate::model::{Aspect, CaseId, EmbeddingVector, Space};

/// Cosine similarity with `f64` accumulation.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.space != b.space {
        return Err(Error::input(format!(
            "cannot compare {} and {} vectors",
            a.space, b.space
        )));
    }
    if a.values.len() != b.values.len() || a.dim != b.dim {
        return Err(Error::input(format!(
            "dimension mismatch: {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::input("cosine of a zero vector is undefined"));
    }
    let dot: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingRankPolicy {
    /// A list that does not contain the case contributes nothing.
    #[default]
    OmitTerm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionParams {
    pub c: u32,
    #[serde(default)]
    pub missing_rank_policy: MissingRankPolicy,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            c: 10,
            missing_rank_policy: MissingRankPolicy::OmitTerm,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if self.c < 1 {
            return Err(Error::input("fusion constant c must be at least 1"));
        }
        Ok(())
    }
}

/// Reciprocal rank fusion of one case's 1-based ranks: Σ 1/(rank + c) over
/// the ranks that are present.
pub fn rrf_score(
    text_rank: Option<usize>,
    image_rank: Option<usize>,
    params: &FusionParams,
) -> Result<f64> {
    params.validate()?;
    if text_rank.is_none() && image_rank.is_none() {
        return Err(Error::input("at least one rank is required"));
    }
    let c = f64::from(params.c);
    let mut score = 0.0;
    for rank in [text_rank, image_rank].into_iter().flatten() {
        if rank == 0 {
            return Err(Error::input("ranks are 1-based"));
        }
        score += 1.0 / (rank as f64 + c);
    }
    Ok(score)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRow {
    pub case_id: CaseId,
    pub score: f64,
    pub text_rank: Option<usize>,
    pub image_rank: Option<usize>,
    pub best_entry_id: Option<String>,
    pub best_asset_id: Option<String>,
    pub text_cosine: Option<f64>,
    pub image_cosine: Option<f64>,
}

impl RankedRow {
    fn bare(case_id: CaseId, score: f64) -> Self {
        RankedRow {
            case_id,
            score,
            text_rank: None,
            image_rank: None,
            best_entry_id: None,
            best_asset_id: None,
            text_cosine: None,
            image_cosine: None,
        }
    }
}

/// Rows in descending score order, ascending case id on ties.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub rows: Vec<RankedRow>,
}

impl RankedResult {
    pub fn from_rows(mut rows: Vec<RankedRow>) -> Self {
        rows.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.case_id.cmp(&b.case_id))
        });
        RankedResult { rows }
    }

    pub fn case_ids(&self) -> Vec<CaseId> {
        self.rows.iter().map(|r| r.case_id).collect()
    }

    pub fn get(&self, id: CaseId) -> Option<&RankedRow> {
        self.rows.iter().find(|r| r.case_id == id)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Fuses a text-scan list and an optional image-scan list. Without an image
/// list the text relevance order is kept and scores are the single RRF term.
pub fn fuse(
    text_hits: &[ScanHit],
    image_hits: Option<&[ScanHit]>,
    params: &FusionParams,
) -> Result<RankedResult> {
    let mut rows: BTreeMap<CaseId, RankedRow> = BTreeMap::new();
    for (i, h) in text_hits.iter().enumerate() {
        let row = rows
            .entry(h.case_id)
            .or_insert_with(|| RankedRow::bare(h.case_id, 0.0));
        row.text_rank = Some(i + 1);
        row.best_entry_id = Some(h.best_id.clone());
        row.text_cosine = Some(h.cosine);
    }
    for (i, h) in image_hits.unwrap_or_default().iter().enumerate() {
        let row = rows
            .entry(h.case_id)
            .or_insert_with(|| RankedRow::bare(h.case_id, 0.0));
        row.image_rank = Some(i + 1);
        row.best_asset_id = Some(h.best_id.clone());
        row.image_cosine = Some(h.cosine);
    }
    let rows = rows
        .into_values()
        .map(|mut r| {
            r.score = rrf_score(r.text_rank, r.image_rank, params)?;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedResult::from_rows(rows))
}

/// How a text query is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOptions {
    pub fusion: FusionParams,
    pub entry_filter: EntryFilter,
    /// Fuse with the image-understanding scan; off gives text-analysis ranking only.
    pub use_image_scan: bool,
}

impl Default for QueryOptions {
    fn default() -> Self {
        QueryOptions {
            fusion: FusionParams::default(),
            entry_filter: EntryFilter::All,
            use_image_scan: true,
        }
    }
}

/// Whether each analysis sentence of an image query is scored with full
/// text+image fusion or with the text scan alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AspectScoring {
    #[default]
    Fused,
    TextOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub fusion: FusionParams,
    pub aspect_scoring: AspectScoring,
}

/// Slider weights per critique aspect, each in [0, 1]. Missing aspects
/// default to 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<Aspect, f64>", into = "BTreeMap<Aspect, f64>")]
pub struct AspectWeights(BTreeMap<Aspect, f64>);

impl Default for AspectWeights {
    fn default() -> Self {
        AspectWeights(Aspect::CRITIQUE.iter().map(|&a| (a, 1.0)).collect())
    }
}

impl TryFrom<BTreeMap<Aspect, f64>> for AspectWeights {
    type Error = Error;

    fn try_from(given: BTreeMap<Aspect, f64>) -> Result<Self> {
        let mut w = AspectWeights::default();
        for (aspect, value) in given {
            w.set(aspect, value)?;
        }
        Ok(w)
    }
}

impl From<AspectWeights> for BTreeMap<Aspect, f64> {
    fn from(w: AspectWeights) -> Self {
        w.0
    }
}

impl AspectWeights {
    /// All zero except `aspect`.
    pub fn only(aspect: Aspect) -> Result<Self> {
        let mut w = AspectWeights(Aspect::CRITIQUE.iter().map(|&a| (a, 0.0)).collect());
        w.set(aspect, 1.0)?;
        Ok(w)
    }

    pub fn set(&mut self, aspect: Aspect, value: f64) -> Result<()> {
        if !aspect.is_critique() {
            return Err(Error::input(format!("{aspect} cannot be weighted")));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::input(format!(
                "weight for {aspect} must be in [0, 1], got {value}"
            )));
        }
        self.0.insert(aspect, value);
        Ok(())
    }

    pub fn get(&self, aspect: Aspect) -> f64 {
        self.0.get(&aspect).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.values().all(|&w| w <= 0.0) {
            return Err(Error::input("at least one aspect weight must be positive"));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (Aspect, f64)> + '_ {
        self.0.iter().map(|(a, w)| (*a, *w))
    }
}

/// One case's score within one aspect of an image query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectHit {
    pub case_id: CaseId,
    /// Max fused score over the aspect's sentence queries.
    pub score: f64,
    /// Index of the sentence that produced `score`.
    pub sentence: usize,
    pub best_entry_id: Option<String>,
    pub best_asset_id: Option<String>,
}

/// Everything needed to re-weight an image query without touching a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectCache {
    pub analysis: CritiqueResponse,
    /// Per analyzed aspect, hits sorted by descending score then case id.
    pub per_aspect: BTreeMap<Aspect, Vec<AspectHit>>,
}

impl AspectCache {
    /// Builds the cache from already-computed sentence results.
    pub fn from_sentence_results(
        analysis: CritiqueResponse,
        mut results: impl FnMut(&str) -> Result<RankedResult>,
    ) -> Result<Self> {
        let mut per_aspect = BTreeMap::new();
        for aspect in analysis.non_empty_aspects().collect::<Vec<_>>() {
            let mut best: BTreeMap<CaseId, AspectHit> = BTreeMap::new();
            for (si, sentence) in analysis.sentences(aspect).iter().enumerate() {
                for row in results(sentence)?.rows {
                    let better = best.get(&row.case_id).is_none_or(|h| row.score > h.score);
                    if better {
                        best.insert(
                            row.case_id,
                            AspectHit {
                                case_id: row.case_id,
                                score: row.score,
                                sentence: si,
                                best_entry_id: row.best_entry_id,
                                best_asset_id: row.best_asset_id,
                            },
                        );
                    }
                }
            }
            let mut hits: Vec<AspectHit> = best.into_values().collect();
            hits.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| a.case_id.cmp(&b.case_id))
            });
            per_aspect.insert(aspect, hits);
        }
        Ok(AspectCache {
            analysis,
            per_aspect,
        })
    }

    /// Ranking by one aspect's scores alone.
    pub fn aspect_ranking(&self, aspect: Aspect) -> RankedResult {
        let rows = self
            .per_aspect
            .get(&aspect)
            .map(|hits| {
                hits.iter()
                    .map(|h| RankedRow {
                        best_entry_id: h.best_entry_id.clone(),
                        best_asset_id: h.best_asset_id.clone(),
                        ..RankedRow::bare(h.case_id, h.score)
                    })
                    .collect()
            })
            .unwrap_or_default();
        RankedResult::from_rows(rows)
    }
}

/// Final image-query ranking: Σ_aspect w·score / Σ w over the analyzed
/// aspects. Pure; never calls a provider.
pub fn rerank_with_weights(cache: &AspectCache, weights: &AspectWeights) -> Result<RankedResult> {
    weights.validate()?;
    let total: f64 = cache.per_aspect.keys().map(|&a| weights.get(a)).sum();
    if total <= 0.0 {
        return Err(Error::input(
            "every aspect present in the image analysis has weight zero",
        ));
    }
    struct Acc {
        score: f64,
        best: f64,
        entry: Option<String>,
        asset: Option<String>,
    }
    let mut acc: BTreeMap<CaseId, Acc> = BTreeMap::new();
    for (&aspect, hits) in &cache.per_aspect {
        let share = weights.get(aspect) / total;
        for h in hits {
            let contribution = share * h.score;
            let a = acc.entry(h.case_id).or_insert(Acc {
                score: 0.0,
                best: f64::NEG_INFINITY,
                entry: None,
                asset: None,
            });
            a.score += contribution;
            if contribution > a.best {
                a.best = contribution;
                a.entry = h.best_entry_id.clone();
                a.asset = h.best_asset_id.clone();
            }
        }
    }
    let rows = acc
        .into_iter()
        .map(|(id, a)| RankedRow {
            best_entry_id: a.entry,
            best_asset_id: a.asset,
            ..RankedRow::bare(id, a.score)
        })
        .collect();
    Ok(RankedResult::from_rows(rows))
}

/// Result of an image query: the critique, the reusable per-aspect cache and
/// the ranking under the requested weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageQueryOutcome {
    pub cache: AspectCache,
    pub weights: AspectWeights,
    pub result: RankedResult,
}

/// Query engine over one immutable database.
#[derive(Clone)]
pub struct RetrievalEngine {
    db: Arc<CaseDatabase>,
    gateway: Arc<EmbeddingGateway>,
    vlm: Option<Arc<dyn VisionModel>>,
    prompt: CritiquePrompt,
    config: EngineConfig,
}

impl std::fmt::Debug for RetrievalEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetrievalEngine")
            .field("cases", &self.db.len())
            .field("config", &self.config)
            .finish()
    }
}

impl RetrievalEngine {
    pub fn new(
        db: Arc<CaseDatabase>,
        gateway: Arc<EmbeddingGateway>,
        vlm: Option<Arc<dyn VisionModel>>,
        config: EngineConfig,
    ) -> Result<Self> {
        config.fusion.validate()?;
        db.manifest().ensure_gateway(&gateway)?;
        Ok(RetrievalEngine {
            db,
            gateway,
            vlm,
            prompt: CritiquePrompt::default(),
            config,
        })
    }

    pub fn database(&self) -> &Arc<CaseDatabase> {
        &self.db
    }

    pub fn gateway(&self) -> &Arc<EmbeddingGateway> {
        &self.gateway
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn default_query_options(&self) -> QueryOptions {
        QueryOptions {
            fusion: self.config.fusion,
            ..QueryOptions::default()
        }
    }

    /// Full hybrid text query: text-analysis scan fused with the image scan.
    pub fn text_query(&self, query: &str) -> Result<RankedResult> {
        self.text_query_with(query, &self.default_query_options())
    }

    pub fn text_query_with(&self, query: &str, opts: &QueryOptions) -> Result<RankedResult> {
        if query.trim().is_empty() {
            return Err(Error::input("query is empty"));
        }
        let qt = self.gateway.embed_text(Space::Text, query)?;
        let text_hits = self.db.scan_text_filtered(&qt, opts.entry_filter)?;
        let image_hits = if opts.use_image_scan {
            let qc = self.gateway.embed_text(Space::Crossmodal, query)?;
            Some(self.db.scan_image_space(&qc)?)
        } else {
            None
        };
        fuse(&text_hits, image_hits.as_deref(), &opts.fusion)
    }

    /// Critiques a query image.
    pub fn analyze_image(&self, image: &[u8]) -> Result<CritiqueResponse> {
        if image.is_empty() {
            return Err(Error::UnsupportedMedia("empty upload".into()));
        }
        let media_type = MediaType::sniff(image)
            .ok_or_else(|| Error::UnsupportedMedia("upload is not a PNG or JPEG image".into()))?;
        let vlm = self
            .vlm
            .as_ref()
            .ok_or_else(|| Error::Config("no vision model configured".into()))?;
        let media = MediaPayload::Image {
            bytes: image,
            media_type,
        };
        let parsed = critique_media(vlm.as_ref(), &self.prompt, "query-image", &media, None)?;
        if parsed.response.is_empty() {
            return Err(Error::EmptyAnalysis(
                "the vision model returned no sentences for any aspect".into(),
            ));
        }
        Ok(parsed.response)
    }

    /// Runs every analysis sentence as an independent text query and keeps,
    /// per aspect and case, the best score.
    pub fn aspect_cache(&self, analysis: CritiqueResponse) -> Result<AspectCache> {
        let opts = QueryOptions {
            use_image_scan: self.config.aspect_scoring == AspectScoring::Fused,
            ..self.default_query_options()
        };
        let mut memo: HashMap<String, RankedResult> = HashMap::new();
        AspectCache::from_sentence_results(analysis, |sentence| {
            if let Some(r) = memo.get(sentence) {
                return Ok(r.clone());
            }
            let r = self.text_query_with(sentence, &opts)?;
            memo.insert(sentence.to_string(), r.clone());
            Ok(r)
        })
    }

    pub fn image_query(&self, image: &[u8], weights: &AspectWeights) -> Result<ImageQueryOutcome> {
        weights.validate()?;
        let analysis = self.analyze_image(image)?;
        let cache = self.aspect_cache(analysis)?;
        let result = rerank_with_weights(&cache, weights)?;
        Ok(ImageQueryOutcome {
            cache,
            weights: weights.clone(),
            result,
        })
    }
}
