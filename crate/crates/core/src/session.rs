//! In-session recommendation driven by likes.
//!
//! The ranking is recomputed from scratch after every change: the query pool
//! is the session origin (if any) plus one text query per liked case, each
//! member's fused scores are summed per case, and liked cases are moved out
//! of the list into the liked rail. Members are always summed in the same
//! order (origin first, then liked cases by ascending id), so the result only
//! depends on the origin and the liked set.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::CritiqueResponse;
use crate::error::{Error, Result};
use crate::model::{CaseId, DesignCase};
use crate::retrieval::{
    rerank_with_weights, AspectCache, AspectWeights, RankedResult, RankedRow, RetrievalEngine,
};

/// What the session started from. Image origins keep the analysis so a
/// restored session never calls the vision model again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    None,
    Text {
        query: String,
    },
    Image {
        analysis: CritiqueResponse,
        weights: AspectWeights,
    },
}

/// Text used to query with a liked case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikeQuerySource {
    #[default]
    Description,
    /// Description followed by every critique sentence of the case.
    DescriptionAndEntries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikeOutcome {
    Liked,
    AlreadyLiked,
}

/// Persisted form of a session; the ranking itself is recomputed on restore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub origin: Origin,
    pub liked: Vec<CaseId>,
    pub rng_seed: u64,
    #[serde(default)]
    pub like_source: LikeQuerySource,
}

#[derive(Debug, Clone)]
pub struct Session {
    session_id: String,
    origin: Origin,
    liked: Vec<CaseId>,
    rng_seed: u64,
    like_source: LikeQuerySource,
    image_cache: Option<AspectCache>,
    origin_result: Option<RankedResult>,
    like_results: BTreeMap<CaseId, RankedResult>,
    current: RankedResult,
}

/// All case ids in a seeded uniform random order, each with score 0.
pub fn random_ranking(ids: &[CaseId], seed: u64) -> RankedResult {
    let mut ids: Vec<CaseId> = ids.to_vec();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    RankedResult {
        rows: ids
            .into_iter()
            .map(|id| RankedRow {
                case_id: id,
                score: 0.0,
                text_rank: None,
                image_rank: None,
                best_entry_id: None,
                best_asset_id: None,
                text_cosine: None,
                image_cosine: None,
            })
            .collect(),
    }
}

/// Query text for a liked case.
pub fn like_query_text(case: &DesignCase, source: LikeQuerySource) -> String {
    let mut text = if case.description.trim().is_empty() {
        case.title.clone()
    } else {
        case.description.clone()
    };
    if source == LikeQuerySource::DescriptionAndEntries {
        for e in case.entries.iter().filter(|e| e.is_augmented()) {
            text.push('\n');
            text.push_str(&e.text);
        }
    }
    text
}

/// Sums member score vectors in the given order and drops `exclude`.
pub fn combine_pool<'a>(
    members: impl IntoIterator<Item = &'a RankedResult>,
    exclude: &BTreeSet<CaseId>,
) -> RankedResult {
    struct Acc {
        score: f64,
        best: f64,
        entry: Option<String>,
        asset: Option<String>,
    }
    let mut acc: BTreeMap<CaseId, Acc> = BTreeMap::new();
    for member in members {
        for row in &member.rows {
            if exclude.contains(&row.case_id) {
                continue;
            }
            let a = acc.entry(row.case_id).or_insert(Acc {
                score: 0.0,
                best: f64::NEG_INFINITY,
                entry: None,
                asset: None,
            });
            a.score += row.score;
            if row.score > a.best {
                a.best = row.score;
                a.entry = row.best_entry_id.clone();
                a.asset = row.best_asset_id.clone();
            }
        }
    }
    RankedResult::from_rows(
        acc.into_iter()
            .map(|(id, a)| RankedRow {
                case_id: id,
                score: a.score,
                text_rank: None,
                image_rank: None,
                best_entry_id: a.entry,
                best_asset_id: a.asset,
                text_cosine: None,
                image_cosine: None,
            })
            .collect(),
    )
}

impl Session {
    /// Starts a session. Text origins run the text query, image origins
    /// rebuild the aspect cache from the stored analysis, and a session
    /// without origin starts from a seeded random ordering.
    pub fn start(
        engine: &RetrievalEngine,
        session_id: impl Into<String>,
        origin: Origin,
        rng_seed: u64,
    ) -> Result<Session> {
        Self::restore(
            engine,
            SessionSnapshot {
                session_id: session_id.into(),
                origin,
                liked: Vec::new(),
                rng_seed,
                like_source: LikeQuerySource::default(),
            },
        )
    }

    /// Starts from an already-computed image query, avoiding a second pass
    /// over the sentence queries.
    pub fn start_from_image(
        engine: &RetrievalEngine,
        session_id: impl Into<String>,
        cache: AspectCache,
        weights: AspectWeights,
        rng_seed: u64,
    ) -> Result<Session> {
        let result = rerank_with_weights(&cache, &weights)?;
        let mut s = Session {
            session_id: session_id.into(),
            origin: Origin::Image {
                analysis: cache.analysis.clone(),
                weights,
            },
            liked: Vec::new(),
            rng_seed,
            like_source: LikeQuerySource::default(),
            image_cache: Some(cache),
            origin_result: Some(result),
            like_results: BTreeMap::new(),
            current: RankedResult::default(),
        };
        s.recompute(engine);
        Ok(s)
    }

    pub fn restore(engine: &RetrievalEngine, snap: SessionSnapshot) -> Result<Session> {
        let (image_cache, origin_result) = match &snap.origin {
            Origin::None => (None, None),
            Origin::Text { query } => (None, Some(engine.text_query(query)?)),
            Origin::Image { analysis, weights } => {
                let cache = engine.aspect_cache(analysis.clone())?;
                let r = rerank_with_weights(&cache, weights)?;
                (Some(cache), Some(r))
            }
        };
        let mut seen = BTreeSet::new();
        for id in &snap.liked {
            if !seen.insert(*id) {
                return Err(Error::input(format!("case {id} liked twice in snapshot")));
            }
        }
        let mut s = Session {
            session_id: snap.session_id,
            origin: snap.origin,
            liked: Vec::new(),
            rng_seed: snap.rng_seed,
            like_source: snap.like_source,
            image_cache,
            origin_result,
            like_results: BTreeMap::new(),
            current: RankedResult::default(),
        };
        for id in snap.liked {
            s.fetch_like_result(engine, id)?;
            s.liked.push(id);
        }
        s.recompute(engine);
        Ok(s)
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            session_id: self.session_id.clone(),
            origin: self.origin.clone(),
            liked: self.liked.clone(),
            rng_seed: self.rng_seed,
            like_source: self.like_source,
        }
    }

    pub fn set_like_source(
        &mut self,
        engine: &RetrievalEngine,
        source: LikeQuerySource,
    ) -> Result<()> {
        if self.like_source == source {
            return Ok(());
        }
        self.like_source = source;
        self.like_results.clear();
        for id in self.liked.clone() {
            self.fetch_like_result(engine, id)?;
        }
        self.recompute(engine);
        Ok(())
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn origin(&self) -> &Origin {
        &self.origin
    }

    /// Liked cases in the order they were liked.
    pub fn liked(&self) -> &[CaseId] {
        &self.liked
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// The recommendation list (liked cases excluded).
    pub fn current(&self) -> &RankedResult {
        &self.current
    }

    pub fn image_cache(&self) -> Option<&AspectCache> {
        self.image_cache.as_ref()
    }

    pub fn weights(&self) -> Option<&AspectWeights> {
        match &self.origin {
            Origin::Image { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn fetch_like_result(&mut self, engine: &RetrievalEngine, id: CaseId) -> Result<()> {
        let case = engine
            .database()
            .case(id)
            .ok_or_else(|| Error::NotFound(format!("case {id}")))?;
        if !self.like_results.contains_key(&id) {
            let r = engine.text_query(&like_query_text(case, self.like_source))?;
            self.like_results.insert(id, r);
        }
        Ok(())
    }

    pub fn like(&mut self, engine: &RetrievalEngine, id: CaseId) -> Result<LikeOutcome> {
        if engine.database().case(id).is_none() {
            return Err(Error::NotFound(format!("case {id}")));
        }
        if self.liked.contains(&id) {
            log::warn!("session {}: case {id} is already liked", self.session_id);
            return Ok(LikeOutcome::AlreadyLiked);
        }
        self.fetch_like_result(engine, id)?;
        self.liked.push(id);
        self.recompute(engine);
        Ok(LikeOutcome::Liked)
    }

    pub fn unlike(&mut self, engine: &RetrievalEngine, id: CaseId) -> Result<()> {
        let Some(pos) = self.liked.iter().position(|&l| l == id) else {
            return Err(Error::input(format!(
                "case {id} is not liked in this session"
            )));
        };
        self.liked.remove(pos);
        self.recompute(engine);
        Ok(())
    }

    /// Re-weights an image-origin session without any provider call.
    pub fn set_weights(&mut self, engine: &RetrievalEngine, weights: AspectWeights) -> Result<()> {
        let cache = self
            .image_cache
            .as_ref()
            .ok_or_else(|| Error::State("session has no image query to re-weight".into()))?;
        let r = rerank_with_weights(cache, &weights)?;
        self.origin_result = Some(r);
        if let Origin::Image { weights: w, .. } = &mut self.origin {
            *w = weights;
        }
        self.recompute(engine);
        Ok(())
    }

    fn recompute(&mut self, engine: &RetrievalEngine) {
        if self.origin_result.is_none() && self.liked.is_empty() {
            self.current = random_ranking(&engine.database().case_ids(), self.rng_seed);
            return;
        }
        let liked: BTreeSet<CaseId> = self.liked.iter().copied().collect();
        let members = self
            .origin_result
            .iter()
            .chain(liked.iter().filter_map(|id| self.like_results.get(id)));
        self.current = combine_pool(members, &liked);
    }
}
