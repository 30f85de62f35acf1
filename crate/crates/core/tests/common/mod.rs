#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use archseek_core::augment::{chunk_entries, ReplayVlm, CHUNK_MAX_CHARS};
use archseek_core::embedding::{EmbeddingGateway, ImageInput, MediaType};
use archseek_core::index::{ingest, CaseDatabase, ChunkingParams, IngestOptions};
use archseek_core::model::{
    AnalysisEntry, Aspect, CaseId, DesignCase, MediaAsset, MediaKind, Space, DESCRIPTION_ORIGIN,
};
use archseek_core::retrieval::{EngineConfig, RetrievalEngine};
use archseek_core::synth::{generate, SynthCorpus, SynthParams};

pub const TEXT_DIM: usize = 64;
pub const CROSS_DIM: usize = 48;

pub fn gateway() -> Arc<EmbeddingGateway> {
    Arc::new(EmbeddingGateway::mock(TEXT_DIM, CROSS_DIM))
}

/// Builds an embedded case by hand. Each caption becomes one image whose
/// cross-modal vector is the caption's mock embedding.
pub fn build_case(
    gw: &EmbeddingGateway,
    id: u64,
    title: &str,
    description: &str,
    entries: &[(Aspect, &str)],
    captions: &[&str],
) -> DesignCase {
    let case_id = CaseId(id);
    let mut out = Vec::new();
    for (n, (aspect, text)) in entries.iter().enumerate() {
        out.push(AnalysisEntry {
            entry_id: format!("{id}:img-1:{}:{n}", aspect.key()),
            case_id,
            aspect: *aspect,
            text: text.to_string(),
            origin: "img-1".into(),
            text_embedding: None,
            crossmodal_embedding: None,
        });
    }
    out.extend(chunk_entries(
        description,
        CHUNK_MAX_CHARS,
        case_id,
        DESCRIPTION_ORIGIN,
    ));
    for e in &mut out {
        e.text_embedding = Some(gw.embed_text(Space::Text, &e.text).unwrap());
        e.crossmodal_embedding = Some(gw.embed_text(Space::Crossmodal, &e.text).unwrap());
    }
    let mut assets = Vec::new();
    let mut image_embeddings = BTreeMap::new();
    for (n, caption) in captions.iter().enumerate() {
        let asset_id = format!("img-{}", n + 1);
        let bytes = format!("fake image {id} {n}").into_bytes();
        let v = gw
            .embed_image(&ImageInput {
                bytes: &bytes,
                media_type: MediaType::Png,
                caption: Some(caption),
                asset_id: Some(&asset_id),
            })
            .unwrap();
        image_embeddings.insert(asset_id.clone(), v);
        assets.push(MediaAsset {
            asset_id: asset_id.clone(),
            kind: MediaKind::Image,
            source_path: format!("{asset_id}.png"),
            category_hint: None,
        });
    }
    DesignCase {
        case_id,
        title: title.into(),
        description: description.into(),
        assets,
        entries: out,
        image_embeddings,
    }
}

pub fn database(gw: &EmbeddingGateway, cases: Vec<DesignCase>) -> CaseDatabase {
    CaseDatabase::new(
        gw.info(Space::Text),
        gw.info(Space::Crossmodal),
        ChunkingParams::default(),
        cases,
    )
    .unwrap()
}

pub fn engine(db: CaseDatabase, gw: Arc<EmbeddingGateway>) -> RetrievalEngine {
    RetrievalEngine::new(Arc::new(db), gw, None, EngineConfig::default()).unwrap()
}

pub struct SynthSetup {
    pub dir: tempfile::TempDir,
    pub corpus: SynthCorpus,
    pub engine: RetrievalEngine,
}

pub fn ingest_synth(params: &SynthParams, jobs: usize) -> SynthSetup {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(params, dir.path()).unwrap();
    let gw = gateway();
    let vlm = Arc::new(ReplayVlm::new(&corpus.fixtures_dir));
    let opts = IngestOptions {
        jobs,
        ..Default::default()
    };
    let report = ingest(&corpus.cases_dir, &gw, vlm.as_ref(), &opts).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    let engine = RetrievalEngine::new(
        Arc::new(report.database),
        gw,
        Some(vlm),
        EngineConfig::default(),
    )
    .unwrap();
    SynthSetup {
        dir,
        corpus,
        engine,
    }
}
