//! In-memory corpora for the benchmarks.

use std::collections::BTreeMap;

use archseek_core::augment::{chunk_entries, CHUNK_MAX_CHARS};
use archseek_core::embedding::{ImageInput, MediaType};
use archseek_core::index::ChunkingParams;
use archseek_core::model::{MediaAsset, MediaKind, DESCRIPTION_ORIGIN};
use archseek_core::{
    AnalysisEntry, Aspect, CaseDatabase, CaseId, DesignCase, EmbeddingGateway, Space,
};

const VOCAB: &[&str] = &[
    "glass",
    "facade",
    "timber",
    "roof",
    "courtyard",
    "light",
    "concrete",
    "shell",
    "garden",
    "vault",
    "brick",
    "stair",
    "canopy",
    "terrace",
    "atrium",
    "louver",
    "stone",
    "steel",
    "ramp",
    "loggia",
];

/// Deterministic filler text: word `i` of phrase `n`.
pub fn phrase(n: usize, words: usize) -> String {
    (0..words)
        .map(|i| VOCAB[(n * 7 + i * 13 + n / 3) % VOCAB.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

/// `cases` cases with seven critique entries, a description chunk and two
/// images each.
pub fn corpus(gw: &EmbeddingGateway, cases: usize) -> CaseDatabase {
    let mut out = Vec::with_capacity(cases);
    for id in 1..=cases as u64 {
        let case_id = CaseId(id);
        let mut entries: Vec<AnalysisEntry> = Aspect::CRITIQUE
            .iter()
            .enumerate()
            .map(|(i, a)| AnalysisEntry {
                entry_id: format!("{id}:img-1:{}:0", a.key()),
                case_id,
                aspect: *a,
                text: phrase(id as usize * 7 + i, 6),
                origin: "img-1".into(),
                text_embedding: None,
                crossmodal_embedding: None,
            })
            .collect();
        let description = format!(
            "{}. {}.",
            phrase(id as usize, 8),
            phrase(id as usize + 1, 8)
        );
        entries.extend(chunk_entries(
            &description,
            CHUNK_MAX_CHARS,
            case_id,
            DESCRIPTION_ORIGIN,
        ));
        for e in &mut entries {
            e.text_embedding = Some(gw.embed_text(Space::Text, &e.text).unwrap());
            e.crossmodal_embedding = Some(gw.embed_text(Space::Crossmodal, &e.text).unwrap());
        }
        let mut assets = Vec::new();
        let mut image_embeddings = BTreeMap::new();
        for n in 1..=2 {
            let asset_id = format!("img-{n}");
            let caption = phrase(id as usize * 2 + n, 4);
            let v = gw
                .embed_image(&ImageInput {
                    bytes: asset_id.as_bytes(),
                    media_type: MediaType::Png,
                    caption: Some(&caption),
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
        out.push(DesignCase {
            case_id,
            title: format!("case {id}"),
            description,
            assets,
            entries,
            image_embeddings,
        });
    }
    CaseDatabase::new(
        gw.info(Space::Text),
        gw.info(Space::Crossmodal),
        ChunkingParams::default(),
        out,
    )
    .unwrap()
}
