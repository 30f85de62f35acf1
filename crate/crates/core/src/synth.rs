//! Seeded synthetic corpus with planted relevance, for offline evaluation and
//! demos. Each query owns a few topic words. Its relevant cases carry all of
//! them in critique replies (strong signal), one of them in image captions
//! (partial signal) and one in the description (weak signal). Distractor
//! cases only use filler words.
//!
//! Layout written under the output directory:
//!
//! ```text
//! cases/case-0001/case.json
//! cases/case-0001/img-1.png
//! cases/case-0001/img-1.png.caption.txt
//! cases/case-0001/notes.txt          (every third case)
//! fixtures/<sha256 of payload>.json  (replayed critic replies)
//! dataset.jsonl
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::replay_key;
use crate::error::{Error, Result};
use crate::eval::{EvalDataset, EvalQuery};
use crate::index::{CaseFolderAsset, CaseFolderManifest, CAPTION_SUFFIX, CASE_FILE};
use crate::model::{Aspect, CaseId, MediaKind};

#[rustfmt::skip]
const WORDS: &[&str] = &[
    "atrium", "arcade", "basalt", "beam", "brick", "buttress", "canopy", "cantilever", "cedar",
    "ceramic", "clerestory", "cloister", "colonnade", "concrete", "copper", "corridor",
    "courtyard", "crescent", "dome", "dune", "eave", "fin", "flint", "gable", "gallery",
    "glazing", "granite", "grid", "grotto", "harbor", "hearth", "helix", "hollow", "jetty",
    "kiln", "lantern", "larch", "lattice", "ledge", "limestone", "loggia", "louver", "marble",
    "meadow", "mesh", "monolith", "mosaic", "niche", "oak", "oculus", "orchard", "panorama",
    "parapet", "pavilion", "pergola", "pier", "pine", "plinth", "portico", "prism", "quarry",
    "rammed", "ramp", "reed", "ribbon", "ridge", "rotunda", "sandstone", "screen", "shell",
    "shingle", "skylight", "slate", "slope", "spiral", "spire", "steel", "stilt", "stucco",
    "terrace", "terracotta", "thatch", "timber", "tower", "travertine", "truss", "tunnel",
    "vault", "veranda", "void", "wall", "weave", "willow", "zinc", "amber", "cobalt", "ochre",
    "umber", "saffron", "indigo", "crimson", "ivory", "jade", "coral", "pearl", "onyx",
    "sienna", "teal", "bronze", "pewter", "obsidian", "alabaster", "cinder", "ember", "frost",
    "glacier", "lagoon", "marsh", "prairie", "savanna", "tundra", "canyon", "delta", "fjord",
    "mesa", "oasis", "plateau", "reef", "summit", "valley", "aurora", "breeze", "cascade",
    "drizzle", "echo", "flicker", "glimmer", "halo", "murmur", "ripple", "shimmer", "whisper",
    "zephyr",
];

const TOPIC_WORDS_PER_QUERY: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub cases: usize,
    pub queries: usize,
    pub relevant_per_query: usize,
    pub images_per_case: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            cases: 30,
            queries: 8,
            relevant_per_query: 3,
            images_per_case: 2,
            seed: 7,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.cases == 0 || self.queries == 0 || self.relevant_per_query == 0 {
            return Err(Error::input(
                "cases, queries and relevant_per_query must be positive",
            ));
        }
        if self.images_per_case == 0 {
            return Err(Error::input("images_per_case must be positive"));
        }
        if self.queries * self.relevant_per_query > self.cases {
            return Err(Error::input(format!(
                "{} queries x {} relevant need more than {} cases",
                self.queries, self.relevant_per_query, self.cases
            )));
        }
        // topic words are disjoint; keep a comfortable filler pool
        if self.queries * TOPIC_WORDS_PER_QUERY + 24 > WORDS.len() {
            return Err(Error::input(format!(
                "at most {} queries",
                (WORDS.len() - 24) / 3
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub cases_dir: PathBuf,
    pub fixtures_dir: PathBuf,
    pub dataset_path: PathBuf,
    pub dataset: EvalDataset,
}

struct Words<'a> {
    filler: Vec<&'a str>,
}

impl Words<'_> {
    fn pick(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
        (0..n)
            .map(|_| self.filler.choose(rng).expect("filler pool").to_string())
            .collect()
    }
}

fn sentence(words: &[String]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(0..1) {
        let upper = first.to_ascii_uppercase();
        s.replace_range(0..1, &upper);
    }
    s.push('.');
    s
}

fn png_bytes(rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    let img = image::RgbImage::from_fn(16, 16, |_, _| image::Rgb(rng.random::<[u8; 3]>()));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Critic reply for one asset. `topic` is `None` for distractors.
fn critique_reply(rng: &mut ChaCha8Rng, words: &Words, topic: Option<&[&str]>) -> String {
    let mut analysis = BTreeMap::new();
    let strong: BTreeSet<usize> = match topic {
        Some(_) => {
            let mut idx: Vec<usize> = (0..Aspect::CRITIQUE.len()).collect();
            idx.shuffle(rng);
            idx.into_iter().take(3).collect()
        }
        None => BTreeSet::new(),
    };
    for (i, aspect) in Aspect::CRITIQUE.iter().enumerate() {
        let mut w = words.pick(rng, 4);
        if let (Some(t), true) = (topic, strong.contains(&i)) {
            w.splice(0..0, t.iter().map(|s| s.to_string()));
        }
        analysis.insert(aspect.key(), vec![sentence(&w)]);
    }
    serde_json::json!({ "analysis": analysis }).to_string()
}

/// Writes a synthetic corpus under `out`. The same params always produce
/// byte-identical files.
pub fn generate(params: &SynthParams, out: &Path) -> Result<SynthCorpus> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut pool: Vec<&str> = WORDS.to_vec();
    pool.shuffle(&mut rng);
    let topic_len = params.queries * TOPIC_WORDS_PER_QUERY;
    let topics: Vec<Vec<&str>> = pool[..topic_len]
        .chunks(TOPIC_WORDS_PER_QUERY)
        .map(|c| c.to_vec())
        .collect();
    let words = Words {
        filler: pool[topic_len..].to_vec(),
    };

    let mut ids: Vec<u64> = (1..=params.cases as u64).collect();
    ids.shuffle(&mut rng);
    let mut topic_of: BTreeMap<u64, usize> = BTreeMap::new();
    let mut queries = Vec::new();
    for (q, topic) in topics.iter().enumerate() {
        let planted = &ids[q * params.relevant_per_query..(q + 1) * params.relevant_per_query];
        for &id in planted {
            topic_of.insert(id, q);
        }
        queries.push(EvalQuery {
            query: topic.join(" "),
            relevant: planted.iter().map(|&i| CaseId(i)).collect(),
        });
    }

    let cases_dir = out.join("cases");
    let fixtures_dir = out.join("fixtures");
    for d in [&cases_dir, &fixtures_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    for id in 1..=params.cases as u64 {
        let topic = topic_of.get(&id).map(|&q| topics[q].as_slice());
        let dir = cases_dir.join(format!("case-{id:04}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let title_words = words.pick(&mut rng, 2);
        let title = format!("{} {}", title_words[0], title_words[1]);
        let mut desc_words = words.pick(&mut rng, 10);
        if let Some(t) = topic {
            let at = rng.random_range(0..desc_words.len());
            desc_words.insert(at, t[0].to_string());
        }
        let description = format!(
            "{} {}",
            sentence(&desc_words[..5]),
            sentence(&desc_words[5..])
        );

        let mut assets = Vec::new();
        for n in 1..=params.images_per_case {
            let name = format!("img-{n}.png");
            let bytes = png_bytes(&mut rng)?;
            let mut cap = words.pick(&mut rng, 3);
            if let Some(t) = topic {
                cap.push(t.choose(&mut rng).expect("topic word").to_string());
            }
            write(&dir.join(&name), &bytes)?;
            write(&dir.join(format!("{name}{CAPTION_SUFFIX}")), cap.join(" "))?;
            write(
                &fixtures_dir.join(format!("{}.json", replay_key(&bytes))),
                critique_reply(&mut rng, &words, topic),
            )?;
            assets.push(CaseFolderAsset {
                path: name,
                asset_id: None,
                kind: Some(MediaKind::Image),
                category_hint: Some(if n == 1 { "exterior" } else { "interior" }.into()),
            });
        }
        if id % 3 == 0 {
            let mut notes = words.pick(&mut rng, 8);
            if let Some(t) = topic {
                notes.push(t[1].to_string());
            }
            let text = format!("{}\n", sentence(&notes));
            write(&dir.join("notes.txt"), &text)?;
            write(
                &fixtures_dir.join(format!("{}.json", replay_key(text.as_bytes()))),
                critique_reply(&mut rng, &words, None),
            )?;
            assets.push(CaseFolderAsset {
                path: "notes.txt".into(),
                asset_id: None,
                kind: Some(MediaKind::Text),
                category_hint: Some("notes".into()),
            });
        }
        let manifest = CaseFolderManifest {
            case_id: CaseId(id),
            title,
            description,
            assets,
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        write(&dir.join(CASE_FILE), json)?;
    }

    let dataset = EvalDataset::new(queries)?;
    let dataset_path = out.join("dataset.jsonl");
    write(&dataset_path, dataset.to_jsonl()?)?;
    Ok(SynthCorpus {
        cases_dir,
        fixtures_dir,
        dataset_path,
        dataset,
    })
}
