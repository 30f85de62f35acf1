//! Vision-language critique of case media and chunking of source text.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::MediaType;
use crate::error::{Error, Result};
use crate::model::{AnalysisEntry, Aspect, CaseId, DESCRIPTION_ORIGIN};

/// The critic prompt sent with every image or text file.
pub const CRITIC_PROMPT: &str = r#"You are a wonderful architecture critic. please describe the architectural design of this image in details.

# Guide
- Cover the following aspects:
    - form
    - style
    - material usage
    - sense of feeling
    - relations to the surrounding context
    - passive design techniques
    - general design highlights
- For each aspect, cover as many components as you can.
- Write like an architecture critic.
- Your response should be in a structured json:
```json
{
  "analysis":{
    "form": [
        "<each sentence is a list item>",
    ],
    "<other aspects>": <return an empty list if not applicable>
  }
}
```"#;

/// Upper bound on a description chunk, in characters.
pub const CHUNK_MAX_CHARS: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CritiquePrompt {
    pub template: String,
    pub aspect_keys: Vec<&'static str>,
}

impl Default for CritiquePrompt {
    fn default() -> Self {
        CritiquePrompt {
            template: CRITIC_PROMPT.to_string(),
            aspect_keys: Aspect::CRITIQUE
                .iter()
                .filter_map(|a| a.prompt_label())
                .collect(),
        }
    }
}

impl CritiquePrompt {
    pub fn validate(&self) -> Result<()> {
        for key in &self.aspect_keys {
            if !self.template.contains(key) {
                return Err(Error::Config(format!(
                    "critic prompt does not mention {key:?}"
                )));
            }
        }
        if !self.template.contains("```json") || !self.template.contains("\"analysis\"") {
            return Err(Error::Config(
                "critic prompt lacks the JSON schema block".into(),
            ));
        }
        Ok(())
    }

    /// Prompt text for one asset, with an optional case-context trailer.
    pub fn render(&self, case_context: Option<&str>) -> String {
        match case_context.filter(|c| !c.trim().is_empty()) {
            Some(ctx) => format!("{}\n\nContext: {}", self.template, ctx.trim()),
            None => self.template.clone(),
        }
    }
}

/// What is shown to the vision model alongside the prompt.
#[derive(Debug, Clone, Copy)]
pub enum MediaPayload<'a> {
    Image {
        bytes: &'a [u8],
        media_type: MediaType,
    },
    Text(&'a str),
}

impl MediaPayload<'_> {
    pub fn bytes(&self) -> &[u8] {
        match self {
            MediaPayload::Image { bytes, .. } => bytes,
            MediaPayload::Text(t) => t.as_bytes(),
        }
    }
}

/// Replay fixtures are keyed by the SHA-256 (lowercase hex) of the payload bytes.
pub fn replay_key(payload_bytes: &[u8]) -> String {
    let digest = Sha256::digest(payload_bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub trait VisionModel: Send + Sync {
    fn describe(&self) -> String;
    /// Returns the model's raw reply text.
    fn complete(&self, prompt: &str, media: &MediaPayload<'_>) -> Result<String>;
}

/// Serves canned replies from `<dir>/<sha256>.json`.
#[derive(Debug, Clone)]
pub struct ReplayVlm {
    dir: PathBuf,
}

impl ReplayVlm {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayVlm { dir: dir.into() }
    }

    pub fn fixture_path(&self, payload_bytes: &[u8]) -> PathBuf {
        self.dir.join(format!("{}.json", replay_key(payload_bytes)))
    }
}

impl VisionModel for ReplayVlm {
    fn describe(&self) -> String {
        format!("replay:{}", self.dir.display())
    }

    fn complete(&self, _prompt: &str, media: &MediaPayload<'_>) -> Result<String> {
        let path = self.fixture_path(media.bytes());
        std::fs::read_to_string(&path).map_err(|e| Error::Transport {
            provider: self.describe(),
            message: format!("no replay fixture {}: {e}", path.display()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlmKind {
    Replay,
    RemoteHttp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VlmConfig {
    pub kind: VlmKind,
    #[serde(default)]
    pub fixtures_dir: Option<PathBuf>,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub model_name: String,
    #[serde(default)]
    pub api_key_env_var: String,
    #[serde(default = "default_vlm_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_vlm_retries")]
    pub max_retries: u32,
    #[serde(default = "default_reply_pointer")]
    pub reply_pointer: String,
}

fn default_vlm_timeout_ms() -> u64 {
    120_000
}

fn default_vlm_retries() -> u32 {
    2
}

fn default_reply_pointer() -> String {
    "/choices/0/message/content".into()
}

impl VlmConfig {
    pub fn replay(dir: impl Into<PathBuf>) -> Self {
        VlmConfig {
            kind: VlmKind::Replay,
            fixtures_dir: Some(dir.into()),
            endpoint_url: None,
            model_name: String::new(),
            api_key_env_var: String::new(),
            timeout_ms: default_vlm_timeout_ms(),
            max_retries: default_vlm_retries(),
            reply_pointer: default_reply_pointer(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn VisionModel>> {
        match self.kind {
            VlmKind::Replay => {
                let dir = self
                    .fixtures_dir
                    .clone()
                    .ok_or_else(|| Error::Config("replay VLM requires fixtures_dir".into()))?;
                Ok(Box::new(ReplayVlm::new(dir)))
            }
            VlmKind::RemoteHttp => Ok(Box::new(HttpVlm::new(self.clone())?)),
        }
    }
}

/// Chat-completions style endpoint: the prompt and a base64 data URL go in one
/// user message; the reply text is read from `reply_pointer`.
pub struct HttpVlm {
    config: VlmConfig,
    client: reqwest::blocking::Client,
}

impl HttpVlm {
    pub fn new(config: VlmConfig) -> Result<Self> {
        if config.endpoint_url.as_deref().is_none_or(str::is_empty) {
            return Err(Error::Config(
                "remote_http VLM requires endpoint_url".into(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpVlm { config, client })
    }

    pub fn request_body(&self, prompt: &str, media: &MediaPayload<'_>) -> serde_json::Value {
        let content = match media {
            MediaPayload::Image { bytes, media_type } => serde_json::json!([
                { "type": "text", "text": prompt },
                { "type": "image_url", "image_url": {
                    "url": format!("data:{};base64,{}", media_type.mime(), B64.encode(bytes))
                } }
            ]),
            MediaPayload::Text(text) => serde_json::json!([
                { "type": "text", "text": format!("{prompt}\n\n{text}") }
            ]),
        };
        serde_json::json!({
            "model": self.config.model_name,
            "messages": [{ "role": "user", "content": content }],
        })
    }

    fn once(&self, body: &serde_json::Value) -> Result<String> {
        let transport = |message: String| Error::Transport {
            provider: self.describe(),
            message,
        };
        let mut req = self
            .client
            .post(self.config.endpoint_url.as_deref().unwrap_or_default())
            .json(body);
        if !self.config.api_key_env_var.is_empty() {
            let key = std::env::var(&self.config.api_key_env_var).map_err(|_| {
                Error::Config(format!(
                    "environment variable {} is not set",
                    self.config.api_key_env_var
                ))
            })?;
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| transport(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(transport(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(Error::Config(format!(
                "VLM rejected request with status {status}"
            )));
        }
        let value: serde_json::Value = resp.json().map_err(|e| transport(e.to_string()))?;
        value
            .pointer(&self.config.reply_pointer)
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .ok_or_else(|| {
                Error::Config(format!(
                    "VLM reply has no text at {}",
                    self.config.reply_pointer
                ))
            })
    }
}

impl VisionModel for HttpVlm {
    fn describe(&self) -> String {
        format!("vlm:{}", self.config.model_name)
    }

    fn complete(&self, prompt: &str, media: &MediaPayload<'_>) -> Result<String> {
        let body = self.request_body(prompt, media);
        let mut attempt = 0;
        loop {
            match self.once(&body) {
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    attempt += 1;
                    log::warn!("{} attempt {attempt} failed: {e}", self.describe());
                    std::thread::sleep(Duration::from_millis(200 * u64::from(attempt)));
                }
                other => return other,
            }
        }
    }
}

/// Parsed critique: sentences per aspect, in aspect order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueResponse {
    pub aspects: BTreeMap<Aspect, Vec<String>>,
}

impl CritiqueResponse {
    pub fn sentences(&self, aspect: Aspect) -> &[String] {
        self.aspects.get(&aspect).map_or(&[], Vec::as_slice)
    }

    /// Aspects that carry at least one sentence.
    pub fn non_empty_aspects(&self) -> impl Iterator<Item = Aspect> + '_ {
        self.aspects
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(a, _)| *a)
    }

    pub fn is_empty(&self) -> bool {
        self.aspects.values().all(Vec::is_empty)
    }

    pub fn total_sentences(&self) -> usize {
        self.aspects.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCritique {
    pub response: CritiqueResponse,
    /// Dropped keys and skipped values.
    pub warnings: Vec<String>,
}

fn strip_code_fences(raw: &str) -> Option<&str> {
    let start = raw.find("```")?;
    let after = &raw[start + 3..];
    let body_start = after.find('\n').map_or(0, |i| i + 1);
    let body = &after[body_start..];
    let end = body.rfind("```")?;
    Some(&body[..end])
}

fn outermost_braces(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

/// Parses a critic reply. Repair ladder: as-is, then with markdown code
/// fences stripped, then trimmed to the outermost braces. Both the wrapped
/// `{"analysis": {...}}` form and a bare aspect map are accepted.
pub fn parse_critique(raw: &str) -> std::result::Result<ParsedCritique, String> {
    let attempts = [
        Some(raw),
        strip_code_fences(raw),
        outermost_braces(strip_code_fences(raw).unwrap_or(raw)),
    ];
    let mut last_err = String::from("empty reply");
    for candidate in attempts.into_iter().flatten() {
        match serde_json::from_str::<serde_json::Value>(candidate.trim()) {
            Ok(v) => return interpret(&v),
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(format!("reply is not JSON after repair: {last_err}"))
}

fn interpret(value: &serde_json::Value) -> std::result::Result<ParsedCritique, String> {
    let obj = value.as_object().ok_or("reply JSON is not an object")?;
    let map = match obj.get("analysis") {
        Some(inner) => inner.as_object().ok_or("\"analysis\" is not an object")?,
        None => obj,
    };
    let mut response = CritiqueResponse::default();
    let mut warnings = Vec::new();
    for (key, v) in map {
        let Some(aspect) = Aspect::parse(key).filter(|a| a.is_critique()) else {
            warnings.push(format!("dropped unknown aspect {key:?}"));
            continue;
        };
        let sentences: Vec<String> = match v {
            serde_json::Value::Null => Vec::new(),
            serde_json::Value::String(s) => vec![s.clone()],
            serde_json::Value::Array(items) => items
                .iter()
                .filter_map(|item| match item {
                    serde_json::Value::String(s) => Some(s.clone()),
                    other => {
                        warnings.push(format!("{key}: skipped non-string item {other}"));
                        None
                    }
                })
                .collect(),
            other => {
                warnings.push(format!("{key}: skipped value {other}"));
                Vec::new()
            }
        };
        let slot = response.aspects.entry(aspect).or_default();
        slot.extend(
            sentences
                .into_iter()
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty()),
        );
    }
    Ok(ParsedCritique { response, warnings })
}

/// Runs the critic on one asset and parses the reply.
pub fn critique_media(
    vlm: &dyn VisionModel,
    prompt: &CritiquePrompt,
    asset_id: &str,
    media: &MediaPayload<'_>,
    case_context: Option<&str>,
) -> Result<ParsedCritique> {
    let reply = vlm.complete(&prompt.render(case_context), media)?;
    let parsed = parse_critique(&reply).map_err(|message| Error::Augmentation {
        asset: asset_id.to_string(),
        message,
    })?;
    for w in &parsed.warnings {
        log::warn!("critique of {asset_id}: {w}");
    }
    Ok(parsed)
}

/// One entry per distinct sentence, aspect-tagged, embeddings unset.
pub fn response_to_entries(
    resp: &CritiqueResponse,
    case_id: CaseId,
    origin: &str,
) -> Vec<AnalysisEntry> {
    let mut out = Vec::new();
    for (aspect, sentences) in &resp.aspects {
        let mut seen = BTreeSet::new();
        for s in sentences {
            let s = s.trim();
            if s.is_empty() || !seen.insert(s) {
                continue;
            }
            out.push(AnalysisEntry {
                entry_id: format!("{case_id}:{origin}:{}:{}", aspect.key(), seen.len() - 1),
                case_id,
                aspect: *aspect,
                text: s.to_string(),
                origin: origin.to_string(),
                text_embedding: None,
                crossmodal_embedding: None,
            });
        }
    }
    out
}

/// Entries for the chunks of a piece of source text.
pub fn chunk_entries(
    text: &str,
    max_chars: usize,
    case_id: CaseId,
    origin: &str,
) -> Vec<AnalysisEntry> {
    chunk_with_budget(text, max_chars)
        .into_iter()
        .enumerate()
        .map(|(i, chunk)| AnalysisEntry {
            entry_id: if origin == DESCRIPTION_ORIGIN {
                format!("{case_id}:{origin}:{i}")
            } else {
                format!("{case_id}:{origin}:chunk:{i}")
            },
            case_id,
            aspect: Aspect::OriginalText,
            text: chunk,
            origin: origin.to_string(),
            text_embedding: None,
            crossmodal_embedding: None,
        })
        .collect()
}

const CLOSERS: &[char] = &['"', '\'', ')', ']', '\u{201d}', '\u{2019}'];

/// Byte spans of sentences, each trimmed of surrounding whitespace.
fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len()
                && (CLOSERS.contains(&chars[j].1) || matches!(chars[j].1, '.' | '!' | '?'))
            {
                j += 1;
            }
            if j == chars.len() || chars[j].1.is_whitespace() {
                let end = chars.get(j).map_or(text.len(), |&(b, _)| b);
                push_trimmed(text, start, end, &mut spans);
                start = end;
                i = j;
                continue;
            }
        } else if c == '\n' {
            // blank line ends a sentence
            let mut j = i + 1;
            while j < chars.len() && chars[j].1 != '\n' && chars[j].1.is_whitespace() {
                j += 1;
            }
            if j < chars.len() && chars[j].1 == '\n' {
                let end = chars[i].0;
                push_trimmed(text, start, end, &mut spans);
                start = end;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    push_trimmed(text, start, text.len(), &mut spans);
    spans
}

fn push_trimmed(text: &str, start: usize, end: usize, spans: &mut Vec<(usize, usize)>) {
    let piece = &text[start..end];
    let lead = piece.len() - piece.trim_start().len();
    let trimmed = piece.trim();
    if !trimmed.is_empty() {
        let s = start + lead;
        spans.push((s, s + trimmed.len()));
    }
}

/// Splits on sentence boundaries and greedily packs consecutive sentences
/// into chunks of at most [`CHUNK_MAX_CHARS`] characters. A sentence longer
/// than the budget becomes its own chunk. Chunks are verbatim slices of the
/// input, so joining them with the whitespace between reproduces it.
pub fn chunk_description(text: &str) -> Vec<String> {
    chunk_with_budget(text, CHUNK_MAX_CHARS)
}

pub fn chunk_with_budget(text: &str, max_chars: usize) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for (s, e) in sentence_spans(text) {
        current = match current {
            None => Some((s, e)),
            Some((cs, _)) if text[cs..e].chars().count() <= max_chars => Some((cs, e)),
            Some((cs, ce)) => {
                chunks.push(text[cs..ce].to_string());
                Some((s, e))
            }
        };
    }
    if let Some((cs, ce)) = current {
        chunks.push(text[cs..ce].to_string());
    }
    chunks
}

/// Reads a text asset, rejecting non-UTF-8 content.
pub fn read_text_asset(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes)
        .map_err(|_| Error::input(format!("{} is not UTF-8 text", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FIG3_REPLY: &str = r#"{
    "form": [
      "The space is defined by clean, rectilinear forms creating a minimalist courtyard.",
      "A large sculpture commands the center, providing a focal point that contrasts with the linearity of the surroundings."
    ],
    "relations to the surrounding context": [
      "The courtyard appears well integrated with greenery that softens its edges, offering a connection to nature.",
      "The design seems adaptable, likely accommodating various urban or suburban contexts."
    ],
    "general design highlights": [
      "A prominent sculpture acts as a centerpiece, making the space not only a physical but also a cultural destination.",
      "The minimalist and industrial aesthetic is bold yet understated, allowing for multifaceted interactions."
    ]
}"#;

    struct Canned(String);

    impl VisionModel for Canned {
        fn describe(&self) -> String {
            "canned".into()
        }
        fn complete(&self, prompt: &str, _: &MediaPayload<'_>) -> Result<String> {
            assert!(prompt.starts_with("You are a wonderful architecture critic."));
            Ok(self.0.clone())
        }
    }

    fn png() -> Vec<u8> {
        b"\x89PNG\r\n\x1a\nfixture".to_vec()
    }

    #[test]
    fn prompt_lists_all_seven_aspects() {
        let p = CritiquePrompt::default();
        p.validate().unwrap();
        assert_eq!(p.aspect_keys.len(), 7);
        let mut broken = p.clone();
        broken.template = broken.template.replace("passive design techniques", "");
        assert!(broken.validate().is_err());
    }

    #[test]
    fn parses_the_reference_reply() {
        let bytes = png();
        let media = MediaPayload::Image {
            bytes: &bytes,
            media_type: MediaType::Png,
        };
        let parsed = critique_media(
            &Canned(FIG3_REPLY.into()),
            &CritiquePrompt::default(),
            "img1",
            &media,
            Some("Courtyard gallery"),
        )
        .unwrap();
        let r = &parsed.response;
        assert_eq!(
            r.sentences(Aspect::Form)[0],
            "The space is defined by clean, rectilinear forms creating a minimalist courtyard."
        );
        assert_eq!(r.sentences(Aspect::ContextRelations).len(), 2);
        assert_eq!(r.sentences(Aspect::GeneralHighlights).len(), 2);
        assert!(r.sentences(Aspect::Style).is_empty());
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn empty_aspect_list_yields_no_entries() {
        let raw = r#"{"analysis": {"form": ["Stacked boxes."], "style": [], "passive design techniques": []}}"#;
        let parsed = parse_critique(raw).unwrap();
        assert!(parsed.response.sentences(Aspect::Style).is_empty());
        let entries = response_to_entries(&parsed.response, CaseId(1), "img");
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].aspect, Aspect::Form);
    }

    #[test]
    fn fenced_reply_is_repaired() {
        let raw = format!("Here is my critique:\n```json\n{FIG3_REPLY}\n```\nHope this helps.");
        assert!(serde_json::from_str::<serde_json::Value>(&raw).is_err());
        let parsed = parse_critique(&raw).unwrap();
        assert_eq!(parsed.response.total_sentences(), 6);
    }

    #[test]
    fn brace_trim_is_the_last_repair_step() {
        let raw = format!("Sure! {FIG3_REPLY} -- end");
        assert_eq!(parse_critique(&raw).unwrap().response.total_sentences(), 6);
        assert!(parse_critique("no json here").is_err());
        assert!(parse_critique("```json\n{ broken\n```").is_err());
    }

    #[test]
    fn unknown_aspects_are_dropped_with_a_warning() {
        let raw = r#"{"analysis": {"form": ["A."], "lighting": ["B."], "original_text": ["C."]}}"#;
        let parsed = parse_critique(raw).unwrap();
        assert_eq!(parsed.response.total_sentences(), 1);
        assert_eq!(parsed.warnings.len(), 2);
        assert!(parsed.response.aspects.keys().all(|a| a.is_critique()));
    }

    #[test]
    fn unparseable_reply_is_an_augmentation_error() {
        let media = MediaPayload::Text("some text");
        let err = critique_media(
            &Canned("I cannot help with that".into()),
            &CritiquePrompt::default(),
            "notes",
            &media,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Augmentation { ref asset, .. } if asset == "notes"));
    }

    #[test]
    fn entries_count_and_dedup() {
        let mut resp = CritiqueResponse::default();
        resp.aspects
            .insert(Aspect::Form, vec!["F1.".into(), "F2.".into()]);
        resp.aspects
            .insert(Aspect::ContextRelations, vec!["C1.".into(), "C2.".into()]);
        let entries = response_to_entries(&resp, CaseId(3), "img");
        assert_eq!(entries.len(), 4);
        assert!(entries
            .iter()
            .all(|e| e.case_id == CaseId(3) && e.origin == "img"));
        assert!(entries.iter().all(|e| e.text_embedding.is_none()));

        assert!(response_to_entries(&CritiqueResponse::default(), CaseId(3), "img").is_empty());

        let mut dup = CritiqueResponse::default();
        dup.aspects.insert(
            Aspect::Style,
            vec!["Brutalist.".into(), " Brutalist. ".into()],
        );
        dup.aspects.insert(Aspect::Form, vec!["Brutalist.".into()]);
        let entries = response_to_entries(&dup, CaseId(3), "img");
        assert_eq!(entries.len(), 2, "dedup is per aspect");
        let ids: BTreeSet<_> = entries.iter().map(|e| e.entry_id.clone()).collect();
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn replay_reads_fixture_by_payload_hash() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = png();
        std::fs::write(
            dir.path().join(format!("{}.json", replay_key(&bytes))),
            FIG3_REPLY,
        )
        .unwrap();
        let vlm = ReplayVlm::new(dir.path());
        let media = MediaPayload::Image {
            bytes: &bytes,
            media_type: MediaType::Png,
        };
        assert_eq!(vlm.complete("p", &media).unwrap(), FIG3_REPLY);
        let other = MediaPayload::Text("missing");
        assert!(vlm.complete("p", &other).unwrap_err().is_retryable());
        assert_eq!(
            replay_key(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn http_request_body_embeds_a_data_url() {
        let mut cfg = VlmConfig::replay("unused");
        cfg.kind = VlmKind::RemoteHttp;
        cfg.endpoint_url = Some("http://localhost:9/v1/chat/completions".into());
        cfg.model_name = "vlm-test".into();
        let vlm = HttpVlm::new(cfg).unwrap();
        let bytes = png();
        let body = vlm.request_body(
            "PROMPT",
            &MediaPayload::Image {
                bytes: &bytes,
                media_type: MediaType::Png,
            },
        );
        assert_eq!(body["model"], "vlm-test");
        let url = body["messages"][0]["content"][1]["image_url"]["url"]
            .as_str()
            .unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
        assert_eq!(body["messages"][0]["content"][0]["text"], "PROMPT");
    }

    #[test]
    fn chunking_examples() {
        assert!(chunk_description("").is_empty());
        assert!(chunk_description("   \n ").is_empty());

        let one = format!("{}.", "a".repeat(79));
        assert_eq!(one.len(), 80);
        assert_eq!(chunk_description(&one), vec![one.clone()]);

        let s = |c: char| format!("{}.", c.to_string().repeat(299));
        let (s1, s2, s3) = (s('x'), s('y'), s('z'));
        let text = format!("{s1} {s2} {s3}");
        assert_eq!(chunk_description(&text), vec![s1, s2, s3]);
    }

    #[test]
    fn chunking_packs_greedily() {
        let short = "Short one.";
        let text = [short; 5].join(" ");
        assert_eq!(
            chunk_with_budget(&text, 21),
            vec![
                "Short one. Short one.".to_string(),
                "Short one. Short one.".to_string(),
                "Short one.".to_string(),
            ]
        );
    }

    #[test]
    fn sentence_boundaries() {
        let text = "It rises (boldly.) Then falls! Does it? Yes... \"Quite.\" Version 2.0 ships\n\nNew para";
        let spans: Vec<&str> = sentence_spans(text)
            .iter()
            .map(|&(s, e)| &text[s..e])
            .collect();
        assert_eq!(
            spans,
            vec![
                "It rises (boldly.)",
                "Then falls!",
                "Does it?",
                "Yes...",
                "\"Quite.\"",
                "Version 2.0 ships",
                "New para"
            ]
        );
    }

    fn strip_ws(s: &str) -> String {
        s.chars().filter(|c| !c.is_whitespace()).collect()
    }

    proptest! {
        #[test]
        fn chunks_reassemble_and_respect_budget(
            sentences in prop::collection::vec("[a-zA-Z ,]{0,700}[.!?]", 0..12),
            seps in prop::collection::vec("[ \n\t]{1,3}", 12),
        ) {
            let mut text = String::new();
            for (s, sep) in sentences.iter().zip(&seps) {
                text.push_str(s);
                text.push_str(sep);
            }
            let chunks = chunk_description(&text);
            prop_assert_eq!(strip_ws(&chunks.concat()), strip_ws(&text));
            if !text.trim().is_empty() {
                prop_assert!(!chunks.is_empty());
            }
            let spans = sentence_spans(&text);
            for c in &chunks {
                prop_assert!(!c.trim().is_empty());
                if c.chars().count() > CHUNK_MAX_CHARS {
                    // only a lone oversize sentence may exceed the budget
                    prop_assert!(spans.iter().any(|&(s, e)| &text[s..e] == c.as_str()));
                }
            }
            // each chunk starts and ends on a sentence boundary, so no word is split
            for c in &chunks {
                prop_assert!(spans.iter().any(|&(s, _)| text[s..].starts_with(c.as_str())));
            }
        }

        #[test]
        fn entry_count_equals_distinct_sentences(
            raw in prop::collection::btree_map(0usize..7, prop::collection::vec("[a-c]{1,2}", 0..6), 0..7)
        ) {
            let mut resp = CritiqueResponse::default();
            let mut expected = 0;
            for (i, sentences) in raw {
                expected += sentences.iter().collect::<BTreeSet<_>>().len();
                resp.aspects.insert(Aspect::CRITIQUE[i], sentences);
            }
            prop_assert_eq!(response_to_entries(&resp, CaseId(1), "a").len(), expected);
        }
    }
}
