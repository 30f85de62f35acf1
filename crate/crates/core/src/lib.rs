//! Multimodal retrieval over architectural design cases.
//!
//! Cases are ingested from folders of images and text, critiqued by a vision
//! model into per-aspect sentences, and embedded in a text space and a
//! cross-modal space. Text queries fuse a text-analysis ranking with an
//! image ranking by reciprocal rank; image queries are critiqued first and
//! scored per aspect under user weights.

pub mod augment;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod index;
pub mod model;
pub mod retrieval;
pub mod session;
pub mod synth;

pub use augment::{CritiqueResponse, ReplayVlm, VisionModel, VlmConfig};
pub use embedding::{EmbeddingGateway, EmbeddingProviderConfig, ProviderInfo};
pub use error::{Error, Result};
pub use eval::{EvalDataset, EvalReport, SystemVariant};
pub use index::{CaseDatabase, IngestOptions, IngestReport, Manifest};
pub use model::{AnalysisEntry, Aspect, CaseId, DesignCase, EmbeddingVector, Space};
pub use retrieval::{
    AspectCache, AspectWeights, EngineConfig, FusionParams, RankedResult, RankedRow,
    RetrievalEngine,
};
pub use session::{LikeOutcome, Origin, Session, SessionSnapshot};
