//! Question answering over temporal knowledge graphs.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - [`kg`]: the temporal KG data model — interval-annotated quadruples,
//!   TSV ingestion, and interval-to-point expansion.
//! - [`embed`]: complex-valued 4-way tensor factorization of point quads
//!   with a negative-sampling loss, plus an auxiliary time-order
//!   classification task over sinusoidally initialized timestamp embeddings.
//! - [`question`]: question decomposition into entity slots and an
//!   entity-independent template, and a trainable template encoder that
//!   projects the pooled question vector to relation/time embeddings in
//!   complex space.
//! - [`neighbor`]: m-hop neighbor-graph extraction around question entities,
//!   defining the candidate answer spaces.
//! - [`qa`]: time estimation, timestamp/entity scoring, the unified
//!   candidate softmax, and the answer cross-entropy loss.
//! - [`contrastive`]: temporal-antonym question generation and the
//!   contrastive order/answer losses.
//! - [`benchmark`]: a synthetic generator with a brute-force answer oracle,
//!   Hits@k evaluation, and the ablation harness.
//! - [`pipeline`]: the two-stage trainer (KG embeddings, then QA heads) and
//!   checkpoint (de)serialization.
//!
//! Commonly used types are re-exported at the crate root.

pub mod benchmark;
pub(crate) mod binio;
pub mod complex;
pub mod config;
pub mod contrastive;
pub mod embed;
pub mod kg;
pub mod linalg;
pub mod neighbor;
pub mod pipeline;
pub mod qa;
pub mod question;

pub use benchmark::{BenchSpec, EvalReport, GeneratedQuestions};
pub use complex::CVec;
pub use config::RunConfig;
pub use contrastive::{ContrastHeads, ContrastLexicon, ContrastivePair};
pub use embed::{ComplexEmbeddingStore, KGTrainConfig, KgEmbeddingModel, TimeOrderHead};
pub use kg::{EntityId, IntervalQuad, PointQuad, RelationId, TemporalKG, TimeRank, Timestamp};
pub use neighbor::CandidateSet;
pub use pipeline::{QaModel, TrainedModel};
pub use qa::{QaHeads, ScoredCandidates, TimeEstimate};
pub use question::{AnswerType, EncoderParams, QuestionCategory, QuestionEncoding, QuestionRecord};
