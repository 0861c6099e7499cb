//! Pre-consultation questionnaires from electronic medical records.
//!
//! Records are broken into atomic assertions, linked into per-record causal
//! networks, clustered per disease into weighted knowledge, and finally turned
//! into personal or disease questionnaires.

pub mod clustering;
pub mod evaluation;
pub mod extraction;
pub mod lenient;
pub mod model;
pub mod network;
pub mod pipeline;
pub mod prompt;
pub mod providers;
pub mod questionnaire;
pub mod similarity;
pub mod stage;

pub use clustering::{build_disease_knowledge, cluster_networks, ClusterError, DEFAULT_CUTOFF};
pub use extraction::{extract_assertions, ExtractionError};
pub use model::*;
pub use network::{build_personal_network, NetworkError};
pub use questionnaire::{generate_disease, generate_personal, QuestionnaireError};
pub use similarity::{network_similarity, similarity_matrix, EmbedOptions, SimilarityError};
pub use stage::GenerationSettings;
