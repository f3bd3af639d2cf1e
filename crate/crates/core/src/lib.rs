//! Test-time search over autoregressive frame generation.
//!
//! Two search strategies share one synthetic sandbox: best-of-N sampling
//! ([`search::random_linear_search`]) and a level-synchronous tree search
//! over frames ([`search::tof_search`]) that branches early, scores each
//! partial video with a multi-verifier rank aggregate, and prunes the
//! frontier geometrically. [`analysis`] holds the exhaustive oracle, cost
//! predictions and scaling fits; [`protocol`] attaches external workers.

pub mod analysis;
pub mod generator;
pub mod manifest;
pub mod model;
pub mod protocol;
pub mod search;
pub mod seed;
pub mod verifier;

pub use generator::{Generator, SyntheticGenerator, SyntheticLandscape};
pub use model::{
    Algorithm, CandidateNode, LatentRef, NodeId, PruneRule, RunConfig, Schedule, SearchPath, Stage, StagedPrompts,
    TextPrompt,
};
pub use search::{run_search, Backends, SearchError, SearchOptions, SearchResult};
pub use verifier::{Verifier, VerifierEnsemble};
