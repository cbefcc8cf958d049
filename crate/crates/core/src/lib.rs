//! Narrative orientation transfer between individualistic and collectivistic framings.
//!
//! Stories are split into chunks and diagnosed with a 40-question survey. An annotated
//! logic program learned from a labeled corpus then scores how closely a story matches
//! the target orientation. Abduction selects the chunks and features whose rewriting
//! raises that score most, and an LLM rewrites only those chunks.

pub mod abduction;
pub mod corpus;
pub mod diagnosis;
pub mod error;
pub mod evaluation;
pub mod gateway;
pub mod logic;
pub mod narrative;
pub mod rules;
pub mod transform;

pub use error::{Error, Result};
pub use narrative::{Direction, FeatureId, Narrative};
