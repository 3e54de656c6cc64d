//! Binary user and item codes learned with a scale-invariant angular margin,
//! plus Hamming-space retrieval and ranking evaluation.
//!
//! The pipeline is: load and split interactions ([`data`]), train real
//! embeddings ([`trainer::train_siml`]), quantize and refine them into codes
//! by alternating binary quadratic subproblems ([`trainer::train_dsiml`]),
//! then rank items by Hamming distance ([`retrieval`]) and score the
//! rankings ([`eval`]).

pub mod bqp;
pub mod codes;
pub mod data;
pub mod error;
pub mod eval;
pub mod objective;
pub mod retrieval;
pub mod trainer;
pub mod varbound;

pub use codes::{BinaryCodeMatrix, CodeRow, EmbeddingMatrix};
pub use data::{InteractionSet, TripletBatch};
pub use error::{Error, Result};
pub use objective::Hyperparams;
