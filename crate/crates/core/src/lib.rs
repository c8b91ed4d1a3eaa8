//! Nested agent models, Bayesian inference over them, and rule-based
//! action selection with human oversight.
//!
//! The pieces, bottom up: [`store`] holds categorical variables per model
//! chain, [`perception`] turns raw sensor events into commits,
//! [`inference`] recomputes abstract variables, [`decision`] turns model
//! state into proposals gated by an autonomy mode, [`engine`] ties them
//! into one loop and [`harness`] replays scripted scenarios through it.

pub mod decision;
pub mod engine;
pub mod harness;
pub mod inference;
pub mod perception;
pub mod store;

pub use decision::{ActionTemplate, AutonomyMode, Condition, DecisionRule, HumanVerdict, Proposal, ProposalStatus};
pub use engine::{Declarations, Engine, EngineEvent, InferenceMethod};
pub use inference::{build_network, fit_cpt, BayesNet, Cpt, CptRow, Distribution};
pub use perception::{RawEvent, Scalar};
pub use store::{ModelChain, ModelStore, SlotKey, VariableKind, VariableSpec};
