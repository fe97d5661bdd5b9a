//! Synthesis of numerical PDE solvers from language-model candidates.

pub mod analysis;
pub mod desk;
pub mod desk_guest;
pub mod digest;
pub mod domain;
pub mod genesis;
pub mod harness;
pub mod llm;
pub mod metrics;
pub mod patch;
pub mod pipeline;
pub mod prompts;
pub mod reference;
pub mod report;
pub mod sampling;
pub mod spectral;
pub mod tensor;
pub mod tournament;
