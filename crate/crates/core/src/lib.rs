//! Instrumented GPT-2 inference for studying in-context learning with
//! placeholder labels: per-head tracing, vocabulary projection, head
//! attribution, and two bias fixes (minority-label amplification and
//! positional-term removal).

pub mod attribution;
pub mod cli;
pub mod error;
pub mod icl;
pub mod interventions;
pub mod kernels;
pub mod lens;
pub mod model;
pub mod report;
pub mod safetensors;
pub mod tokenizer;
pub mod trace;

pub use attribution::{HeadRanking, InContextHeads};
pub use error::{Error, Result};
pub use icl::{Label, PromptBuilder, PromptInstance};
pub use interventions::{build_plan, InterventionPlan, PlanSpec};
pub use kernels::Tensor;
pub use lens::{Lens, VocabProjection};
pub use model::{HeadId, Model, ModelConfig};
pub use tokenizer::Tokenizer;
pub use trace::{Trace, TraceConfig};
