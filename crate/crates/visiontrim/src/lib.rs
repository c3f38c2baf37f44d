//! Training-free visual token compression for multimodal LLM inference.
//!
//! The library operates on serialized token-feature and attention tensors
//! rather than a live model: upstream harnesses dump \[CLS\] attention, token
//! features, text features, or decoder hidden states, and this crate scores,
//! selects, clusters, and merges visual tokens deterministically. It also
//! ships analytical FLOPs and KV-cache cost models and a CLI over the VTTF
//! tensor format.
//!
//! The guide under `book/` walks through each stage; its code snippets are
//! compiled as doc-tests so they cannot drift from the API.

pub mod cli;
pub mod dvts;
pub mod efficiency;
mod error;
pub mod llm_stage;
pub mod oracle;
pub mod pipeline;
pub mod tensor;
pub mod tgvc;

pub use error::{Error, Result};

// Compile the guide's code blocks as doc-tests (`cargo test --doc`).
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensor-format.md")]
    mod tensor_format {}
    #[doc = include_str!("../../../book/src/dominant-selection.md")]
    mod dominant_selection {}
    #[doc = include_str!("../../../book/src/text-complement.md")]
    mod text_complement {}
    #[doc = include_str!("../../../book/src/decode-stage.md")]
    mod decode_stage {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
