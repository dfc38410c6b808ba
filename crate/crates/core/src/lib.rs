//! Desk-scale building blocks for domain-adapted dense retrieval.
//!
//! The crate covers the whole path from raw text to a retrieval report:
//!
//! * [`tokenizer`]: byte-level BPE training, encoding, and vocabulary analytics.
//! * [`encoder`]: a small transformer encoder on top of the [`autograd`] tape,
//!   with mean / CLS pooling, an MLM head, and a binary checkpoint format.
//! * [`objectives`]: temperature-scaled cosine similarity, bidirectional
//!   InfoNCE, similarity-distribution distillation, self-attention relation
//!   distillation, and masked-token cross entropy.
//! * [`training`]: proportional source sampling, MLM masking, Adam, and the
//!   stage-wise embedder and one-stage distillation loops.
//! * [`retrieval`]: exact cosine top-k search, Recall@k, nDCG@k, timing, and
//!   BEIR-layout file IO.
//! * [`evalkit`]: IOB entity F1, extractive QA F1, Pearson, accuracy, and
//!   micro/macro aggregation.
//!
//! A longer narrative walk-through lives in the `book/` directory of the
//! repository; its code listings are compiled and run as doctests.

pub mod autograd;
pub mod container;
pub mod encoder;
pub mod evalkit;
pub mod objectives;
pub mod params;
pub mod retrieval;
pub mod tensor;
pub mod tokenizer;
pub mod toy;
pub mod training;

pub use autograd::{Graph, Var};
pub use params::ParameterSet;
pub use tensor::Tensor;

/// The chapters of the guide in `book/`, compiled so that their listings run
/// as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    pub mod tokenizer {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    pub mod encoder {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    pub mod objectives {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    pub mod retrieval {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    pub mod configuration {}
    #[doc = include_str!("../../../book/src/verification.md")]
    pub mod verification {}
}
