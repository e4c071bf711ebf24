//! Streaming speech generation alongside a text LLM: the read/write
//! interleaving schedule, gated fusion of hidden states and text
//! embeddings, FSQ speech tokens, a toy streaming speech-token predictor,
//! pipeline latency modelling, evaluation metrics and dialogue data
//! synthesis.

pub mod cli;
pub mod datagen;
pub mod evalkit;
pub mod fsq;
pub mod numerics;
pub mod pipeline;
pub mod records;
pub mod schedule;
pub mod ttslm;

// The guide's code blocks run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    mod schedule {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/fsq.md")]
    mod fsq {}
    #[doc = include_str!("../../../book/src/ttslm.md")]
    mod ttslm {}
    #[doc = include_str!("../../../book/src/latency.md")]
    mod latency {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/datagen.md")]
    mod datagen {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
