//! Semantic-aware implicit image representations for masked-image
//! inpainting: a continuous-coordinate model that completes low-resolution
//! semantic features inside holes and decodes colors at any output size,
//! with a full training, evaluation, and probing harness around it.
//!
//! Start with [`config::RunConfig`] and [`train::run_training`], or see the
//! guide under `book/` (its snippets compile as doc-tests of this crate).

pub mod appearance;
pub mod cli;
pub mod clip;
pub mod config;
pub mod coord;
pub mod data;
pub mod error;
pub mod eval;
pub mod lpips;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod semantic;
pub mod train;

pub use error::{Result, SairError};

// Compile every guide chapter's code blocks as doc-tests, so the book and
// the library cannot drift apart.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(representation, "../../../book/src/representation.md");
    chapter!(completion, "../../../book/src/completion.md");
    chapter!(appearance, "../../../book/src/appearance.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(cli, "../../../book/src/cli.md");
}
