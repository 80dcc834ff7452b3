//! Occlusion-aware, patch-based detector for synthesized face images.
//!
//! The library decomposes a face into semantic or block patches, zeroes
//! occluded pixels, extracts texture features with a Gram-augmented CNN,
//! and fuses three decision paths (whole face, concatenated patch
//! features, per-patch vote) with a two-of-three majority.
//!
//! Entry points:
//! - [`facepatch`]: canonical resize, patch extraction, occlusion masks
//! - [`gramnet`]: the Gram-block CNN, its heads, and checkpointing
//! - [`fusion`]: weighted voting, three-path fusion, the full pipeline
//! - [`trainer`]: SGD training loops for the three paths
//! - [`metrics`]: confusion matrices, macro scores, occlusion ratios
//! - [`datasets`]: manifest IO and the synthetic face generator
//! - [`plot`]: small PNG charts for reports

pub mod datasets;
pub mod error;
pub mod facepatch;
pub mod fusion;
pub mod gramnet;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{BinaryLabel, PatchKey, PatchMode, PatchName, Split};

// Weight initialization takes this exact RNG type; re-export it so
// callers don't need to pin matching rand/rand_chacha versions.
pub use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// The guide in `book/` doubles as a test suite: every Rust snippet in
/// its chapters compiles and runs against the current library, so the
/// prose cannot drift out of sync with the code. `cargo test --doc`
/// runs them all.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $path))]
            pub struct $name;
        };
    }

    chapter!(Introduction, "introduction.md");
    chapter!(GettingStarted, "getting-started.md");
    chapter!(Patches, "patches.md");
    chapter!(Occlusion, "occlusion.md");
    chapter!(TextureNetwork, "texture-network.md");
    chapter!(Fusion, "fusion.md");
    chapter!(Training, "training.md");
    chapter!(Evaluation, "evaluation.md");
    chapter!(Cli, "cli.md");
    chapter!(Reproducibility, "reproducibility.md");
}
