//! Bounded attention on a miniature diffusion testbed.
//!
//! The crate trains a tiny conditional denoiser on synthetic colored-shape
//! scenes, then steers *where* each subject appears at sampling time only —
//! no layout ever enters training — through three mechanisms:
//!
//! * **bounded attention** — additive `{0, −∞}` masks on every
//!   cross/self-attention map, so pixels can only read tokens and pixels
//!   that belong to their subject (or the background);
//! * **bounded guidance** — a latent-space descent during the early
//!   denoising steps that pushes each subject's attention mass into its
//!   box, differentiated end-to-end through the denoiser by the built-in
//!   tape;
//! * **mask refinement** — per-interval KMeans clustering of self-attention
//!   rows, matched to subjects by intersection-over-minimum against soft
//!   cross-attention masks, replacing the coarse boxes with shapes the
//!   model actually drew.
//!
//! Start with the runnable demos, one per capability:
//!
//! ```text
//! cargo run --release -p battn --example masked_attention    # {0,−∞} masks on a toy map
//! cargo run --release -p battn --example autodiff_tape       # tape vs. finite differences
//! cargo run --release -p battn --example synthetic_scenes    # the dataset
//! cargo run --release -p battn --example train_denoiser      # short training run
//! cargo run --release -p battn --example guidance_descent    # loss + latent updates
//! cargo run --release -p battn --example mask_refinement     # clustering on planted maps
//! cargo run --release -p battn --example bounded_generation  # full two-phase sampler
//! cargo run --release -p battn --example query_analysis      # PCA query separation
//! cargo run --release -p battn --example layout_eval         # A/B leakage benchmark
//! ```
//!
//! The single `battn` binary exposes the same pipeline as `train`,
//! `generate`, `eval`, and `analyze` subcommands.

pub mod bounded_attention;
pub mod denoiser;
pub mod dump;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod img;
pub mod kernels;
pub mod pca;
pub mod refinement;
pub mod sampler;
pub mod scene;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
