//! KV-Latent: attention heads whose query-key and value-output widths are
//! chosen independently, so a pre-trained decoder can be cut down to a smaller
//! KV cache and then recovered with a short two-stage training run.
//!
//! Modules, bottom-up:
//! - [`numerics`]: tensors and a reverse-mode tape.
//! - [`rope`]: rotary embeddings, the frequency-aware schedule and stability analytics.
//! - [`attention`]: decoupled-dimension grouped-query attention with a KV cache.
//! - [`model`]: a small pre-norm decoder LM, LoRA adapters and checkpoints.
//! - [`surgery`]: strided head down-sampling of a trained checkpoint.
//! - [`training`]: layer-wise distillation and end-to-end recovery.
//! - [`budget`]: KV-cache footprint arithmetic.

pub mod attention;
pub mod budget;
pub mod model;
pub mod numerics;
pub mod rope;
pub mod surgery;
pub mod training;
