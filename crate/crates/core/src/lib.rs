//! Toy multimodal decoding engine: a seeded decoder-only transformer with a
//! prunable KV cache, attention-guided vision token selection, contrastive and
//! baseline decoding strategies with compute accounting, and object
//! hallucination metrics.

pub mod ct2s;
pub mod decoder;
pub mod metrics;
pub mod model;
pub mod numeric;
