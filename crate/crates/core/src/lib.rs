//! Low-resource neural machine translation on a small from-scratch
//! transformer: text normalization, BLEU, skip-gram augmentation, robust
//! token losses, diverse beam search, contrastive re-ranking and curriculum
//! training. Numeric code is generic over [`scalar::Scalar`] (`f32` or
//! `f64`); the aliases below fix the precision.

pub mod curriculum;
pub mod decoding;
pub mod embeddings;
pub mod losses;
pub mod metrics;
pub mod nnet;
pub mod pipeline;
pub mod reranker;
pub mod scalar;
pub mod synth;
pub mod textproc;

pub type Seq2SeqModelF32 = nnet::Seq2SeqModel<f32>;
pub type Seq2SeqModelF64 = nnet::Seq2SeqModel<f64>;
pub type RerankEncoderF32 = reranker::RerankEncoder<f32>;
pub type RerankEncoderF64 = reranker::RerankEncoder<f64>;
pub type EmbeddingTableF32 = embeddings::EmbeddingTable<f32>;
pub type EmbeddingTableF64 = embeddings::EmbeddingTable<f64>;
pub type BleuReportF64 = metrics::BleuReport<f64>;
