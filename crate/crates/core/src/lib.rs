//! Domain-permissioned language model serving with an audit toolkit.
//!
//! A small decoder-only language model keeps all task knowledge in
//! per-security-domain low-rank adapters. An authenticating gateway maps
//! opaque credentials to domain sets and routes each query through the
//! adapters those domains are allowed to touch. The audit side measures
//! whether that routing actually enforces access control: membership
//! inference attacks aggregate into a domain distinguishability index, and
//! utility comparisons under right-vs-wrong credentials aggregate into a
//! utility gap index, with black-box audit games driving both over the wire
//! protocol.

pub mod audit;
pub mod checkpoint;
pub mod corpus;
pub mod domain;
pub mod fsutil;
pub mod game;
pub mod gateway;
pub mod grad;
pub mod mechanisms;
pub mod mia;
pub mod model;
pub mod rng;
pub mod server;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use domain::{DomainId, DomainSet};
pub use model::{AdapterSelection, BaseWeights, LoraAdapter, ModelConfig};
