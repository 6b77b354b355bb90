//! Tweet-domain masked language modeling, end to end.
//!
//! The pipeline runs from raw JSON-lines tweets to trained encoders and
//! their applications:
//!
//! - [`corpus`]: record parsing, selection and `<usr>`/`<url>` normalization
//! - [`tokenizer`]: byte-level BPE with reserved special tokens
//! - [`mlm`]: masked-example construction and batching
//! - [`tensor`] / [`autodiff`]: dense tensors and a reverse-mode tape
//! - [`model`]: BERT-style encoder with MLM, sequence and token heads
//! - [`optim`]: loss, schedule, Adam and the pre-training loop
//! - [`finetune`]: splits, class weights, fine-tuning loops and metrics
//! - [`embed`]: sentence embeddings and author profiling
//! - [`project`]: PCA projection and scatter output
//! - [`reference`]: published full-scale results kept for comparison
//! - [`synthetic`]: constructed fixtures with known structure

pub mod autodiff;
pub mod corpus;
pub mod embed;
pub mod finetune;
pub mod mlm;
pub mod model;
pub mod optim;
pub mod project;
pub mod reference;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
