//! Interrogative uncertainty quantification for long-form language-model
//! outputs.
//!
//! The library samples responses to a prompt, decomposes them into atomic
//! claims, interrogates the model with claim-derived questions, and scores
//! each claim two ways: cross-sample consistency (how many sampled responses
//! entail the claim) and faithfulness (how strongly the model's decoupled
//! answers contradict the claim's context). The two signals combine into a
//! claim-level uncertainty score, with contradiction influence propagated
//! forward through configurable decay kernels.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`model`] — shared record types, content-addressed ids, validation
//! - [`backend`] — chat-completion client with caching, retries and a token
//!   ledger; HTTP and scripted implementations
//! - [`synthworld`] — deterministic synthetic knowledge worlds whose
//!   fabrication behaviour is known by construction
//! - [`store`] — append-only run store with a resumable manifest
//! - [`pipeline`] — stage orchestration: generate, decompose, question,
//!   answer, judge
//! - [`scoring`] — faithfulness, influence kernels, uncertainty scores
//! - [`baselines`] — entailment score, closeness centrality, frequency
//!   scoring, token-level baselines
//! - [`evaluation`] — correctness labeling, AUROC/AUPRC/Pearson, ablations
//! - [`report`] — tables, faithfulness landscapes, distribution summaries

pub mod backend;
pub mod baselines;
pub mod evaluation;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod scoring;
pub mod store;
pub mod synthworld;
