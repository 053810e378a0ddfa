//! Rubric representation learning pipeline.
//!
//! Converts text-serialized records into task-aligned representations by
//! synthesizing and applying rubrics through an LLM provider abstraction,
//! then trains regularized downstream classifiers and evaluates them with
//! bootstrap AUROC/AUPRC confidence intervals. A deterministic mock provider
//! and a synthetic benchmark make the whole pipeline runnable hermetically.

pub mod cohort;
pub mod datamodel;
pub mod embeddings;
pub mod evaluation;
pub mod gateway;
pub mod learners;
pub mod par;
pub mod pipeline;
pub mod rubric;
pub mod synthbench;
pub mod transform;
